"""Cascade ROI detection and focused segmentation of the thoracic aorta in CT."""
__version__ = "0.1.0"

from .exceptions import (
    AortaCascadeError,
    BackendError,
    DataError,
    DegenerateTestError,
    DetectionFailureError,
    EmptyMaskError,
    EncodeRangeError,
    FormatError,
    OrientationError,
    UndefinedMetricError,
)
from .volume import Mask, Volume, read_nifti, write_nifti
from .preprocess import crop_pad_canonical, detection_downsample, hu_shift, preprocess, resample_isotropic
from .geometry import (
    AnchorParams,
    BoundingBox,
    decode_anchor,
    encode_box,
    expand_clamp_box,
    giou,
    iou,
    rescale_box,
)
from .roi_label import arch_top_slice, axial_mass_profile, generate_roi_box, trim_roi_margins
from .metrics import complete_containment, dsc, hd95, patch_coverage, wilcoxon_signed_rank
from .detect_head import (
    DetectionHeadParams,
    HeadConfig,
    dice_ce_loss,
    giou_loss,
    head_backward,
    head_forward,
    hidden_layer_sizes,
    init_params,
    load_params,
    save_params,
)
from .phantom import PhantomSpec, analytic_roi, generate_phantom
from .cascade import run_cascade, segment_roi, sliding_window_positions
