"""Cascade inference: ROI detection at 4 mm, focused sliding-window segmentation at 2 mm."""
from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional

import numpy as np

from .backends import DetectionBackend, SegmentationBackend
from .exceptions import AortaCascadeError, BackendError
from .geometry import AnchorParams, BoundingBox, decode_anchor, expand_clamp_box, iou, rescale_box
from .metrics import complete_containment, dsc, hd95, patch_coverage
from .preprocess import detection_downsample
from .roi_label import generate_roi_box
from .volume import Grid, Mask, Volume

ROI_SIZE = 128
PATCH_SIZE = 96
OVERLAP = 0.5


class StageError(AortaCascadeError):
    """A non-backend failure inside one cascade stage."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {type(exc).__name__}: {exc}")
        self.stage = stage


def detect_box(volume: Volume, backend: DetectionBackend) -> BoundingBox:
    """Run detection on the 4 mm grid and map the decoded box onto the full grid."""
    coarse = detection_downsample(volume)
    params = backend.detect(coarse)
    if not isinstance(params, AnchorParams):
        params = AnchorParams.from_array(params)
    box = decode_anchor(params, coarse.shape)
    factor = volume.shape[0] // coarse.shape[0]
    return rescale_box(box, factor, volume.shape)


def detect_roi(volume: Volume, backend: DetectionBackend, roi_size: int = ROI_SIZE) -> BoundingBox:
    """Locate the ROI on the full grid and return it expanded to ``roi_size`` voxels per axis."""
    return expand_clamp_box(detect_box(volume, backend), (roi_size,) * 3)


def crop_roi(grid: Grid, box: BoundingBox) -> Grid:
    """Copy the sub-grid under ``box``; the world origin moves to the box corner."""
    if box.grid != grid.shape:
        raise ValueError(f"box grid {box.grid} does not match image shape {grid.shape}")
    origin = tuple(o + i * s for o, i, s in zip(grid.origin, box.origin, grid.spacing))
    return grid.with_data(grid.data[box.slices], origin=origin)


def paste_back(roi_mask: Mask, box: BoundingBox, full_shape=None) -> Mask:
    """Embed ``roi_mask`` at ``box`` inside an all-zero mask of ``full_shape``."""
    full_shape = box.grid if full_shape is None else tuple(int(n) for n in full_shape)
    if tuple(full_shape) != box.grid:
        raise ValueError(f"full shape {full_shape} does not match box grid {box.grid}")
    if roi_mask.shape != box.size:
        raise ValueError(f"ROI mask shape {roi_mask.shape} does not match box size {box.size}")
    data = np.zeros(full_shape, dtype=np.uint8)
    data[box.slices] = roi_mask.data
    origin = tuple(o - i * s for o, i, s in zip(roi_mask.origin, box.origin, roi_mask.spacing))
    return Mask(data, roi_mask.spacing, origin)


def sliding_window_positions(image_extent: int, patch_extent: int = PATCH_SIZE, overlap: float = OVERLAP) -> List[int]:
    """Patch start positions along one axis; the last patch is flush with the image end."""
    if patch_extent > image_extent:
        raise ValueError(f"patch extent {patch_extent} exceeds image extent {image_extent}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(1, int(patch_extent * (1.0 - overlap)))
    last = image_extent - patch_extent
    positions = list(range(0, last + 1, stride))
    if positions[-1] != last:
        positions.append(last)
    return positions


def patch_schedule(shape, patch=PATCH_SIZE, overlap=OVERLAP):
    axes = [sliding_window_positions(n, patch, overlap) for n in shape]
    return list(product(*axes))


def segment_roi(volume: Volume, backend: SegmentationBackend, patch: int = PATCH_SIZE,
                overlap: float = OVERLAP, jobs: int = 1, schedule=None) -> Mask:
    """Sliding-window segmentation: mean logit over covering patches, foreground iff > 0.

    ``sigmoid(mean) > 0.5`` is evaluated as ``mean > 0``. Patch results are
    merged in sorted position order so the output does not depend on the
    schedule order or on ``jobs``.
    """
    shape = volume.shape
    if schedule is None:
        schedule = patch_schedule(shape, patch, overlap)

    def run(pos):
        sub = BoundingBox(pos, (patch,) * 3, shape)
        logits = np.asarray(backend.segment(crop_roi(volume, sub)))
        if logits.shape != sub.size:
            raise BackendError(f"backend returned shape {logits.shape} for a {sub.size} patch", "segment")
        return tuple(pos), sub, logits

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, schedule))
    else:
        results = [run(pos) for pos in schedule]

    total = np.zeros(shape, dtype=np.float64)
    count = np.zeros(shape, dtype=np.int32)
    for _, sub, logits in sorted(results, key=lambda r: r[0]):
        total[sub.slices] += logits
        count[sub.slices] += 1
    if (count == 0).any():
        raise ValueError("patch schedule leaves voxels uncovered")
    mean = total / count
    return Mask((mean > 0).astype(np.uint8), volume.spacing, volume.origin)


@dataclass
class CascadeReport:
    roi_box: BoundingBox
    timings: Dict[str, float]
    patch_coverage: float
    metrics: Optional[Dict[str, object]] = None
    detected_box: Optional[BoundingBox] = None

    def to_dict(self) -> dict:
        return {
            "roi_box": self.roi_box.to_dict(),
            "detected_box": None if self.detected_box is None else self.detected_box.to_dict(),
            "timings_s": dict(self.timings),
            "patch_coverage": self.patch_coverage,
            "metrics": self.metrics,
        }


def evaluate_case(pred_mask: Mask, gt_mask: Mask, roi_box: BoundingBox, detected_box: BoundingBox = None,
                  margin: float = 20.0, axial_extent: int = ROI_SIZE) -> dict:
    """Segmentation and detection metrics for one case.

    ``dsc_roi`` restricts both masks to the crop box. IoU and complete
    containment are computed for the raw detection (``detected_box``, when
    given) and for the expanded crop box against the labelled ROI.
    """
    gt_box = generate_roi_box(gt_mask, axial_extent=axial_extent, margin=margin)
    detected_box = roi_box if detected_box is None else detected_box
    inside = roi_box.slices
    both = pred_mask.count > 0 and gt_mask.count > 0
    return {
        "dsc": dsc(pred_mask, gt_mask),
        "dsc_roi": dsc(pred_mask.data[inside], gt_mask.data[inside]),
        "hd95_mm": hd95(pred_mask, gt_mask, gt_mask.spacing) if both else None,
        "iou": iou(detected_box, gt_box),
        "complete_containment": complete_containment(detected_box, gt_box, margin, gt_mask.spacing),
        "roi_complete_containment": complete_containment(roi_box, gt_box, margin, gt_mask.spacing),
        "gt_box": gt_box.to_dict(),
    }


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except BackendError as exc:
        if exc.stage is None:
            raise BackendError(str(exc), name) from exc
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_cascade(volume: Volume, detector: DetectionBackend, segmenter: SegmentationBackend,
                gt: Optional[Mask] = None, roi_size: int = ROI_SIZE, patch: int = PATCH_SIZE,
                overlap: float = OVERLAP, margin: float = 20.0, jobs: int = 1):
    """Detect → crop → segment → paste back. Returns ``(full-frame mask, CascadeReport)``."""
    timings = {}
    t_start = time.perf_counter()

    t = time.perf_counter()
    detected = _stage("detect", detect_box, volume, detector)
    box = _stage("detect", expand_clamp_box, detected, (roi_size,) * 3)
    timings["detect"] = time.perf_counter() - t

    t = time.perf_counter()
    roi = _stage("crop", crop_roi, volume, box)
    timings["crop"] = time.perf_counter() - t

    t = time.perf_counter()
    roi_mask = _stage("segment", segment_roi, roi, segmenter, patch, overlap, jobs)
    timings["segment"] = time.perf_counter() - t

    t = time.perf_counter()
    full = _stage("paste", paste_back, roi_mask, box, volume.shape)
    timings["paste"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t_start

    metrics = None
    if gt is not None:
        metrics = _stage("evaluate", evaluate_case, full, gt, box, detected, margin, roi_size)
    report = CascadeReport(box, timings, patch_coverage((patch,) * 3, (roi_size,) * 3), metrics, detected)
    return full, report
