"""scikit-learn style wrappers so the pipeline composes with ``Pipeline``/``clone``.

All estimators are stateless apart from backend checks; ``fit`` validates
inputs and returns ``self``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backends import DetectionBackend, SegmentationBackend
from .cascade import OVERLAP, PATCH_SIZE, ROI_SIZE, run_cascade
from .metrics import dsc
from .preprocess import CANONICAL_SIZE, WORKING_SPACING, preprocess
from .roi_label import DEFAULT_AXIAL_EXTENT, DEFAULT_GAMMA, DEFAULT_MARGIN_MM, DEFAULT_TAU, generate_roi_box
from .validation import check_grids, check_pair


class CTPreprocessor(TransformerMixin, BaseEstimator):
    """Resample → crop/pad → HU shift, applied to each grid in ``X``."""

    def __init__(self, spacing=WORKING_SPACING, size=CANONICAL_SIZE, shift=True):
        self.spacing = spacing
        self.size = size
        self.shift = shift

    def fit(self, X, y=None):
        check_grids(X)
        if not self.spacing > 0 or self.size < 1:
            raise ValueError("spacing must be > 0 and size >= 1")
        self.fitted_ = True
        return self

    def transform(self, X):
        return [g for g, _ in self.transform_with_offsets(X)]

    def transform_with_offsets(self, X):
        """Like :meth:`transform` but also returns the crop/pad offsets per grid."""
        check_is_fitted(self)
        return [preprocess(g, self.spacing, self.size, self.shift) for g in check_grids(X)]


class ROILabeler(TransformerMixin, BaseEstimator):
    """Masks → ground-truth ROI boxes."""

    def __init__(self, margin=DEFAULT_MARGIN_MM, axial_extent=DEFAULT_AXIAL_EXTENT,
                 gamma=DEFAULT_GAMMA, tau=DEFAULT_TAU):
        self.margin = margin
        self.axial_extent = axial_extent
        self.gamma = gamma
        self.tau = tau

    def fit(self, X, y=None):
        check_grids(X, kind="mask")
        self.fitted_ = True
        return self

    def transform(self, X):
        check_is_fitted(self)
        return [
            generate_roi_box(m, self.axial_extent, self.margin, self.gamma, self.tau)
            for m in check_grids(X, kind="mask")
        ]


class CascadeSegmenter(BaseEstimator):
    """Detection + focused segmentation with pluggable backends.

    ``predict`` returns full-frame masks; ``score`` is the mean DSC.
    """

    def __init__(self, detector=None, segmenter=None, roi_size=ROI_SIZE, patch=PATCH_SIZE,
                 overlap=OVERLAP, margin=DEFAULT_MARGIN_MM, jobs=1):
        self.detector = detector
        self.segmenter = segmenter
        self.roi_size = roi_size
        self.patch = patch
        self.overlap = overlap
        self.margin = margin
        self.jobs = jobs

    def fit(self, X=None, y=None):
        if not isinstance(self.detector, DetectionBackend):
            raise TypeError("detector must provide detect(volume) -> AnchorParams")
        if not isinstance(self.segmenter, SegmentationBackend):
            raise TypeError("segmenter must provide segment(patch) -> logits")
        if not self.patch <= self.roi_size:
            raise ValueError("patch must not exceed roi_size")
        self.fitted_ = True
        return self

    def _run(self, volume, gt=None):
        return run_cascade(volume, self.detector, self.segmenter, gt, self.roi_size,
                           self.patch, self.overlap, self.margin, self.jobs)

    def predict(self, X):
        check_is_fitted(self)
        return [self._run(v)[0] for v in check_grids(X, kind="volume")]

    def predict_with_reports(self, X, y=None):
        check_is_fitted(self)
        volumes = check_grids(X, kind="volume")
        masks = [None] * len(volumes) if y is None else check_grids(y, kind="mask")
        return [self._run(v, m) for v, m in zip(volumes, masks)]

    def score(self, X, y):
        preds = self.predict(X)
        gts = check_grids(y, kind="mask")
        for p, g in zip(preds, gts):
            check_pair(p, g)
        return float(np.mean([dsc(p, g) for p, g in zip(preds, gts)]))
