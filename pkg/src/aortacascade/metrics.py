"""Segmentation and detection evaluation metrics."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from ._util import as_triple
from .exceptions import DegenerateTestError, UndefinedMetricError
from .geometry import BoundingBox, contains
from .roi_label import trim_roi_margins
from .volume import Mask

EXACT_MAX_N = 25

_FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)


def _binary(m) -> np.ndarray:
    return (m.data if isinstance(m, Mask) else np.asarray(m)) != 0


def dsc(a, b) -> float:
    """Dice similarity coefficient; 1 when both masks are empty."""
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with at least one face neighbour in the background (outside counts)."""
    fg = _binary(mask)
    return fg & ~ndimage.binary_erosion(fg, structure=_FACE_CONNECTIVITY, border_value=0)


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Pooled distances (mm) from each surface of one mask to the surface of the other."""
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    if not a.any() or not b.any():
        raise UndefinedMetricError("surface distance is undefined for an empty mask")
    spacing = as_triple(spacing, "spacing")
    # surfaces only depend on the union's bounding box plus a one-voxel rim
    idx = np.nonzero(a | b)
    crop = tuple(slice(max(int(i.min()) - 1, 0), int(i.max()) + 2) for i in idx)
    a, b = a[crop], b[crop]
    sa, sb = surface_voxels(a), surface_voxels(b)
    to_b = ndimage.distance_transform_edt(~sb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~sa, sampling=spacing)
    return np.concatenate([to_b[sa], to_a[sb]])


def hd95(a, b, spacing=None) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances."""
    if spacing is None:
        spacing = a.spacing if isinstance(a, Mask) else (1.0, 1.0, 1.0)
    return float(np.percentile(surface_distances(a, b, spacing), 95))


def complete_containment(pred: BoundingBox, gt: BoundingBox, margin: float = 20.0, spacing=2.0) -> bool:
    """True when ``pred`` encloses the margin-trimmed ground-truth box."""
    return contains(pred, trim_roi_margins(gt, margin, spacing))


def patch_coverage(patch_shape, image_shape) -> float:
    patch = as_triple(patch_shape, "patch_shape", int)
    image = as_triple(image_shape, "image_shape", int)
    if any(p > i for p, i in zip(patch, image)):
        raise ValueError(f"patch {patch} larger than image {image}")
    if min(patch) < 1:
        raise ValueError("patch extents must be >= 1")
    return float(np.prod(patch, dtype=np.float64) / np.prod(image, dtype=np.float64))


# --- Wilcoxon signed-rank ----------------------------------------------------

class WilcoxonResult(NamedTuple):
    statistic: float
    pvalue: float
    method: str
    n: int


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    start = 0
    for end in range(1, values.size + 1):
        if end == values.size or sorted_vals[end] != sorted_vals[start]:
            ranks[order[start:end]] = 0.5 * (start + 1 + end)
            start = end
    return ranks


def exact_null_distribution(ranks):
    """Null distribution of the positive-rank sum for the given (possibly tied) ranks.

    Returns ``(support, pmf)``; ranks may be half-integers so the sum is
    tracked on a doubled integer scale.
    """
    doubled = np.rint(2 * np.asarray(ranks, dtype=np.float64)).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1)
    counts[0] = 1.0
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    support = np.arange(counts.size) / 2.0
    keep = counts > 0
    return support[keep], counts[keep] / 2.0 ** doubled.size


def wilcoxon_signed_rank(x, y=None, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. The statistic is ``min(W+, W-)``. Exact
    p-values come from the full null distribution for ``n <= exact_max_n``;
    larger samples use the tie-corrected normal approximation with continuity
    correction.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x if y is None else x - np.asarray(y, dtype=np.float64)
    if y is not None and x.shape != np.shape(y):
        raise ValueError("paired samples must have equal length")
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    statistic = min(w_plus, w_minus)

    if n <= exact_max_n:
        support, pmf = exact_null_distribution(ranks)
        lower = pmf[support <= w_plus + 1e-9].sum()
        upper = pmf[support >= w_plus - 1e-9].sum()
        return WilcoxonResult(statistic, float(min(1.0, 2.0 * min(lower, upper))), "exact", n)

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    dev = abs(w_plus - mean) - 0.5
    z = max(dev, 0.0) / math.sqrt(var)
    return WilcoxonResult(statistic, float(min(1.0, math.erfc(z / math.sqrt(2.0)))), "normal", n)


def summarize(values) -> dict:
    """Mean and (population) standard deviation, the ``mean ± std`` table convention."""
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if values.size == 0:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(values.mean()), "std": float(values.std()), "n": int(values.size)}
