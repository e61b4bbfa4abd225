"""Image normalization: isotropic resampling, canonical crop/pad, HU shift."""
from __future__ import annotations

import numpy as np

from ._util import round_half_up
from .volume import Grid, Mask, Volume

WORKING_SPACING = 2.0
CANONICAL_SIZE = 256
DETECTION_SPACING = 4.0
HU_OFFSET = 1024.0


def _sample_axis(arr, axis, coords, mode):
    """Interpolate ``arr`` along one axis at fractional input indices ``coords``."""
    n = arr.shape[axis]
    if mode == "nearest":
        idx = np.clip(round_half_up(coords), 0, n - 1)
        return np.take(arr, idx, axis=axis)
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    w = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1.0 - w) + np.take(arr, hi, axis=axis) * w


def resample_isotropic(grid: Grid, target_spacing: float = WORKING_SPACING, mode: str = "linear") -> Grid:
    """Resample to ``(t, t, t)`` mm spacing keeping the world origin fixed.

    Output voxel ``j`` on axis ``i`` samples input index ``j * t / spacing_i``.
    Trilinear interpolation is applied separably, one axis at a time. Masks
    are always resampled with nearest neighbour.
    """
    if not target_spacing > 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    if mode not in ("linear", "nearest"):
        raise ValueError(f"mode must be 'linear' or 'nearest', got {mode!r}")
    if isinstance(grid, Mask):
        mode = "nearest"
    t = float(target_spacing)
    out = np.asarray(grid.data, dtype=np.float64 if mode == "linear" else grid.data.dtype)
    for axis, (n, s) in enumerate(zip(grid.shape, grid.spacing)):
        m = max(1, round_half_up(n * s / t))
        if m == n and s == t:
            continue
        coords = np.arange(m, dtype=np.float64) * (t / s)
        out = _sample_axis(out, axis, coords, mode)
    return grid.with_data(out, spacing=(t, t, t))


def crop_pad_canonical(grid: Grid, target: int = CANONICAL_SIZE, pad_value: float = 0.0):
    """Crop or pad to ``target`` voxels per axis.

    Transverse axes are center-cropped or symmetrically padded with ``pad_value`` (odd
    padding puts the extra voxel on the high side). The axial axis keeps the
    ``target`` most superior slices, or is padded on the inferior side.

    Returns ``(grid, offsets)`` where ``out_index = in_index + offsets[i]``.
    """
    target = int(target)
    if target < 1:
        raise ValueError("target size must be >= 1")
    data = grid.data
    offsets = []
    for axis, n in enumerate(grid.shape):
        if axis < 2:
            if n > target:
                start = (n - target) // 2
                data = np.take(data, np.arange(start, start + target), axis=axis)
                offsets.append(-start)
            else:
                low = (target - n) // 2
                pads = [(0, 0)] * 3
                pads[axis] = (low, target - n - low)
                data = np.pad(data, pads, constant_values=pad_value)
                offsets.append(low)
        else:
            if n > target:
                data = np.take(data, np.arange(n - target, n), axis=axis)
                offsets.append(-(n - target))
            else:
                pads = [(0, 0)] * 3
                pads[axis] = (target - n, 0)
                data = np.pad(data, pads, constant_values=pad_value)
                offsets.append(target - n)
    origin = tuple(o - off * s for o, off, s in zip(grid.origin, offsets, grid.spacing))
    return grid.with_data(data, origin=origin), tuple(offsets)


def hu_shift(volume: Volume) -> Volume:
    """Map HU intensities to non-negative values, ``max(0, I_HU + 1024)``."""
    if not isinstance(volume, Volume):
        raise TypeError("hu_shift applies to intensity volumes only")
    return volume.with_data(np.maximum(volume.data + np.float32(HU_OFFSET), 0.0))


def detection_downsample(volume: Volume, detection_spacing: float = DETECTION_SPACING,
                         expected_size: int = CANONICAL_SIZE) -> Volume:
    """Downsample the canonical 256³ / 2 mm volume to the 128³ / 4 mm detection grid."""
    if volume.shape != (expected_size,) * 3:
        raise ValueError(f"detection input must be {expected_size}³, got {volume.shape}")
    return resample_isotropic(volume, detection_spacing, mode="linear")


def preprocess(grid: Grid, spacing: float = WORKING_SPACING, size: int = CANONICAL_SIZE, shift: bool = True):
    """Resample, then crop/pad, then HU-shift (volumes only). Returns ``(grid, offsets)``."""
    resampled = resample_isotropic(grid, spacing, mode="nearest" if isinstance(grid, Mask) else "linear")
    # pad with HU air so that padding lands on 0 after the shift
    pad = -HU_OFFSET if shift and isinstance(grid, Volume) else 0.0
    canonical, offsets = crop_pad_canonical(resampled, size, pad_value=pad)
    if shift and isinstance(canonical, Volume):
        canonical = hu_shift(canonical)
    return canonical, offsets
