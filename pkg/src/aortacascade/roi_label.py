"""Automatic ROI bounding-box labels from aortic segmentation masks.

The axial position of the ROI is anchored on the last slice that still
carries arch-level mass: the per-slice foreground count is normalized, raised
to a power to separate heavy slices from light ones, and thresholded. The
box then extends ``margin`` mm above that slice and ``axial_extent`` voxels
downward. Transversally the box is centered on the mask's center of mass
inside the axial range and spans the mask extent plus ``margin`` per side.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._util import mm_to_voxels, round_half_up
from .exceptions import DetectionFailureError, EmptyMaskError
from .geometry import BoundingBox
from .volume import Mask

DEFAULT_GAMMA = 2.0
DEFAULT_TAU = 0.5
DEFAULT_MARGIN_MM = 20.0
DEFAULT_AXIAL_EXTENT = 128


@dataclass(frozen=True)
class MassProfile:
    values: np.ndarray

    @property
    def slice_count(self) -> int:
        return int(self.values.size)


def _mask_array(mask) -> np.ndarray:
    data = mask.data if isinstance(mask, Mask) else np.asarray(mask)
    if data.ndim != 3:
        raise ValueError(f"mask must be 3D, got shape {data.shape}")
    return data != 0


def axial_mass_profile(mask) -> MassProfile:
    """Per-slice foreground count divided by the largest slice count."""
    fg = _mask_array(mask)
    counts = fg.sum(axis=(0, 1), dtype=np.int64)
    peak = counts.max()
    if peak == 0:
        raise EmptyMaskError("cannot build a mass profile from an empty mask")
    return MassProfile(counts / float(peak))


def arch_top_slice(profile: MassProfile, gamma: float = DEFAULT_GAMMA, tau: float = DEFAULT_TAU) -> int:
    """Most superior slice whose transformed mass ``value**gamma`` reaches ``tau``."""
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if not 0 < tau < 1:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    values = np.asarray(profile.values if isinstance(profile, MassProfile) else profile, dtype=np.float64)
    passing = np.nonzero(values ** gamma >= tau)[0]
    if passing.size == 0:
        raise DetectionFailureError(f"no axial slice reaches the threshold (gamma={gamma}, tau={tau})")
    return int(passing[-1])


def _axial_range(top_slice, n_slices, margin_vox, axial_extent):
    top = min(n_slices - 1, top_slice + margin_vox)
    bottom = max(0, top - int(axial_extent) + 1)
    return bottom, top


def generate_roi_box(mask, axial_extent: int = DEFAULT_AXIAL_EXTENT, margin: float = DEFAULT_MARGIN_MM,
                     gamma: float = DEFAULT_GAMMA, tau: float = DEFAULT_TAU, spacing=None) -> BoundingBox:
    """Ground-truth ROI box for a (2 mm isotropic) aortic mask.

    ``spacing`` defaults to the mask's own spacing; pass it explicitly when
    ``mask`` is a bare array. Conversions from mm to voxels round half up.
    """
    fg = _mask_array(mask)
    if spacing is None:
        spacing = mask.spacing if isinstance(mask, Mask) else (1.0, 1.0, 1.0)
    spacing = tuple(float(s) for s in np.broadcast_to(spacing, (3,)))
    if margin < 0 or axial_extent < 1:
        raise ValueError("margin must be >= 0 and axial_extent >= 1")
    shape = fg.shape

    top_slice = arch_top_slice(axial_mass_profile(fg), gamma, tau)
    bottom, top = _axial_range(top_slice, shape[2], mm_to_voxels(margin, spacing[2]), axial_extent)

    slab = fg[:, :, bottom:top + 1]
    origin, size = [], []
    for axis in range(2):
        other = 1 - axis
        weights = slab.sum(axis=(other, 2), dtype=np.int64)
        idx = np.nonzero(weights)[0]
        if idx.size == 0:
            raise EmptyMaskError("no foreground inside the axial ROI range")
        first, last = int(idx[0]), int(idx[-1])
        com = float(np.dot(weights, np.arange(weights.size)) / weights.sum())
        m = mm_to_voxels(margin, spacing[axis])
        extent = last - first + 1 + 2 * m
        # voxel i covers [i, i + 1) so its center sits at i + 0.5
        start = round_half_up(com + 0.5 - extent / 2.0)
        start = min(start, first - m)
        start = max(start, last + m - extent + 1)
        start = max(0, start)
        origin.append(int(start))
        size.append(int(min(extent, shape[axis] - start)))
    return BoundingBox((origin[0], origin[1], bottom), (size[0], size[1], top - bottom + 1), shape)


def trim_roi_margins(box: BoundingBox, margin: float = DEFAULT_MARGIN_MM, spacing=2.0) -> BoundingBox:
    """Undo the labelling margins: shrink each transverse side and the superior side."""
    spacing = tuple(float(s) for s in np.broadcast_to(spacing, (3,)))
    mx, my, mz = (mm_to_voxels(margin, s) for s in spacing)
    sx, sy, sz = box.size
    if sx <= 2 * mx or sy <= 2 * my or sz <= mz:
        raise ValueError(f"box of size {box.size} is too small to trim a {margin} mm margin")
    ox, oy, oz = box.origin
    return BoundingBox((ox + mx, oy + my, oz), (sx - 2 * mx, sy - 2 * my, sz - mz), box.grid)
