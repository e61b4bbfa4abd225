"""Volumetric grid types and NIfTI-1 I/O.

Grids are stored in the canonical (sagittal, coronal, axial) index order with
the axial index increasing toward the head, i.e. RAS+ voxel axes.
"""
from __future__ import annotations

import gzip
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple, Union

import nibabel as nib
import numpy as np
from nibabel.filebasedimages import ImageFileError

from ._util import as_triple
from .exceptions import DataError, FormatError, OrientationError

Triple = Tuple[float, float, float]

_AXIS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    _dtype = np.float32

    def __post_init__(self):
        data = np.array(self.data, dtype=self._dtype, copy=True, order="C")
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"grid must be 3D with every axis >= 1, got shape {data.shape}")
        spacing = as_triple(self.spacing, "spacing")
        if not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        origin = as_triple(self.origin, "origin")
        self._check_values(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def _check_values(self, data):
        pass

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data, spacing=None, origin=None):
        """Return a grid of the same kind sharing geometry unless overridden."""
        return type(self)(
            data,
            self.spacing if spacing is None else spacing,
            self.origin if origin is None else origin,
        )

    def __eq__(self, other):
        return (
            type(self) is type(other)
            and self.shape == other.shape
            and np.array_equal(self.data, other.data)
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-6)
            and np.allclose(self.origin, other.origin, rtol=0, atol=1e-4)
        )

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, spacing={self.spacing}, origin={self.origin})"


class Volume(_Grid):
    """Scalar intensity grid (float32) with voxel spacing and world origin in mm."""

    _dtype = np.float32

    def _check_values(self, data):
        if not np.isfinite(data).all():
            raise DataError("volume contains NaN or infinite intensities")


class Mask(_Grid):
    """Binary grid (uint8, values in {0, 1}) aligned to a Volume."""

    _dtype = np.uint8

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.dtype == bool:
            pass
        elif not ((raw == 0) | (raw == 1)).all():
            raise DataError("mask values must be restricted to {0, 1}")
        super().__post_init__()

    @property
    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))


Grid = Union[Volume, Mask]


def _canonical_transform(affine):
    """Return io-orientation (axis, flip) pairs, rejecting oblique affines."""
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    norms = np.linalg.norm(rot, axis=0)
    if np.any(norms == 0):
        raise OrientationError("affine has a zero-length axis")
    unit = rot / norms
    nonzero = np.abs(unit) > _AXIS_TOL
    if not (nonzero.sum(axis=0) == 1).all() or not (nonzero.sum(axis=1) == 1).all():
        raise OrientationError("oblique orientation is not supported; axes must be a permutation/flip")
    return nib.orientations.io_orientation(affine)


def _grid_affine(spacing, origin):
    affine = np.diag(list(spacing) + [1.0])
    affine[:3, 3] = origin
    return affine


def read_nifti(path, kind=None) -> Grid:
    """Load a NIfTI-1 file and reorient it to canonical RAS+ voxel order.

    ``kind`` forces ``"volume"`` or ``"mask"``; by default uint8 files load as
    a :class:`Mask` and everything else as a :class:`Volume`.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        img = nib.load(str(path))
    except (ImageFileError, OSError, EOFError, ValueError, zlib.error, gzip.BadGzipFile) as exc:
        raise FormatError(f"{path}: not a readable NIfTI file ({exc})") from exc
    if type(img) is not nib.Nifti1Image:
        raise FormatError(f"{path}: unsupported format {type(img).__name__}; only NIfTI-1 is supported")
    if len(img.shape) != 3:
        raise FormatError(f"{path}: expected a 3D image, got shape {img.shape}")

    affine = img.affine
    ornt = _canonical_transform(affine)
    try:
        raw = np.asanyarray(img.dataobj)
    except (OSError, EOFError, ValueError, zlib.error) as exc:
        raise FormatError(f"{path}: truncated or corrupt payload ({exc})") from exc

    on_disk = img.get_data_dtype()
    if np.issubdtype(raw.dtype, np.floating) and np.isnan(raw).any():
        raise DataError(f"{path}: NaN voxels")

    # reorient voxel array; the world geometry follows from the new affine
    target = nib.orientations.axcodes2ornt(("R", "A", "S"))
    transform = nib.orientations.ornt_transform(ornt, target)
    data = nib.orientations.apply_orientation(raw, transform)
    new_affine = affine @ nib.orientations.inv_ornt_aff(transform, img.shape)
    spacing = tuple(float(s) for s in np.linalg.norm(new_affine[:3, :3], axis=0))
    origin = tuple(float(o) for o in new_affine[:3, 3])

    if kind is None:
        kind = "mask" if on_disk == np.uint8 else "volume"
    if kind == "mask":
        return Mask(data, spacing, origin)
    if kind == "volume":
        return Volume(data, spacing, origin)
    raise ValueError(f"kind must be 'volume' or 'mask', got {kind!r}")


def write_nifti(grid: Grid, path) -> None:
    """Write ``grid`` as little-endian NIfTI-1 (uint8 masks, float32 volumes)."""
    if not isinstance(grid, (Volume, Mask)):
        raise TypeError(f"expected Volume or Mask, got {type(grid).__name__}")
    dtype = np.dtype("<u1") if isinstance(grid, Mask) else np.dtype("<f4")
    header = nib.Nifti1Header(endianness="<")
    header.set_data_dtype(dtype)
    affine = _grid_affine(grid.spacing, grid.origin)
    img = nib.Nifti1Image(np.asarray(grid.data, dtype=dtype), affine, header=header)
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    img.header.set_zooms(grid.spacing)
    path = Path(path)
    try:
        nib.save(img, str(path))
    except OSError:
        raise
    except Exception as exc:  # nibabel wraps some write failures
        raise OSError(f"cannot write {path}: {exc}") from exc
