"""Axis-aligned voxel box algebra and the single-anchor parameterization.

Boxes are half-open in voxel units: a box covers ``[origin, origin + size)``
on each axis of its host grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from ._util import as_triple, round_half_up
from .exceptions import EncodeRangeError

IntTriple = Tuple[int, int, int]

ANCHOR_RATIO = 0.5


@dataclass(frozen=True)
class BoundingBox:
    origin: IntTriple
    size: IntTriple
    grid: IntTriple

    def __post_init__(self):
        origin = as_triple(self.origin, "origin", int)
        size = as_triple(self.size, "size", int)
        grid = as_triple(self.grid, "grid", int)
        for o, s, g in zip(origin, size, grid):
            if s < 1:
                raise ValueError(f"box size must be >= 1 on every axis, got {size}")
            if o < 0 or o + s > g:
                raise ValueError(f"box {origin}+{size} exceeds grid {grid}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "grid", grid)

    @property
    def end(self) -> IntTriple:
        return tuple(o + s for o, s in zip(self.origin, self.size))

    @property
    def center(self) -> Tuple[float, float, float]:
        return tuple(o + s / 2.0 for o, s in zip(self.origin, self.size))

    @property
    def volume(self) -> int:
        return int(np.prod(self.size, dtype=np.int64))

    @property
    def slices(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(o, e) for o, e in zip(self.origin, self.end))

    @classmethod
    def from_bounds(cls, lo: Sequence[int], hi: Sequence[int], grid: Sequence[int]) -> "BoundingBox":
        """Build from inclusive-exclusive bounds ``[lo, hi)``."""
        return cls(tuple(int(a) for a in lo), tuple(int(b) - int(a) for a, b in zip(lo, hi)), tuple(grid))

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "size": list(self.size), "grid": list(self.grid)}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(tuple(d["origin"]), tuple(d["size"]), tuple(d["grid"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "BoundingBox":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class AnchorParams:
    """Detection head output: normalized box center and anchor scale factors."""

    position: Tuple[float, float, float]
    scale: Tuple[float, float, float]

    def __post_init__(self):
        position = as_triple(self.position, "position")
        scale = as_triple(self.scale, "scale")
        for v in position + scale:
            if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"anchor parameters must lie in [0, 1], got {position + scale}")
        object.__setattr__(self, "position", position)
        object.__setattr__(self, "scale", scale)

    def as_array(self) -> np.ndarray:
        return np.array(self.position + self.scale, dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "AnchorParams":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (6,):
            raise ValueError(f"expected 6 anchor values, got {values.shape}")
        return cls(tuple(values[:3]), tuple(values[3:]))


def _check_same_grid(a: BoundingBox, b: BoundingBox):
    if a.grid != b.grid:
        raise ValueError(f"boxes live on different grids: {a.grid} vs {b.grid}")


def _overlap(a: BoundingBox, b: BoundingBox) -> int:
    inter = 1
    for lo_a, hi_a, lo_b, hi_b in zip(a.origin, a.end, b.origin, b.end):
        inter *= max(0, min(hi_a, hi_b) - max(lo_a, lo_b))
    return inter


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union by voxel counts."""
    _check_same_grid(a, b)
    inter = _overlap(a, b)
    return inter / (a.volume + b.volume - inter)


def enclosing_box(a: BoundingBox, b: BoundingBox) -> BoundingBox:
    _check_same_grid(a, b)
    lo = [min(x, y) for x, y in zip(a.origin, b.origin)]
    hi = [max(x, y) for x, y in zip(a.end, b.end)]
    return BoundingBox.from_bounds(lo, hi, a.grid)


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """Generalized IoU: IoU minus the empty fraction of the enclosing box."""
    _check_same_grid(a, b)
    inter = _overlap(a, b)
    union = a.volume + b.volume - inter
    hull = enclosing_box(a, b).volume
    return inter / union - (hull - union) / hull


def contains(outer: BoundingBox, inner: BoundingBox) -> bool:
    _check_same_grid(outer, inner)
    return all(
        oo <= io and ie <= oe
        for oo, oe, io, ie in zip(outer.origin, outer.end, inner.origin, inner.end)
    )


def decode_anchor(params: AnchorParams, grid_shape, anchor_ratio: float = ANCHOR_RATIO) -> BoundingBox:
    """Turn anchor parameters into a voxel box on ``grid_shape``.

    The extent is at least one voxel and at most the grid; boxes crossing a
    border are shifted back inside rather than truncated.
    """
    grid = as_triple(grid_shape, "grid_shape", int)
    origin, size = [], []
    for pos, scale, g in zip(params.position, params.scale, grid):
        extent = min(g, max(1, round_half_up(scale * anchor_ratio * g)))
        lo = round_half_up(pos * g - extent / 2.0)
        origin.append(int(np.clip(lo, 0, g - extent)))
        size.append(extent)
    return BoundingBox(tuple(origin), tuple(size), grid)


def encode_box(box: BoundingBox, grid_shape=None, anchor_ratio: float = ANCHOR_RATIO) -> AnchorParams:
    """Inverse of :func:`decode_anchor` (exact up to voxel rounding)."""
    grid = box.grid if grid_shape is None else as_triple(grid_shape, "grid_shape", int)
    position, scale = [], []
    for c, s, g in zip(box.center, box.size, grid):
        anchor = anchor_ratio * g
        if s > anchor + 1e-9:
            raise EncodeRangeError(f"box extent {s} exceeds anchor extent {anchor} on a {g}-voxel axis")
        position.append(c / g)
        scale.append(s / anchor)
    return AnchorParams(tuple(position), tuple(scale))


def expand_clamp_box(box: BoundingBox, target_size=(128, 128, 128)) -> BoundingBox:
    """Resize ``box`` to exactly ``target_size`` about its center, shifting to stay in the grid."""
    target = as_triple(target_size, "target_size", int)
    origin = []
    for c, t, g in zip(box.center, target, box.grid):
        if t > g:
            raise ValueError(f"target size {target} larger than grid {box.grid}")
        lo = round_half_up(c - t / 2.0)
        origin.append(int(np.clip(lo, 0, g - t)))
    return BoundingBox(tuple(origin), target, box.grid)


def rescale_box(box: BoundingBox, factor: int, grid_shape=None) -> BoundingBox:
    """Map a box to a grid ``factor`` times finer (voxel coordinates multiplied)."""
    factor = int(factor)
    grid = tuple(g * factor for g in box.grid) if grid_shape is None else as_triple(grid_shape, "grid_shape", int)
    return BoundingBox(
        tuple(o * factor for o in box.origin),
        tuple(s * factor for s in box.size),
        grid,
    )
