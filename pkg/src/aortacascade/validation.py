"""Input validation helpers for the estimator layer and the CLI."""
from __future__ import annotations

import numpy as np

from .exceptions import DataError
from .volume import Mask, Volume


def check_grid(grid, kind=None, shape=None, spacing=None, name="input"):
    """Validate a single Volume/Mask, optionally its kind, shape and isotropic spacing."""
    if kind == "volume" and not isinstance(grid, Volume):
        raise TypeError(f"{name} must be a Volume, got {type(grid).__name__}")
    if kind == "mask" and not isinstance(grid, Mask):
        raise TypeError(f"{name} must be a Mask, got {type(grid).__name__}")
    if not isinstance(grid, (Volume, Mask)):
        raise TypeError(f"{name} must be a Volume or Mask, got {type(grid).__name__}")
    if shape is not None and grid.shape != tuple(np.broadcast_to(shape, (3,))):
        raise DataError(f"{name} has shape {grid.shape}, expected {tuple(np.broadcast_to(shape, (3,)))}")
    if spacing is not None and not np.allclose(grid.spacing, spacing, rtol=0, atol=1e-4):
        raise DataError(f"{name} has spacing {grid.spacing}, expected {spacing} mm")
    return grid


def check_grids(X, **kwargs):
    """Accept one grid or a sequence of grids; always return a list."""
    if isinstance(X, (Volume, Mask)):
        X = [X]
    grids = list(X)
    if not grids:
        raise ValueError("expected at least one grid")
    return [check_grid(g, name=f"input[{i}]", **kwargs) for i, g in enumerate(grids)]


def check_pair(a, b):
    if a.shape != b.shape:
        raise DataError(f"paired grids differ in shape: {a.shape} vs {b.shape}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-4):
        raise DataError(f"paired grids differ in spacing: {a.spacing} vs {b.spacing}")
