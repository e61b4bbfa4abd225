import numpy as np


def round_half_up(x):
    """Round to nearest integer, ties toward +inf (works on scalars and arrays)."""
    out = np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def mm_to_voxels(mm, spacing):
    return round_half_up(float(mm) / float(spacing))


def as_triple(value, name="value", dtype=float):
    """Broadcast a scalar or 3-sequence to a tuple of three."""
    arr = np.atleast_1d(np.asarray(value))
    if arr.size == 1:
        arr = np.repeat(arr, 3)
    if arr.shape != (3,):
        raise ValueError(f"{name} must be a scalar or a length-3 sequence, got {value!r}")
    return tuple(dtype(v) for v in arr)
