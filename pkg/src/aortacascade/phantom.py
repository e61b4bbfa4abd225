"""Synthetic candy-cane thoracic aorta phantoms with analytically known ROI.

The phantom lives in world millimetres. The arch is a half torus in the
parasagittal plane ``x = arch_center[0]`` joining a vertical ascending limb
(anterior, ``+y``) and a vertical descending limb (posterior, ``-y``).
Optional branch stubs rise vertically from the arch centerline.

:func:`analytic_roi` reproduces the ROI labelling rule from closed-form slice
cross-sections (exact interval unions integrated along the sagittal axis)
instead of voxel counts, so it can serve as an independent oracle for
:mod:`aortacascade.roi_label`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np

from ._util import as_triple, mm_to_voxels, round_half_up
from .geometry import BoundingBox
from .volume import Mask, Volume

_QUAD_POINTS = 2048


@dataclass(frozen=True)
class PhantomSpec:
    arch_center: Tuple[float, float, float] = (256.0, 256.0, 380.0)
    arch_radius: float = 30.0
    tube_radius_asc: float = 14.0
    tube_radius_desc: float = 11.0
    ascending_length: float = 80.0
    descending_length: float = 300.0
    branch_count: int = 3
    branch_radius: float = 4.0
    branch_length: float = 40.0
    branch_spread_deg: float = 35.0
    lumen_intensity: float = 1324.0
    background_intensity: float = 1024.0
    noise_sigma: float = 20.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch_center", as_triple(self.arch_center, "arch_center"))
        if max(self.tube_radius_asc, self.tube_radius_desc) >= self.arch_radius:
            raise ValueError("tube radii must be smaller than the arch radius")
        if min(self.tube_radius_asc, self.tube_radius_desc, self.arch_radius) <= 0:
            raise ValueError("radii must be positive")
        if self.branch_count and not 0 < self.branch_radius < self.tube_radius_arch:
            raise ValueError("branch radius must be positive and smaller than the arch tube")
        if min(self.ascending_length, self.descending_length, self.branch_length) < 0:
            raise ValueError("lengths must be non-negative")
        if self.lumen_intensity < 0 or self.background_intensity < 0:
            raise ValueError("intensities use the shifted (non-negative) convention")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def tube_radius_arch(self) -> float:
        return 0.5 * (self.tube_radius_asc + self.tube_radius_desc)

    def branch_bases(self):
        """(y, z) world coordinates where each stub leaves the arch centerline."""
        if self.branch_count == 0:
            return []
        if self.branch_count == 1:
            angles = np.zeros(1)
        else:
            spread = np.deg2rad(self.branch_spread_deg)
            angles = np.linspace(-spread, spread, self.branch_count)
        _, yc, zc = self.arch_center
        R = self.arch_radius
        return [(yc + R * np.sin(a), zc + R * np.cos(a)) for a in angles]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch_center"] = list(self.arch_center)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown phantom fields: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_json(cls, text: str) -> "PhantomSpec":
        return cls.from_dict(json.loads(text))


def random_spec(rng, noise_sigma: float = 0.0) -> PhantomSpec:
    """Randomized anatomy that fits a 256³ / 2 mm grid with clearance."""
    rng = np.random.default_rng(rng)
    return PhantomSpec(
        arch_center=(256 + rng.uniform(-20, 20), 256 + rng.uniform(-20, 20), 380 + rng.uniform(-30, 30)),
        arch_radius=rng.uniform(25, 40),
        tube_radius_asc=rng.uniform(10, 15),
        tube_radius_desc=rng.uniform(8, 13),
        ascending_length=rng.uniform(50, 100),
        descending_length=rng.uniform(150, 300),
        branch_count=int(rng.integers(0, 4)),
        branch_radius=rng.uniform(3, 5),
        branch_length=rng.uniform(25, 50),
        noise_sigma=noise_sigma,
        seed=int(rng.integers(2 ** 31)),
    )


def _world_axes(shape, spacing, origin):
    return [o + s * np.arange(n) for n, s, o in zip(shape, spacing, origin)]


def _extent_mm(spec: PhantomSpec):
    """World-space bounding box ``(lo, hi)`` of the phantom geometry."""
    xc, yc, zc = spec.arch_center
    R, ra = spec.arch_radius, spec.tube_radius_arch
    r_max = max(spec.tube_radius_asc, spec.tube_radius_desc, ra)
    z_lo = zc
    if spec.ascending_length > 0:
        z_lo = min(z_lo, zc - spec.ascending_length)
    if spec.descending_length > 0:
        z_lo = min(z_lo, zc - spec.descending_length)
    z_hi = zc + R + ra
    for _, zb in spec.branch_bases():
        z_hi = max(z_hi, zb + spec.branch_length)
    y_lo = yc - R - max(ra, spec.tube_radius_desc)
    y_hi = yc + R + max(ra, spec.tube_radius_asc)
    return np.array([xc - r_max, y_lo, z_lo]), np.array([xc + r_max, y_hi, z_hi])


def check_fits(spec: PhantomSpec, shape, spacing, origin=(0.0, 0.0, 0.0), clearance: int = 2):
    shape = as_triple(shape, "shape", int)
    spacing = as_triple(spacing, "spacing")
    origin = as_triple(origin, "origin")
    lo, hi = _extent_mm(spec)
    grid_lo = np.array(origin) + clearance * np.array(spacing)
    grid_hi = np.array(origin) + (np.array(shape) - 1 - clearance) * np.array(spacing)
    if np.any(lo < grid_lo) or np.any(hi > grid_hi):
        raise ValueError(
            f"phantom extent {lo.tolist()}..{hi.tolist()} mm does not fit the grid with "
            f"{clearance}-voxel clearance ({grid_lo.tolist()}..{grid_hi.tolist()} mm)"
        )


def phantom_mask(spec: PhantomSpec, shape, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Boolean voxel mask: voxel centers inside the tube geometry."""
    shape = as_triple(shape, "shape", int)
    spacing = as_triple(spacing, "spacing")
    origin = as_triple(origin, "origin")
    xs, ys, zs = _world_axes(shape, spacing, origin)
    xc, yc, zc = spec.arch_center
    R, ra = spec.arch_radius, spec.tube_radius_arch
    dx2 = ((xs - xc) ** 2)[:, None, None]
    dy = (ys - yc)[None, :, None]
    z = zs[None, None, :]
    h = z - zc

    rho = np.sqrt(dy ** 2 + h ** 2)
    mask = (h >= 0) & ((rho - R) ** 2 + dx2 <= ra * ra)

    limbs = (
        (yc + R, spec.ascending_length, spec.tube_radius_asc),
        (yc - R, spec.descending_length, spec.tube_radius_desc),
    )
    for y_axis, length, r in limbs:
        if length <= 0:
            continue
        in_z = (z >= zc - length) & (z < zc)
        mask |= in_z & (dx2 + ((ys - y_axis) ** 2)[None, :, None] <= r * r)

    rb = spec.branch_radius
    for yb, zb in spec.branch_bases():
        in_z = (z >= zb) & (z <= zb + spec.branch_length)
        mask |= in_z & (dx2 + ((ys - yb) ** 2)[None, :, None] <= rb * rb)
    return mask


def generate_phantom(spec: PhantomSpec = PhantomSpec(), shape=(256, 256, 256), spacing=2.0,
                     origin=(0.0, 0.0, 0.0)):
    """Render ``(Volume, Mask)`` for ``spec``; noise touches the intensities only."""
    shape = as_triple(shape, "shape", int)
    spacing = as_triple(spacing, "spacing")
    origin = as_triple(origin, "origin")
    check_fits(spec, shape, spacing, origin)
    inside = phantom_mask(spec, shape, spacing, origin)
    data = np.where(inside, spec.lumen_intensity, spec.background_intensity).astype(np.float32)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data += rng.normal(0.0, spec.noise_sigma, size=shape).astype(np.float32)
        np.maximum(data, 0.0, out=data)
    return Volume(data, spacing, origin), Mask(inside, spacing, origin)


# --- closed-form cross sections -------------------------------------------

def _intervals_at(spec: PhantomSpec, z: float, dx: np.ndarray):
    """Coronal intervals ``(a, b)`` of every component in the plane ``z``, per sagittal offset."""
    xc, yc, zc = spec.arch_center
    R, ra = spec.arch_radius, spec.tube_radius_arch
    out = []

    def chord(r):
        return np.sqrt(np.maximum(r * r - dx ** 2, 0.0)), dx ** 2 <= r * r

    h = z - zc
    if h >= 0:
        q, ok = chord(ra)
        outer2 = (R + q) ** 2 - h * h
        inner = np.sqrt(np.maximum((R - q) ** 2 - h * h, 0.0))
        ok = ok & (outer2 >= 0)
        outer = np.sqrt(np.maximum(outer2, 0.0))
        out.append((yc - outer, yc - inner, ok))
        out.append((yc + inner, yc + outer, ok))
    for y_axis, length, r in ((yc + R, spec.ascending_length, spec.tube_radius_asc),
                              (yc - R, spec.descending_length, spec.tube_radius_desc)):
        if length > 0 and zc - length <= z < zc:
            c, ok = chord(r)
            out.append((y_axis - c, y_axis + c, ok))
    for yb, zb in spec.branch_bases():
        if zb <= z <= zb + spec.branch_length:
            c, ok = chord(spec.branch_radius)
            out.append((yb - c, yb + c, ok))
    return out


def _union_length_moment(intervals, n):
    """Length and first y-moment of the union of per-column intervals."""
    if not intervals:
        return np.zeros(n), np.zeros(n)
    a = np.stack([np.where(ok, lo, np.inf) for lo, _, ok in intervals])
    b = np.stack([np.where(ok, hi, -np.inf) for _, hi, ok in intervals])
    order = np.argsort(a, axis=0)
    a = np.take_along_axis(a, order, axis=0)
    b = np.take_along_axis(b, order, axis=0)
    reach = np.full(n, -np.inf)
    length = np.zeros(n)
    moment = np.zeros(n)
    for k in range(a.shape[0]):
        start = np.maximum(a[k], reach)
        piece = b[k] > start
        safe_start = np.where(piece, start, 0.0)
        safe_end = np.where(piece, b[k], 0.0)
        length += safe_end - safe_start
        moment += 0.5 * (safe_end ** 2 - safe_start ** 2)
        reach = np.maximum(reach, b[k])
    return length, moment


def cross_section(spec: PhantomSpec, z: float):
    """Exact area (mm²) and centroid ``(x, y)`` of the phantom in the axial plane ``z``.

    Integrates union chord lengths over the sagittal offset with the midpoint rule.
    """
    xc = spec.arch_center[0]
    r_max = max(spec.tube_radius_asc, spec.tube_radius_desc, spec.tube_radius_arch, spec.branch_radius)
    step = 2.0 * r_max / _QUAD_POINTS
    dx = -r_max + step * (np.arange(_QUAD_POINTS) + 0.5)
    length, moment = _union_length_moment(_intervals_at(spec, z, dx), dx.size)
    area = float(length.sum() * step)
    if area == 0.0:
        return 0.0, (xc, float("nan"))
    x_bar = xc + float((length * dx).sum() * step) / area
    y_bar = float(moment.sum() * step) / area
    return area, (x_bar, y_bar)


def analytic_profile(spec: PhantomSpec, shape, spacing, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Exact cross-section area at every axial slice plane, in voxel units."""
    shape = as_triple(shape, "shape", int)
    spacing = as_triple(spacing, "spacing")
    origin = as_triple(origin, "origin")
    zs = origin[2] + spacing[2] * np.arange(shape[2])
    return np.array([cross_section(spec, z)[0] for z in zs]) / (spacing[0] * spacing[1])


def analytic_arch_top(spec: PhantomSpec, shape, spacing, origin=(0.0, 0.0, 0.0),
                      gamma: float = 2.0, tau: float = 0.5) -> int:
    """Slice at which the exact heavy/light crossing is reached, rounded up.

    The exact area profile passes the threshold up to some plane ``k`` and the
    continuous crossing lies in ``(k, k + 1]``; the oracle reports ``k + 1``.
    Rounding up keeps a fixed-length ROI anchored here above any box anchored
    on the voxel-counted profile, whose crossing can drift by a fraction of a slice.
    """
    area = analytic_profile(spec, shape, spacing, origin)
    passing = np.nonzero((area / area.max()) ** gamma >= tau)[0]
    return int(min(passing.max() + 1, area.size - 1))


def analytic_roi(spec: PhantomSpec, shape=(256, 256, 256), spacing=2.0, origin=(0.0, 0.0, 0.0),
                 margin: float = 20.0, axial_extent: int = 128,
                 gamma: float = 2.0, tau: float = 0.5) -> BoundingBox:
    """ROI box from closed-form phantom geometry, following the labelling conventions.

    The arch top is located on the exact area profile; transverse extents come
    from the component radii and the transverse center is the exact centroid
    over the axial range.
    """
    shape = as_triple(shape, "shape", int)
    spacing = as_triple(spacing, "spacing")
    origin = as_triple(origin, "origin")
    check_fits(spec, shape, spacing, origin)
    nz = shape[2]
    top = min(nz - 1, analytic_arch_top(spec, shape, spacing, origin, gamma, tau) + mm_to_voxels(margin, spacing[2]))
    bottom = max(0, top - int(axial_extent) + 1)

    zs = origin[2] + spacing[2] * np.arange(bottom, top + 1)
    areas, xs, ys = [], [], []
    for z in zs:
        a, (xb, yb) = cross_section(spec, z)
        if a > 0:
            areas.append(a)
            xs.append(xb)
            ys.append(yb)
    areas = np.array(areas)
    com_mm = (float(np.dot(areas, xs) / areas.sum()), float(np.dot(areas, ys) / areas.sum()))

    lo_mm, hi_mm = _transverse_extent_mm(spec, zs[0], zs[-1])
    lo, size = [], []
    for axis in range(2):
        s, o, n = spacing[axis], origin[axis], shape[axis]
        first = int(np.ceil((lo_mm[axis] - o) / s - 1e-9))
        last = int(np.floor((hi_mm[axis] - o) / s + 1e-9))
        m = mm_to_voxels(margin, s)
        extent = last - first + 1 + 2 * m
        center = (com_mm[axis] - o) / s + 0.5
        start = _place(center, extent, first - m, last + m, n)
        lo.append(start)
        size.append(min(extent, n - start))
    return BoundingBox((lo[0], lo[1], bottom), (size[0], size[1], top - bottom + 1), shape)


def _place(center, extent, must_lo, must_hi, n):
    """Start index of an ``extent``-long window centered at ``center`` covering ``[must_lo, must_hi]``."""
    start = round_half_up(center - extent / 2.0)
    start = min(start, must_lo)
    start = max(start, must_hi - extent + 1)
    return int(max(0, start))


def _transverse_extent_mm(spec: PhantomSpec, z_lo: float, z_hi: float):
    """World (x, y) extremes of the geometry intersected with the slab ``[z_lo, z_hi]``."""
    xc, yc, zc = spec.arch_center
    R, ra = spec.arch_radius, spec.tube_radius_arch
    x_r, y_lo, y_hi = 0.0, np.inf, -np.inf

    def take(r, ya, yb):
        nonlocal x_r, y_lo, y_hi
        x_r = max(x_r, r)
        y_lo = min(y_lo, ya)
        y_hi = max(y_hi, yb)

    if z_hi >= zc and z_lo <= zc + R + ra:
        h = max(0.0, z_lo - zc)
        outer = np.sqrt(max((R + ra) ** 2 - h * h, 0.0))
        take(ra if h <= R else np.sqrt(max(ra * ra - (h - R) ** 2, 0.0)), yc - outer, yc + outer)
    for y_axis, length, r in ((yc + R, spec.ascending_length, spec.tube_radius_asc),
                              (yc - R, spec.descending_length, spec.tube_radius_desc)):
        if length > 0 and z_lo < zc and z_hi >= zc - length:
            take(r, y_axis - r, y_axis + r)
    for yb, zb in spec.branch_bases():
        if z_hi >= zb and z_lo <= zb + spec.branch_length:
            take(spec.branch_radius, yb - spec.branch_radius, yb + spec.branch_radius)
    return (xc - x_r, y_lo), (xc + x_r, y_hi)
