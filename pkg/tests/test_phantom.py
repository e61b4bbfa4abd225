import json

import numpy as np
import pytest
from scipy import ndimage

from aortacascade.geometry import contains
from aortacascade.phantom import (
    PhantomSpec,
    analytic_arch_top,
    analytic_roi,
    check_fits,
    cross_section,
    generate_phantom,
    phantom_mask,
    random_spec,
)
from aortacascade.roi_label import axial_mass_profile, generate_roi_box, trim_roi_margins
from aortacascade.volume import Mask

SHAPE = (256, 256, 256)


def test_default_phantom(default_phantom):
    spec, volume, mask = default_phantom
    assert mask.count > 0
    assert volume.shape == mask.shape == SHAPE
    profile = axial_mass_profile(mask).values
    zc = int(spec.arch_center[2] / 2)
    top = analytic_arch_top(spec, SHAPE, 2.0)
    # well above the arch the profile has collapsed
    assert profile[top + 5] < 0.5 * profile[zc - 10]


def test_noise_free_two_values():
    volume, mask = generate_phantom(PhantomSpec(noise_sigma=0))
    assert set(np.unique(volume.data)) == {1024.0, 1324.0}
    assert np.array_equal(volume.data == 1324.0, mask.data.astype(bool))


def test_same_seed_bit_identical():
    spec = PhantomSpec(seed=4)
    v1, m1 = generate_phantom(spec, shape=(128,) * 3, spacing=4.0)
    v2, m2 = generate_phantom(spec, shape=(128,) * 3, spacing=4.0)
    assert v1 == v2 and m1 == m2
    v3, _ = generate_phantom(PhantomSpec(seed=5), shape=(128,) * 3, spacing=4.0)
    assert v3 != v1


def test_noise_does_not_touch_mask():
    _, m_clean = generate_phantom(PhantomSpec(noise_sigma=0), shape=(128,) * 3, spacing=4.0)
    _, m_noisy = generate_phantom(PhantomSpec(noise_sigma=200), shape=(128,) * 3, spacing=4.0)
    assert m_clean == m_noisy


def test_single_component(default_phantom):
    _, _, mask = default_phantom
    _, n = ndimage.label(mask.data, structure=ndimage.generate_binary_structure(3, 1))
    assert n == 1


@pytest.mark.parametrize("radius", [8.0, 11.0, 14.0])
def test_voxel_count_tracks_cylinder_volume(radius):
    spec = PhantomSpec(tube_radius_asc=radius, tube_radius_desc=radius, branch_count=0, noise_sigma=0)
    mask = phantom_mask(spec, SHAPE, 2.0)
    zc = spec.arch_center[2]
    # straight two-limb section between 70 and 10 mm below the arch center
    lo, hi = int(np.ceil((zc - 70) / 2)), int(np.floor((zc - 10) / 2))
    voxels = mask[:, :, lo:hi].sum()
    analytic = 2 * np.pi * radius ** 2 * (hi - lo) * 2.0 / 8.0
    assert voxels == pytest.approx(analytic, rel=0.10)


def test_cross_section_area():
    spec = PhantomSpec(branch_count=0)
    area, (x, _) = cross_section(spec, spec.arch_center[2] - 150)
    assert area == pytest.approx(np.pi * spec.tube_radius_desc ** 2, rel=1e-4)
    assert x == pytest.approx(spec.arch_center[0])


def test_spec_json_roundtrip():
    spec = random_spec(3)
    assert PhantomSpec.from_json(json.dumps(spec.to_dict())) == spec
    with pytest.raises(ValueError):
        PhantomSpec.from_dict({"bogus": 1})


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(tube_radius_asc=40)
    with pytest.raises(ValueError):
        PhantomSpec(noise_sigma=-1)
    with pytest.raises(ValueError):
        check_fits(PhantomSpec(), (64, 64, 64), 2.0)


def test_analytic_roi_matches_labeler(default_phantom):
    spec, _, mask = default_phantom
    a, g = analytic_roi(spec), generate_roi_box(mask)
    assert max(abs(p - q) for p, q in zip(a.origin + a.end, g.origin + g.end)) <= 2
    assert contains(g, trim_roi_margins(a, 20, 2.0))


def test_margin_zero_isolates_center():
    spec = PhantomSpec(noise_sigma=0)
    mask = Mask(phantom_mask(spec, SHAPE, 2.0), 2.0)
    a, g = analytic_roi(spec, margin=0), generate_roi_box(mask, margin=0)
    assert all(abs(p - q) <= 1 for p, q in zip(a.center[:2], g.center[:2]))


def test_arch_only_spec():
    spec = PhantomSpec(descending_length=0, ascending_length=0, branch_count=0, noise_sigma=0)
    mask = Mask(phantom_mask(spec, SHAPE, 2.0), 2.0)
    a, g = analytic_roi(spec), generate_roi_box(mask)
    assert max(abs(p - q) for p, q in zip(a.origin + a.end, g.origin + g.end)) <= 2
