import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aortacascade.exceptions import EncodeRangeError
from aortacascade.geometry import (
    AnchorParams,
    BoundingBox,
    contains,
    decode_anchor,
    enclosing_box,
    encode_box,
    expand_clamp_box,
    giou,
    iou,
    rescale_box,
)

from oracles import box_iou_bruteforce

G16 = (16, 16, 16)


@st.composite
def boxes(draw, grid=G16):
    origin, size = [], []
    for g in grid:
        lo = draw(st.integers(0, g - 1))
        hi = draw(st.integers(lo + 1, g))
        origin.append(lo)
        size.append(hi - lo)
    return BoundingBox(tuple(origin), tuple(size), grid)


def test_box_validation():
    with pytest.raises(ValueError):
        BoundingBox((0, 0, 0), (0, 1, 1), G16)
    with pytest.raises(ValueError):
        BoundingBox((10, 0, 0), (8, 1, 1), G16)
    with pytest.raises(ValueError):
        BoundingBox((-1, 0, 0), (2, 1, 1), G16)


def test_json_roundtrip():
    b = BoundingBox((1, 2, 3), (4, 5, 6), G16)
    assert BoundingBox.from_json(b.to_json()) == b
    assert b.to_dict() == {"origin": [1, 2, 3], "size": [4, 5, 6], "grid": [16, 16, 16]}


def test_iou_examples():
    a = BoundingBox((0, 0, 0), (4, 4, 4), G16)
    b = BoundingBox((2, 0, 0), (4, 4, 4), G16)
    assert iou(a, a) == 1.0
    assert iou(a, b) == pytest.approx(1 / 3)
    assert iou(a, BoundingBox((8, 8, 8), (2, 2, 2), G16)) == 0.0


def test_giou_examples():
    a = BoundingBox((0, 0, 0), (4, 4, 4), G16)
    assert giou(a, a) == 1.0
    adjacent = BoundingBox((4, 0, 0), (4, 4, 4), G16)
    assert iou(a, adjacent) == 0.0
    assert giou(a, adjacent) == 0.0
    c1 = BoundingBox((0, 0, 0), (2, 2, 2), G16)
    c2 = BoundingBox((8, 8, 8), (2, 2, 2), G16)
    assert giou(c1, c2) == pytest.approx(-0.984)


def test_different_grids_rejected():
    with pytest.raises(ValueError):
        iou(BoundingBox((0, 0, 0), (1, 1, 1), G16), BoundingBox((0, 0, 0), (1, 1, 1), (8, 8, 8)))


@settings(max_examples=300, deadline=None)
@given(a=boxes(), b=boxes())
def test_giou_properties(a, b):
    i, g = iou(a, b), giou(a, b)
    assert g <= i + 1e-12
    assert -1 < g <= 1
    assert iou(b, a) == i and giou(b, a) == g
    inter = np.prod([max(0, min(ea, eb) - max(oa, ob))
                     for oa, ea, ob, eb in zip(a.origin, a.end, b.origin, b.end)])
    union = a.volume + b.volume - inter
    hull = enclosing_box(a, b).volume
    assert (abs(g - i) < 1e-12) == (hull == union)


@settings(max_examples=200, deadline=None)
@given(a=boxes(), b=boxes())
def test_iou_matches_voxel_counting(a, b):
    assert iou(a, b) == pytest.approx(box_iou_bruteforce(a, b), abs=1e-12)


def test_decode_examples():
    grid = (128, 128, 128)
    b = decode_anchor(AnchorParams((0.5,) * 3, (1.0,) * 3), grid)
    assert b.origin == (32, 32, 32) and b.size == (64, 64, 64)
    b = decode_anchor(AnchorParams((0.5,) * 3, (0.0,) * 3), grid)
    assert b.size == (1, 1, 1) and b.origin == (64, 64, 64)
    for scale in (0.0, 0.3, 1.0):
        assert decode_anchor(AnchorParams((0.0,) * 3, (scale,) * 3), grid).origin == (0, 0, 0)


def test_encode_examples():
    grid = (128, 128, 128)
    p = encode_box(BoundingBox((32, 32, 32), (64, 64, 64), grid))
    assert p.position == (0.5, 0.5, 0.5) and p.scale == (1.0, 1.0, 1.0)
    with pytest.raises(EncodeRangeError):
        encode_box(BoundingBox((0, 0, 0), (77, 10, 10), grid))


@settings(max_examples=200, deadline=None)
@given(
    pos=st.tuples(*[st.floats(0, 1)] * 3),
    scale=st.tuples(*[st.floats(2 / 64, 1)] * 3),
    g=st.sampled_from([32, 64, 128]),
)
def test_encode_decode_roundtrip(pos, scale, g):
    p = AnchorParams(pos, scale)
    grid = (g, g, g)
    box = decode_anchor(p, grid)
    q = encode_box(box)
    # border clamping moves the box center, so compare only where no shift happened
    for k in range(3):
        unclamped = 0 < box.origin[k] < g - box.size[k]
        if unclamped:
            assert abs(q.position[k] - p.position[k]) <= 1.0 / g + 1e-12
        assert abs(q.scale[k] - p.scale[k]) <= 1.0 / g + 1e-12


@settings(max_examples=200, deadline=None)
@given(values=st.lists(st.floats(0, 1), min_size=6, max_size=6))
def test_decode_always_valid(values):
    box = decode_anchor(AnchorParams.from_array(values), (128, 128, 128))
    assert all(o >= 0 and e <= 128 for o, e in zip(box.origin, box.end))


def test_contains_examples():
    a = BoundingBox((2, 2, 2), (8, 8, 8), G16)
    assert contains(a, a)
    assert contains(a, BoundingBox((3, 3, 2), (6, 6, 7), G16))
    for axis in range(3):
        origin = list(a.origin)
        origin[axis] -= 1
        assert not contains(a, BoundingBox(tuple(origin), a.size, G16))


def test_expand_examples():
    grid = (256, 256, 256)
    b = BoundingBox((96, 88, 78), (64, 80, 100), grid)
    out = expand_clamp_box(b)
    assert out.size == (128, 128, 128)
    assert out.center == b.center == (128.0, 128.0, 128.0)
    near = expand_clamp_box(BoundingBox((3, 100, 0), (20, 20, 20), grid))
    assert near.origin[0] == 0 and near.origin[2] == 0 and near.origin[1] > 0
    full = BoundingBox((10, 20, 30), (128, 128, 128), grid)
    assert expand_clamp_box(full) == full


@settings(max_examples=200, deadline=None)
@given(b=boxes(grid=(40, 40, 40)), t=st.integers(1, 40))
def test_expand_contains_input(b, t):
    out = expand_clamp_box(b, (t, t, t))
    assert out.size == (t, t, t)
    if all(s <= t for s in b.size):
        assert contains(out, b)


def test_rescale():
    b = BoundingBox((1, 2, 3), (4, 5, 6), (16, 16, 16))
    r = rescale_box(b, 2)
    assert r.origin == (2, 4, 6) and r.size == (8, 10, 12) and r.grid == (32, 32, 32)
