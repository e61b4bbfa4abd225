import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aortacascade.detect_head import (
    DetectionHeadParams,
    HeadConfig,
    central_difference,
    dice_ce_loss,
    giou_loss,
    gradient_check,
    head_backward,
    head_forward,
    head_gradient_check,
    hidden_layer_sizes,
    init_params,
    load_params,
    predict_anchor,
    random_instance,
    random_overlapping_anchors,
    relative_error,
    save_params,
)
from aortacascade.geometry import AnchorParams, BoundingBox, decode_anchor, giou

SMALL = HeadConfig(embed_dim=3, bottleneck_spatial=2)


@pytest.mark.parametrize("args, expected", [
    ((384, 6, 2), [96, 24]),
    ((64, 8, 2), [32, 16]),
    ((50, 50, 0), []),
])
def test_hidden_layer_sizes(args, expected):
    assert hidden_layer_sizes(*args) == expected


def test_param_shapes_default():
    cfg = HeadConfig()
    shapes = cfg.param_shapes()
    assert cfg.fcn_sizes == [384, 96, 24, 6]
    assert shapes["conv.weight"] == (384, 192, 4, 4, 4)
    assert shapes["fcn.0.weight"] == (96, 384)
    assert shapes["fcn.1.weight"] == (24, 96)
    assert shapes["fcn.2.weight"] == (6, 24)
    assert HeadConfig.from_patch(128) == cfg


def test_init_determinism():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    c = init_params(SMALL, 4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["conv.weight"], c["conv.weight"])
    for name, shape in SMALL.param_shapes().items():
        assert a[name].shape == shape


def test_params_validate_shapes():
    tensors = dict(init_params(SMALL))
    tensors["fcn.0.bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        DetectionHeadParams(SMALL, tensors)


def test_zero_network_outputs_half():
    params = DetectionHeadParams(SMALL, {k: np.zeros(s) for k, s in SMALL.param_shapes().items()})
    features = np.random.default_rng(0).normal(size=(48, 2, 2, 2))
    np.testing.assert_array_equal(head_forward(features, params), np.full(6, 0.5))


def test_default_head_output_length():
    params = init_params(HeadConfig(), 0)
    out = head_forward(np.random.default_rng(1).normal(size=(192, 4, 4, 4)), params)
    assert out.shape == (6,)
    assert isinstance(predict_anchor(np.zeros((192, 4, 4, 4)), params), AnchorParams)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100))
def test_outputs_in_open_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    params = init_params(SMALL, seed)
    out = head_forward(rng.normal(scale=scale, size=(48, 2, 2, 2)), params)
    assert np.all((out > 0) & (out < 1))


def test_feature_shape_checked():
    with pytest.raises(ValueError):
        head_forward(np.zeros((48, 3, 3, 3)), init_params(SMALL))


def test_head_backward_finite_difference():
    params, features, upstream = random_instance(SMALL, 11)
    report = head_gradient_check(params, features, upstream)
    assert max(report.values()) < 1e-4


def test_head_backward_zero_and_linear():
    params, features, upstream = random_instance(SMALL, 5)
    _, cache = head_forward(features, params, return_cache=True)
    zero, fz = head_backward(cache, np.zeros(6), params)
    assert all(not g.any() for g in zero.values()) and not fz.any()
    g1, _ = head_backward(cache, upstream, params)
    g2, _ = head_backward(cache, 2 * upstream, params)
    for name in g1:
        np.testing.assert_allclose(g2[name], 2 * g1[name], rtol=1e-12, atol=0)


def test_stale_cache_rejected():
    params, features, upstream = random_instance(SMALL, 5)
    _, cache = head_forward(features, params, return_cache=True)
    with pytest.raises(ValueError):
        head_backward(cache, upstream, params.copy())


def test_giou_loss_identity_and_separated():
    p = np.array([0.5, 0.5, 0.5, 0.6, 0.7, 0.8])
    assert giou_loss(p, p)[0] == pytest.approx(0.0, abs=1e-12)
    # cubes [0,2)^3 and [8,10)^3 on a 16^3 grid with ratio 0.5 (anchor 8 voxels)
    a = np.array([1 / 16] * 3 + [0.25] * 3)
    b = np.array([9 / 16] * 3 + [0.25] * 3)
    assert giou_loss(a, b, (16, 16, 16))[0] == pytest.approx(1.984)
    box_a = BoundingBox((0, 0, 0), (2, 2, 2), (16, 16, 16))
    box_b = BoundingBox((8, 8, 8), (2, 2, 2), (16, 16, 16))
    assert giou_loss(a, b, (16, 16, 16))[0] == pytest.approx(1 - giou(box_a, box_b))


def test_giou_loss_matches_discrete_on_aligned_boxes(rng):
    """On voxel-aligned anchors the continuous loss equals 1 - discrete GIoU."""
    grid = (64, 64, 64)
    for _ in range(50):
        p = np.concatenate([rng.integers(16, 48, 3) / 64, rng.integers(1, 17, 3) * 2 / 32])
        t = np.concatenate([rng.integers(16, 48, 3) / 64, rng.integers(1, 17, 3) * 2 / 32])
        bp = decode_anchor(AnchorParams.from_array(p), grid)
        bt = decode_anchor(AnchorParams.from_array(t), grid)
        assert giou_loss(p, t, grid)[0] == pytest.approx(1 - giou(bp, bt), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(v=st.lists(st.floats(0.05, 0.95), min_size=12, max_size=12))
def test_giou_loss_range(v):
    loss, grad = giou_loss(np.array(v[:6]), np.array(v[6:]))
    assert 0 <= loss < 2
    assert np.all(np.isfinite(grad))


def test_giou_loss_gradient(rng):
    for _ in range(20):
        pred, target = random_overlapping_anchors(rng)
        _, g = giou_loss(pred, target)
        num = central_difference(lambda: giou_loss(pred, target)[0], pred, 1e-5)
        assert relative_error(g, num) < 1e-3


def test_dice_ce_examples():
    target = np.array([[[1.0], [0.0]], [[1.0], [0.0]]])
    loss, _ = dice_ce_loss(np.zeros_like(target), target)
    eps = 1e-5
    expected = 1 - (2 * 1 + eps) / (2 + 2 + eps) + math.log(2)
    assert loss == pytest.approx(expected, abs=1e-12)
    assert loss == pytest.approx(1.1931, abs=1e-4)
    saturated = np.where(target > 0, 50.0, -50.0)
    assert dice_ce_loss(saturated, target)[0] < 1e-6


def test_dice_ce_validation():
    with pytest.raises(ValueError):
        dice_ce_loss(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        dice_ce_loss(np.zeros(3), np.array([0.0, 0.5, 1.0]))


def test_dice_ce_gradient(rng):
    for _ in range(20):
        logits = rng.normal(0, 2, size=(4, 4, 4))
        mask = (rng.random((4, 4, 4)) < 0.4).astype(float)
        _, g = dice_ce_loss(logits, mask)
        num = central_difference(lambda: dice_ce_loss(logits, mask)[0], logits, 1e-4)
        assert relative_error(g, num) < 1e-4


def test_dice_ce_decreases_toward_target(rng):
    mask = (rng.random((4, 4, 4)) < 0.5).astype(float)
    direction = np.where(mask > 0, 1.0, -1.0)
    start = rng.normal(size=mask.shape)
    losses = [dice_ce_loss(start + t * direction, mask)[0] for t in np.linspace(0, 20, 41)]
    assert all(l >= 0 for l in losses)
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_gradient_check_summary():
    worst = gradient_check(seed=3, n_instances=3)
    assert worst["head"] < 1e-4 and worst["dice_ce"] < 1e-4 and worst["giou"] < 1e-3


def test_weight_file_roundtrip(tmp_path):
    params = init_params(SMALL, 9)
    path = tmp_path / "head.bin"
    save_params(params, path)
    back = load_params(path, SMALL)
    for k in params:
        np.testing.assert_array_equal(back[k], params[k].astype(np.float32))
    raw = path.read_bytes()
    assert raw[:8] == b"ACHEAD1\0"
    n = int.from_bytes(raw[8:16], "little")
    payload = len(raw) - 16 - n
    assert payload == 4 * sum(int(np.prod(s)) for s in SMALL.param_shapes().values())


def test_weight_file_validation(tmp_path):
    path = tmp_path / "head.bin"
    save_params(init_params(SMALL), path)
    with pytest.raises(ValueError):
        load_params(path, HeadConfig())
    raw = path.read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_params(tmp_path / "short.bin")
    (tmp_path / "bad.bin").write_bytes(b"notaweightfile!!")
    with pytest.raises(ValueError):
        load_params(tmp_path / "bad.bin")
