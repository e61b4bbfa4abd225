"""Reference NumPy implementation of the compact single-anchor detection head.

Pipeline: a "valid" convolution whose kernel spans the whole bottleneck grid
condenses ``16E`` channels to ``2·16E`` features, followed by layer norm,
PReLU, squeeze, and a fully connected network whose two hidden layer sizes
follow the geometric sequence between input and output sizes. Every FCN layer
ends in a sigmoid, so the six outputs (position triple, scale triple) lie in
(0, 1).

Forward/backward passes work in float64 and are verified against central
finite differences by :func:`gradient_check`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np

from ._util import as_triple, round_half_up
from .geometry import ANCHOR_RATIO, AnchorParams

LN_EPS = 1e-5
PRELU_INIT = 0.25


def hidden_layer_sizes(input_size: int, output_size: int, n_hidden: int = 2) -> List[int]:
    """Hidden sizes on the geometric sequence from ``input_size`` to ``output_size``."""
    if n_hidden < 0:
        raise ValueError("n_hidden must be >= 0")
    if n_hidden == 0:
        return []
    if not input_size > output_size > 0:
        raise ValueError(f"need input_size > output_size > 0, got {input_size}, {output_size}")
    ratio = (output_size / input_size) ** (1.0 / (n_hidden + 1))
    return [round_half_up(input_size * ratio ** k) for k in range(1, n_hidden + 1)]


@dataclass(frozen=True)
class HeadConfig:
    embed_dim: int = 12
    bottleneck_spatial: int = 4
    anchors: int = 1
    hidden_layers: int = 2

    def __post_init__(self):
        if self.embed_dim < 1 or self.bottleneck_spatial < 1:
            raise ValueError("embed_dim and bottleneck_spatial must be >= 1")
        if self.anchors != 1:
            raise ValueError("only single-anchor detection is supported")

    @classmethod
    def from_patch(cls, patch_size: int = 128, embed_dim: int = 12) -> "HeadConfig":
        return cls(embed_dim=embed_dim, bottleneck_spatial=patch_size // 32)

    @property
    def bottleneck_channels(self) -> int:
        return 16 * self.embed_dim

    @property
    def condensed_features(self) -> int:
        return 2 * 16 * self.embed_dim

    @property
    def n_outputs(self) -> int:
        return self.anchors * 2 * 3

    @property
    def fcn_sizes(self) -> List[int]:
        n_in, n_out = self.condensed_features, self.n_outputs
        return [n_in, *hidden_layer_sizes(n_in, n_out, self.hidden_layers), n_out]

    def param_shapes(self) -> Dict[str, tuple]:
        c_in, c_out, s = self.bottleneck_channels, self.condensed_features, self.bottleneck_spatial
        shapes = {
            "conv.weight": (c_out, c_in, s, s, s),
            "conv.bias": (c_out,),
            "norm.weight": (c_out,),
            "norm.bias": (c_out,),
            "prelu.weight": (c_out,),
        }
        sizes = self.fcn_sizes
        for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            shapes[f"fcn.{k}.weight"] = (n_out, n_in)
            shapes[f"fcn.{k}.bias"] = (n_out,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "bottleneck_spatial": self.bottleneck_spatial,
            "anchors": self.anchors,
            "hidden_layers": self.hidden_layers,
        }


class DetectionHeadParams(dict):
    """Named parameter tensors (float64) keyed as in :meth:`HeadConfig.param_shapes`."""

    def __init__(self, config: HeadConfig, tensors: Dict[str, np.ndarray]):
        expected = config.param_shapes()
        if set(tensors) != set(expected):
            raise ValueError(f"parameter names {sorted(tensors)} do not match config {sorted(expected)}")
        super().__init__()
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite values")
            self[name] = arr
        self.config = config

    def n_fcn_layers(self) -> int:
        return len(self.config.fcn_sizes) - 1

    def copy(self) -> "DetectionHeadParams":
        return DetectionHeadParams(self.config, {k: v.copy() for k, v in self.items()})


def init_params(config: HeadConfig = HeadConfig(), seed: int = 0) -> DetectionHeadParams:
    """Glorot-uniform weights, zero biases, PReLU slopes 0.25, unit norm gain."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in config.param_shapes().items():
        if name.endswith("bias"):
            tensors[name] = np.zeros(shape)
        elif name == "norm.weight":
            tensors[name] = np.ones(shape)
        elif name == "prelu.weight":
            tensors[name] = np.full(shape, PRELU_INIT)
        else:
            receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return DetectionHeadParams(config, tensors)


def _sigmoid(x):
    # split form keeps exp() from overflowing on large |x|
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class ForwardCache:
    features: np.ndarray
    conv_out: np.ndarray
    x_hat: np.ndarray
    sigma: float
    normed: np.ndarray
    activations: List[np.ndarray]
    param_ids: Dict[str, int]


def head_forward(features, params: DetectionHeadParams, return_cache: bool = False):
    """Run the head on one bottleneck grid of shape ``(16E, s, s, s)``.

    Returns the six sigmoid outputs as an array, and the forward cache when
    ``return_cache`` is set.
    """
    cfg = params.config
    x = np.asarray(features, dtype=np.float64)
    s = cfg.bottleneck_spatial
    expected = (cfg.bottleneck_channels, s, s, s)
    if x.shape != expected:
        raise ValueError(f"feature grid must have shape {expected}, got {x.shape}")

    w = params["conv.weight"]
    z = w.reshape(w.shape[0], -1) @ x.reshape(-1) + params["conv.bias"]

    mu = z.mean()
    sigma = float(np.sqrt(((z - mu) ** 2).mean() + LN_EPS))
    x_hat = (z - mu) / sigma  # constant input gives exactly 0 here
    y = params["norm.weight"] * x_hat + params["norm.bias"]
    a = np.where(y > 0, y, params["prelu.weight"] * y)

    activations = [a]
    for k in range(params.n_fcn_layers()):
        a = _sigmoid(params[f"fcn.{k}.weight"] @ a + params[f"fcn.{k}.bias"])
        activations.append(a)

    if not return_cache:
        return a
    cache = ForwardCache(x, z, x_hat, sigma, y, activations, {k: id(v) for k, v in params.items()})
    return a, cache


def head_backward(cache: ForwardCache, upstream, params: DetectionHeadParams):
    """Analytic gradients of ``upstream · outputs`` for every parameter and the input grid.

    Returns ``(param_grads, feature_grad)``.
    """
    if cache.param_ids != {k: id(v) for k, v in params.items()}:
        raise ValueError("forward cache was produced with different parameters")
    g = np.asarray(upstream, dtype=np.float64).reshape(-1)
    if g.shape != cache.activations[-1].shape:
        raise ValueError(f"upstream gradient must have shape {cache.activations[-1].shape}")

    grads: Dict[str, np.ndarray] = {}
    for k in reversed(range(params.n_fcn_layers())):
        out = cache.activations[k + 1]
        d_pre = g * out * (1.0 - out)
        grads[f"fcn.{k}.weight"] = np.outer(d_pre, cache.activations[k])
        grads[f"fcn.{k}.bias"] = d_pre
        g = params[f"fcn.{k}.weight"].T @ d_pre

    y = cache.normed
    slope = params["prelu.weight"]
    grads["prelu.weight"] = np.where(y > 0, 0.0, g * y)
    dy = np.where(y > 0, g, g * slope)

    grads["norm.weight"] = dy * cache.x_hat
    grads["norm.bias"] = dy
    dx_hat = dy * params["norm.weight"]
    dz = (dx_hat - dx_hat.mean() - cache.x_hat * (dx_hat * cache.x_hat).mean()) / cache.sigma

    w = params["conv.weight"]
    grads["conv.weight"] = np.outer(dz, cache.features.reshape(-1)).reshape(w.shape)
    grads["conv.bias"] = dz
    feature_grad = (w.reshape(w.shape[0], -1).T @ dz).reshape(cache.features.shape)
    return {name: grads[name] for name in params}, feature_grad


def predict_anchor(features, params: DetectionHeadParams) -> AnchorParams:
    return AnchorParams.from_array(head_forward(features, params))


# --- losses -----------------------------------------------------------------

def _continuous_bounds(p, grid, anchor_ratio):
    center = p[:3] * grid
    extent = p[3:] * anchor_ratio * grid
    return center - extent / 2.0, center + extent / 2.0, extent


def giou_loss(pred, target, grid_shape=(128, 128, 128), anchor_ratio: float = ANCHOR_RATIO):
    """``1 - GIoU`` between continuously decoded anchors, and its gradient w.r.t. ``pred``.

    ``pred`` and ``target`` are :class:`AnchorParams` or 6-vectors. Where an
    overlap term is exactly zero the derivative is taken from the overlapping
    side; ties in min/max go to the predicted box.
    """
    p = pred.as_array() if isinstance(pred, AnchorParams) else np.asarray(pred, dtype=np.float64)
    t = target.as_array() if isinstance(target, AnchorParams) else np.asarray(target, dtype=np.float64)
    grid = np.asarray(as_triple(grid_shape, "grid_shape"), dtype=np.float64)

    lo_p, hi_p, ext_p = _continuous_bounds(p, grid, anchor_ratio)
    lo_t, hi_t, ext_t = _continuous_bounds(t, grid, anchor_ratio)

    raw_overlap = np.minimum(hi_p, hi_t) - np.maximum(lo_p, lo_t)
    overlap = np.maximum(raw_overlap, 0.0)
    hull = np.maximum(hi_p, hi_t) - np.minimum(lo_p, lo_t)

    inter = np.prod(overlap)
    vol_p, vol_t = np.prod(ext_p), np.prod(ext_t)
    union = vol_p + vol_t - inter
    enclose = np.prod(hull)
    giou_value = inter / union - (enclose - union) / enclose
    loss = 1.0 - giou_value

    def partial(v, i):
        return np.prod(np.delete(v, i))

    d_inter = 1.0 / union + inter / union ** 2 - 1.0 / enclose
    d_vol = -inter / union ** 2 + 1.0 / enclose
    d_enclose = -union / enclose ** 2

    d_hi = np.zeros(3)
    d_lo = np.zeros(3)
    for i in range(3):
        g_overlap = d_inter * partial(overlap, i)
        if raw_overlap[i] >= 0:
            d_hi[i] += g_overlap * (hi_p[i] <= hi_t[i])
            d_lo[i] -= g_overlap * (lo_p[i] >= lo_t[i])
        g_hull = d_enclose * partial(hull, i)
        d_hi[i] += g_hull * (hi_p[i] >= hi_t[i])
        d_lo[i] -= g_hull * (lo_p[i] <= lo_t[i])
        g_ext = d_vol * partial(ext_p, i)
        d_hi[i] += g_ext
        d_lo[i] -= g_ext

    # lo = c - e/2, hi = c + e/2 with c = pos * g and e = scale * ratio * g
    d_pos = (d_hi + d_lo) * grid
    d_scale = (d_hi - d_lo) * 0.5 * anchor_ratio * grid
    grad = -np.concatenate([d_pos, d_scale])
    return float(loss), grad


def dice_ce_loss(logits, target, epsilon: float = 1e-5):
    """Soft Dice loss plus mean binary cross-entropy on sigmoid probabilities.

    Returns ``(loss, d_loss / d_logits)``.
    """
    x = np.asarray(logits, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"logits shape {x.shape} != target shape {g.shape}")
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("target must be binary")
    p = _sigmoid(x)
    num = 2.0 * (p * g).sum() + epsilon
    den = p.sum() + g.sum() + epsilon
    dice = 1.0 - num / den
    # BCE with logits: softplus(x) - g x, written to stay finite for large |x|
    ce = (np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))).mean()

    d_dice_dp = -(2.0 * g * den - num) / den ** 2
    grad = d_dice_dp * p * (1.0 - p) + (p - g) / x.size
    return float(dice + ce), grad


def total_loss(pred, target_anchor, logits, target_mask, grid_shape=(128, 128, 128),
               anchor_ratio: float = ANCHOR_RATIO, epsilon: float = 1e-5):
    """Unweighted multi-task sum: GIoU loss + DiceCE loss, with both gradients."""
    l_det, g_det = giou_loss(pred, target_anchor, grid_shape, anchor_ratio)
    l_seg, g_seg = dice_ce_loss(logits, target_mask, epsilon)
    return l_det + l_seg, g_det, g_seg


# --- finite-difference verification ----------------------------------------

def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps exact-zero and vanishing gradients from being judged
    against finite-difference rounding noise (~1e-11 absolute).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max(initial=0.0))


def central_difference(f, x: np.ndarray, step: float, indices=None) -> np.ndarray:
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place, restored).

    With ``indices`` (flat positions) only those entries are computed and the
    result is a 1D array aligned with ``indices``.
    """
    flat = x.reshape(-1)
    if indices is None:
        grad = np.zeros_like(x, dtype=np.float64)
        out = grad.reshape(-1)
        positions = range(flat.size)
    else:
        grad = out = np.zeros(len(indices))
        positions = indices
    for j, i in enumerate(positions):
        if indices is None:
            j = i
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        out[j] = (f_plus - f_minus) / (2.0 * step)
    return grad


def random_instance(config: HeadConfig, seed: int, kink_clearance: float = 1e-2):
    """Random params, features and upstream weights away from PReLU kinks.

    Parameters are the seeded initialization with jittered norm/PReLU terms and
    biases, so no gradient vanishes identically. Draws whose normalized
    pre-activations come within ``kink_clearance`` of zero are rejected.
    """
    rng = np.random.default_rng(seed)
    s = config.bottleneck_spatial
    while True:
        params = init_params(config, int(rng.integers(2 ** 31)))
        for name, arr in params.items():
            if name.endswith("bias") or name in ("norm.weight", "prelu.weight"):
                arr += rng.normal(0.0, 0.2, size=arr.shape)
        features = rng.normal(size=(config.bottleneck_channels, s, s, s))
        upstream = rng.normal(size=config.n_outputs)
        _, cache = head_forward(features, params, return_cache=True)
        if np.abs(cache.normed).min() > kink_clearance:
            return params, features, upstream


def head_gradient_check(params: DetectionHeadParams, features, upstream, step: float = 1e-4,
                        max_coords: int = None, seed: int = 0) -> Dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per tensor.

    ``max_coords`` limits each tensor to a seeded random subset of entries.
    """
    features = np.array(features, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _, cache = head_forward(features, params, return_cache=True)
    grads, feature_grad = head_backward(cache, upstream, params)

    def objective():
        return float(upstream @ head_forward(features, params))

    rng = np.random.default_rng(seed)
    targets = [(name, params[name], grads[name]) for name in params] + [("features", features, feature_grad)]
    report = {}
    for name, arr, analytic in targets:
        if max_coords is None or arr.size <= max_coords:
            report[name] = relative_error(analytic, central_difference(objective, arr, step))
        else:
            idx = rng.choice(arr.size, size=max_coords, replace=False)
            numeric = central_difference(objective, arr, step, indices=idx)
            report[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return report


def gradient_check(seed: int = 0, n_instances: int = 20,
                   config: HeadConfig = HeadConfig(embed_dim=3, bottleneck_spatial=2), max_coords: int = 64):
    """Finite-difference verification of the head and both losses.

    Returns a dict of max relative errors keyed ``head``, ``giou``, ``dice_ce``.
    """
    rng = np.random.default_rng(seed)
    worst = {"head": 0.0, "giou": 0.0, "dice_ce": 0.0}
    for _ in range(n_instances):
        params, features, upstream = random_instance(config, int(rng.integers(2 ** 31)))
        report = head_gradient_check(params, features, upstream, max_coords=max_coords, seed=int(rng.integers(2 ** 31)))
        worst["head"] = max(worst["head"], max(report.values()))

        pred, target = random_overlapping_anchors(rng)
        _, g = giou_loss(pred, target)
        num = central_difference(lambda: giou_loss(pred, target)[0], pred, 1e-5)
        worst["giou"] = max(worst["giou"], relative_error(g, num))

        logits = rng.normal(0.0, 2.0, size=(4, 4, 4))
        mask = (rng.random((4, 4, 4)) < 0.4).astype(np.float64)
        _, g = dice_ce_loss(logits, mask)
        num = central_difference(lambda: dice_ce_loss(logits, mask)[0], logits, 1e-4)
        worst["dice_ce"] = max(worst["dice_ce"], relative_error(g, num))
    return worst


def random_overlapping_anchors(rng, min_gap: float = 1e-2):
    """Random (pred, target) 6-vectors with no min/max ties within ``min_gap`` voxels."""
    grid = 128.0
    while True:
        pred = np.concatenate([rng.uniform(0.3, 0.7, 3), rng.uniform(0.2, 1.0, 3)])
        target = np.concatenate([rng.uniform(0.3, 0.7, 3), rng.uniform(0.2, 1.0, 3)])
        lo_p, hi_p, _ = _continuous_bounds(pred, grid, ANCHOR_RATIO)
        lo_t, hi_t, _ = _continuous_bounds(target, grid, ANCHOR_RATIO)
        gaps = np.concatenate([np.abs(hi_p - hi_t), np.abs(lo_p - lo_t), np.abs(np.minimum(hi_p, hi_t) - np.maximum(lo_p, lo_t))])
        if gaps.min() > min_gap:
            return pred, target


# --- weight file ---------------------------------------------------------------

_MAGIC = b"ACHEAD1\0"


def save_params(params: DetectionHeadParams, path) -> None:
    """Write params as ``magic | u64 header length | JSON header | little-endian float32 payload``."""
    header = {"config": params.config.to_dict(), "dtype": "float32", "tensors": {}}
    offset = 0
    blobs = []
    for name, arr in params.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        header["tensors"][name] = {"shape": list(arr.shape), "offsets": [offset, offset + len(blob)]}
        offset += len(blob)
        blobs.append(blob)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_params(path, config: HeadConfig = None) -> DetectionHeadParams:
    """Read a weight file, validating tensor shapes against ``config`` (or the stored one)."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not a detection-head weight file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    stored = HeadConfig(**header["config"])
    if config is not None and config != stored:
        raise ValueError(f"{path}: stored config {stored} does not match {config}")
    payload = memoryview(raw)[16 + n:]
    tensors = {}
    for name, info in header["tensors"].items():
        start, end = info["offsets"]
        if end > len(payload):
            raise ValueError(f"{path}: truncated payload for {name}")
        tensors[name] = np.frombuffer(payload[start:end], dtype="<f4").reshape(info["shape"])
    return DetectionHeadParams(stored, tensors)
