"""Finite-difference suite over every differentiable op and the contrastive losses."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .data import skeleton_layout, stream_rng
from .encoder import EncoderConfig, encode, init_encoder, normalized_adjacency
from .fusion import FusionConfig, frame_cross_entropy, init_fusion, u_fuse
from .pretrain import (dense_contrastive_loss, dense_project, global_project, info_nce, init_projectors,
                       match_snippets, total_loss)
from .tensor import Tensor

TOLERANCE = 1e-4
STEP = 1e-5
TAU = 0.007


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, *shape) -> Tensor:
    """Values with |x| >= 0.1 so a finite step never crosses a relu kink."""
    mag = rng.uniform(0.1, 1.0, size=shape)
    return Tensor(mag * rng.choice([-1.0, 1.0], size=shape), requires_grad=True)


def _scalarize(y: Tensor, w: np.ndarray) -> Tensor:
    return tn.sum(tn.mul(y, Tensor(w)))


def _weighted(op, *inputs, rng):
    """Contract a tensor-valued op with fixed random weights to get a scalar."""
    probe = op(*inputs)
    w = rng.normal(size=probe.shape)
    return lambda: _scalarize(op(*inputs), w), list(inputs)


def _unit(rng, *shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# each builder returns (scalar closure, list of input tensors)

def _case_add(rng):
    return _weighted(tn.add, _t(rng, 2, 3, 4), _t(rng, 3, 1), rng=rng)


def _case_neg(rng):
    return _weighted(tn.neg, _t(rng, 3, 4), rng=rng)


def _case_mul(rng):
    return _weighted(tn.mul, _t(rng, 2, 3, 4), _t(rng, 4), rng=rng)


def _case_relu(rng):
    return _weighted(tn.relu, _away_from_zero(rng, 3, 5), rng=rng)


def _case_exp(rng):
    return _weighted(tn.exp, _t(rng, 3, 4), rng=rng)


def _case_sum(rng):
    return _weighted(lambda x: tn.sum(x, axis=1, keepdims=True), _t(rng, 3, 4, 2), rng=rng)


def _case_mean(rng):
    return _weighted(lambda x: tn.mean(x, axis=(0, 2)), _t(rng, 3, 4, 2), rng=rng)


def _case_reshape(rng):
    return _weighted(lambda x: tn.reshape(x, (4, 6)), _t(rng, 2, 3, 4), rng=rng)


def _case_transpose(rng):
    return _weighted(lambda x: tn.transpose(x, (2, 0, 1)), _t(rng, 2, 3, 4), rng=rng)


def _case_concat(rng):
    return _weighted(lambda a, b: tn.concat([a, b], axis=-1), _t(rng, 2, 3), _t(rng, 2, 4), rng=rng)


def _case_getitem(rng):
    return _weighted(lambda x: tn.getitem(x, (slice(None), slice(1, 4))), _t(rng, 3, 5), rng=rng)


def _case_take(rng):
    idx = rng.integers(0, 4, size=6)
    return _weighted(lambda x: tn.take(x, idx, axis=1), _t(rng, 2, 4, 3), rng=rng)


def _case_matmul(rng):
    return _weighted(tn.matmul, _t(rng, 2, 3, 4), _t(rng, 4, 5), rng=rng)


def _case_conv1d(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    padding = "same" if rng.random() < 0.5 else "valid"
    return _weighted(lambda x, w, b: tn.conv1d(x, w, b, stride=stride, padding=padding),
                     _t(rng, 2, 9, 3), _t(rng, k, 3, 4), _t(rng, 4), rng=rng)


def _case_pool(rng):
    t = int(rng.integers(3, 12))
    n = int(rng.integers(1, t + 1))
    return _weighted(lambda x: tn.adaptive_avg_pool1d(x, n), _t(rng, 2, t, 3), rng=rng)


def _case_upsample(rng):
    t = int(rng.integers(1, 7))
    t_out = t + int(rng.integers(0, 8))
    return _weighted(lambda x: tn.linear_interp_upsample(x, t_out), _t(rng, 2, t, 3), rng=rng)


def _case_l2_normalize(rng):
    return _weighted(tn.l2_normalize, _t(rng, 3, 5), rng=rng)


def _case_layer_norm(rng):
    return _weighted(tn.layer_norm, _t(rng, 3, 6), rng=rng)


def _case_logsumexp(rng):
    return _weighted(lambda x: tn.logsumexp(x, axis=-1), _t(rng, 3, 5, lo=-3, hi=3), rng=rng)


def _case_log_softmax(rng):
    return _weighted(lambda x: tn.log_softmax(x, axis=-1), _t(rng, 3, 5, lo=-3, hi=3), rng=rng)


def _case_cross_entropy(rng):
    labels = rng.integers(0, 4, size=(2, 6))
    x = _t(rng, 2, 6, 4, lo=-2, hi=2)
    return (lambda: frame_cross_entropy(x, labels)), [x]


def _case_u_fuse(rng):
    channels = (3, 4, 5)
    cfg = FusionConfig(hidden_dim=4)
    params = init_fusion(channels, cfg, rng)
    t = int(rng.integers(5, 9))
    lengths = [t, -(-t // 2), -(-t // 4)]
    inter = [_t(rng, lg, c) for lg, c in zip(lengths, channels)]
    w = rng.normal(size=(t, 4))
    xs = inter + [params["fuse.0_2.w"], params["fuse.1_1.b"]]
    return (lambda: _scalarize(u_fuse(inter, params, cfg, T_out=t, strides=(1, 2, 2)), w)), xs


def _case_encoder(rng):
    cfg = EncoderConfig(levels=2, channels=(3, 4), strides=(1, 2), kernel_size=3, J=4, T=6)
    params = init_encoder(cfg, rng)
    for k in params:
        if k.endswith(("_b", ".b", "shift")):
            params[k] = _t(rng, *params[k].shape)
    adj = normalized_adjacency(4, skeleton_layout(4)[1])
    x = rng.normal(size=(6, 4, 3))
    w = rng.normal(size=(3, 4))
    xs = [params[k] for k in sorted(params)]
    return (lambda: _scalarize(encode(x, params, cfg, adj)[0], w)), xs


def _case_projectors(rng):
    params = init_projectors(4, 3, rng)
    for k in ("gproj.b", "dproj.b1", "dproj.b2"):
        params[k] = _t(rng, *params[k].shape)
    h = _t(rng, 7, 4)
    wg, wd = rng.normal(size=3), rng.normal(size=(3, 3))

    def f():
        g = global_project(h, params)
        s, _ = dense_project(h, params, 3)
        return tn.add(_scalarize(g, wg), _scalarize(s, wd))

    return f, [h] + [params[k] for k in sorted(params)]


def _case_info_nce(rng):
    # composite video-level loss: unit anchor from a free vector
    c, m = 6, 5
    raw = _t(rng, c)
    pos = _unit(rng, c)
    negs = _unit(rng, m, c)
    return (lambda: info_nce(tn.l2_normalize(raw), pos, negs, TAU)), [raw]


def _case_dense_loss(rng):
    n, c, m = 4, 5, 6
    raw = _t(rng, n, c)
    s_key = _unit(rng, n, c)
    bank = _unit(rng, m, c)
    j_star = match_snippets(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)))
    return (lambda: dense_contrastive_loss(tn.l2_normalize(raw), s_key, j_star, bank, TAU)), [raw]


def _case_total_loss(rng):
    c, n, m = 5, 3, 4
    g_raw, d_raw = _t(rng, c), _t(rng, n, c)
    g_pos, g_neg = _unit(rng, c), _unit(rng, m, c)
    d_key, d_bank = _unit(rng, n, c), _unit(rng, m, c)
    j_star = rng.integers(0, n, size=n)
    lam = float(rng.uniform(0.5, 2.0))

    def f():
        lg = info_nce(tn.l2_normalize(g_raw), g_pos, g_neg, TAU)
        ld = dense_contrastive_loss(tn.l2_normalize(d_raw), d_key, j_star, d_bank, TAU)
        return total_loss(lg, ld, lam)

    return f, [g_raw, d_raw]


CASES = {
    "add": _case_add, "neg": _case_neg, "mul": _case_mul, "relu": _case_relu, "exp": _case_exp,
    "sum": _case_sum, "mean": _case_mean, "reshape": _case_reshape, "transpose": _case_transpose,
    "concat": _case_concat, "getitem": _case_getitem, "take": _case_take, "matmul": _case_matmul,
    "conv1d": _case_conv1d, "adaptive_avg_pool1d": _case_pool,
    "linear_interp_upsample": _case_upsample, "l2_normalize": _case_l2_normalize,
    "layer_norm": _case_layer_norm, "logsumexp": _case_logsumexp, "log_softmax": _case_log_softmax,
    "frame_cross_entropy": _case_cross_entropy, "u_fuse": _case_u_fuse,
    "encode": _case_encoder, "projectors": _case_projectors,
    "info_nce": _case_info_nce, "dense_contrastive_loss": _case_dense_loss, "total_loss": _case_total_loss,
}


def check_case(name: str, seed: int, h: float = STEP) -> CheckResult:
    f, xs = CASES[name](stream_rng(seed, f"grad-check/{name}"))
    return CheckResult(name, seed, tn.grad_check(f, xs, h=h))


def run_suite(seeds: int = 20, names=None, on_result=None) -> tuple[list[CheckResult], float]:
    """Check every case on ``seeds`` seeds; returns the results and elapsed seconds."""
    t0 = time.perf_counter()
    results = []
    for name in names or CASES:
        for seed in range(seeds):
            r = check_case(name, seed)
            results.append(r)
            if on_result is not None:
                on_result(r)
    return results, time.perf_counter() - t0
