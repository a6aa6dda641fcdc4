"""Lite spatial-temporal graph-convolution encoder and its momentum copy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, ContractError
from .tensor import Tensor

ParamTree = dict  # dict[str, Tensor]


@dataclass
class EncoderConfig:
    """Per-level channel widths and temporal strides.

    ``strides`` defaults to 1 for the first level and 2 for every deeper one,
    so the shallowest intermediate keeps the input frame rate.
    """

    levels: int = 3
    channels: tuple = (16, 32, 64)
    strides: tuple | None = None
    kernel_size: int = 5
    J: int = 8
    T: int = 300
    in_channels: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.strides is None:
            self.strides = (1,) + (2,) * (self.levels - 1)
        self.strides = tuple(int(s) for s in self.strides)

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels) != self.levels or len(self.strides) != self.levels:
            raise ConfigError(
                f"need one channel width and stride per level: levels={self.levels}, "
                f"channels={self.channels}, strides={self.strides}")
        if min(self.strides) < 1 or min(self.channels) < 1 or self.kernel_size < 1:
            raise ConfigError("strides, channels and kernel_size must be >= 1")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def level_lengths(self, T: int) -> list[int]:
        """Temporal length of each intermediate for a (padded) input of ``T`` frames."""
        out = []
        for s in self.strides:
            T = -(-T // s)
            out.append(T)
        return out

    @property
    def out_channels(self) -> int:
        return self.channels[-1]


def normalized_adjacency(J: int, edges) -> np.ndarray:
    """``D^-1/2 (A + I) D^-1/2`` for an undirected bone list."""
    a = np.eye(J)
    for i, j in edges:
        a[i, j] = a[j, i] = 1.0
    d = 1.0 / np.sqrt(a.sum(axis=1))
    return d[:, None] * a * d[None, :]


def uniform_init(rng: np.random.Generator, shape, fan_in: int, gain: float = math.sqrt(6.0)) -> Tensor:
    bound = gain / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator) -> ParamTree:
    cfg.validate()
    params: ParamTree = {}
    c_in = cfg.in_channels
    k = cfg.kernel_size
    for a, c in enumerate(cfg.channels):
        params[f"enc.{a}.graph_w"] = uniform_init(rng, (c_in, c), c_in)
        params[f"enc.{a}.graph_b"] = zeros((c,))
        params[f"enc.{a}.temporal_w"] = uniform_init(rng, (k, c, c), k * c)
        params[f"enc.{a}.scale"] = Tensor(np.ones(c), requires_grad=True)
        params[f"enc.{a}.shift"] = zeros((c,))
        c_in = c
    return params


def pad_time(x: np.ndarray, multiple: int) -> np.ndarray:
    """Right-pad axis -3 (time of ``[..., T, J, 3]``) by edge replication."""
    T = x.shape[-3]
    extra = (-T) % multiple
    if not extra:
        return x
    pad = [(0, 0)] * x.ndim
    pad[-3] = (0, extra)
    return np.pad(x, pad, mode="edge")


def _swap_time_joint(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return tn.transpose(x, axes)


def encode(x, params: ParamTree, cfg: EncoderConfig, adjacency: np.ndarray):
    """Run the encoder on ``[..., T, J, 3]`` joints.

    Returns ``(h, intermediates)`` where ``intermediates[a]`` is the
    joint-pooled output of level ``a`` (``[..., T_a, C_a]``) and ``h`` is the
    deepest one. Inputs whose length is not a multiple of the total stride
    are edge-padded on the right first.
    """
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    data = pad_time(data, cfg.total_stride)
    if data.shape[-2] != adjacency.shape[0]:
        raise ContractError(f"input has {data.shape[-2]} joints, adjacency is {adjacency.shape}")
    feat = Tensor(data)
    adj = Tensor(adjacency)
    intermediates = []
    for a, stride in enumerate(cfg.strides):
        g = tn.matmul(adj, feat)  # mix joints: [..., T, J, C]
        g = tn.add(tn.matmul(g, params[f"enc.{a}.graph_w"]), params[f"enc.{a}.graph_b"])
        g = _swap_time_joint(g)  # [..., J, T, C]
        g = tn.conv1d(g, params[f"enc.{a}.temporal_w"], stride=stride, padding="same")
        g = _swap_time_joint(g)  # [..., T_a, J, C]
        g = tn.layer_norm(g)
        g = tn.add(tn.mul(g, params[f"enc.{a}.scale"]), params[f"enc.{a}.shift"])
        feat = tn.relu(g)
        intermediates.append(tn.mean(feat, axis=-2))
    return intermediates[-1], intermediates


@dataclass
class EncoderState:
    """Query parameters (trained by SGD) and their momentum-updated key copy."""

    query: ParamTree
    key: ParamTree = field(default_factory=dict)

    def __post_init__(self):
        if not self.key:
            self.key = clone_tree(self.query, requires_grad=False)
        check_same_shapes(self.query, self.key)


def clone_tree(tree: ParamTree, requires_grad: bool = False) -> ParamTree:
    return {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in tree.items()}


def check_same_shapes(a: ParamTree, b: ParamTree) -> None:
    if a.keys() != b.keys():
        raise ContractError(f"parameter trees differ in names: {sorted(set(a) ^ set(b))}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ContractError(f"parameter {k}: shape {a[k].shape} vs {b[k].shape}")


def momentum_update(query: ParamTree, key: ParamTree, m: float) -> ParamTree:
    """In place: ``key <- m * key + (1 - m) * query`` for every parameter."""
    if not 0.0 <= m <= 1.0:
        raise ConfigError(f"momentum must be in [0, 1], got {m}")
    check_same_shapes(query, key)
    for name, k in key.items():
        if m == 1.0:
            continue
        if m == 0.0:
            k.data = query[name].data.copy()
        else:
            k.data = m * k.data + (1.0 - m) * query[name].data
    return key
