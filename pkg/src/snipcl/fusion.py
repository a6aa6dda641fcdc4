"""Stage 2: nested U-shaped multiscale fusion, frame classifier and finetuning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .data import SkeletonSequence, stream_rng
from .encoder import EncoderConfig, ParamTree, encode, uniform_init, zeros
from .errors import ConfigError, ContractError
from .optim import SGD
from .tensor import Tensor

MODES = ("linear", "full", "frozen-knn")


@dataclass
class FusionConfig:
    hidden_dim: int = 512
    kernel_size: int = 1
    enabled: bool = True  # False: upsample the deepest feature only
    plain_u: bool = False  # True: one decoder feature per level instead of the nested grid

    def validate(self) -> None:
        if self.hidden_dim < 1 or self.kernel_size < 1:
            raise ConfigError("hidden_dim and kernel_size must be >= 1")


def grid_keys(levels: int, plain_u: bool = False) -> list[tuple[int, int]]:
    """Lattice nodes ``(a, b)`` with ``b > 0`` in evaluation order (deep to shallow)."""
    if plain_u:
        return [(a, 1) for a in range(levels - 2, -1, -1)]
    keys = []
    for b in range(1, levels):
        for a in range(levels - 1 - b, -1, -1):
            keys.append((a, b))
    return sorted(keys, key=lambda ab: (-ab[0], ab[1]))


def _input_width(a: int, b: int, channels, d: int, plain_u: bool, levels: int) -> int:
    if plain_u:
        below = channels[a + 1] if a + 1 == levels - 1 else d
        return channels[a] + below
    below = channels[a + 1] if b - 1 == 0 else d
    return channels[a] + (b - 1) * d + below


def init_fusion(channels, cfg: FusionConfig, rng: np.random.Generator) -> ParamTree:
    cfg.validate()
    levels = len(channels)
    k, d = cfg.kernel_size, cfg.hidden_dim
    params: ParamTree = {}
    if not cfg.enabled:
        params["fuse.deep.w"] = uniform_init(rng, (k, channels[-1], d), k * channels[-1], gain=math.sqrt(3.0))
        params["fuse.deep.b"] = zeros((d,))
        return params
    if levels == 1:
        params["fuse.0_0.w"] = uniform_init(rng, (k, channels[0], d), k * channels[0], gain=math.sqrt(3.0))
        params["fuse.0_0.b"] = zeros((d,))
        return params
    for a, b in grid_keys(levels, cfg.plain_u):
        c_in = _input_width(a, b, channels, d, cfg.plain_u, levels)
        params[f"fuse.{a}_{b}.w"] = uniform_init(rng, (k, c_in, d), k * c_in, gain=math.sqrt(3.0))
        params[f"fuse.{a}_{b}.b"] = zeros((d,))
    return params


def _project(x: Tensor, params: ParamTree, name: str) -> Tensor:
    return tn.conv1d(x, params[f"{name}.w"], params[f"{name}.b"], stride=1, padding="same")


def _check_lengths(intermediates, strides) -> None:
    lengths = [z.shape[-2] for z in intermediates]
    if strides is not None:
        if len(strides) != len(lengths):
            raise ContractError(f"{len(lengths)} intermediates but {len(strides)} strides")
        for a in range(1, len(lengths)):
            want = -(-lengths[a - 1] // strides[a])
            if lengths[a] != want:
                raise ContractError(
                    f"intermediate {a} has length {lengths[a]}, stride schedule {tuple(strides)} "
                    f"implies {want}")
    elif any(lengths[a] > lengths[a - 1] for a in range(1, len(lengths))):
        raise ContractError(f"intermediate lengths must not increase with depth: {lengths}")


def u_fuse(intermediates, params: ParamTree, cfg: FusionConfig, T_out: int | None = None,
           strides=None, return_grid: bool = False):
    """Fuse encoder intermediates ``Z_a^0`` (shallow first) into ``[..., T, d]``.

    Each node ``Z_a^b`` (``b > 0``) projects the channel concatenation of
    ``Z_a^0 .. Z_a^{b-1}`` and the upsampled ``Z_{a+1}^{b-1}`` to ``d``
    channels. The output is the last node of the shallowest level, upsampled
    to ``T_out`` if needed and then truncated to ``T_out`` frames.
    """
    if not intermediates:
        raise ContractError("u_fuse needs at least one intermediate feature")
    _check_lengths(intermediates, strides)
    levels = len(intermediates)
    grid: dict[tuple[int, int], Tensor] = {(a, 0): z for a, z in enumerate(intermediates)}
    if not cfg.enabled:
        deep = intermediates[-1]
        out = _project(tn.linear_interp_upsample(deep, intermediates[0].shape[-2]), params, "fuse.deep")
    elif levels == 1:
        out = _project(intermediates[0], params, "fuse.0_0")
    elif cfg.plain_u:
        below = grid[(levels - 1, 0)]
        for a, _ in grid_keys(levels, plain_u=True):
            up = tn.linear_interp_upsample(below, grid[(a, 0)].shape[-2])
            below = grid[(a, 1)] = _project(tn.concat([grid[(a, 0)], up], axis=-1), params, f"fuse.{a}_1")
        out = grid[(0, 1)]
    else:
        for a, b in grid_keys(levels):
            t_a = grid[(a, 0)].shape[-2]
            parts = [grid[(a, i)] for i in range(b)]
            parts.append(tn.linear_interp_upsample(grid[(a + 1, b - 1)], t_a))
            grid[(a, b)] = _project(tn.concat(parts, axis=-1), params, f"fuse.{a}_{b}")
        out = grid[(0, levels - 1)]
    if T_out is not None:
        if out.shape[-2] < T_out:
            out = tn.linear_interp_upsample(out, T_out)
        if out.shape[-2] > T_out:
            out = tn.getitem(out, (Ellipsis, slice(0, T_out), slice(None)))
    return (out, grid) if return_grid else out


def init_head(d: int, num_classes: int, rng: np.random.Generator) -> ParamTree:
    """Linear map ``d -> K + 1`` (class 0 is background)."""
    return {
        "head.w": uniform_init(rng, (d, num_classes + 1), d, gain=math.sqrt(3.0)),
        "head.b": zeros((num_classes + 1,)),
    }


def classify_frames(features: Tensor, params: ParamTree) -> Tensor:
    return tn.add(tn.matmul(features, params["head.w"]), params["head.b"])


def frame_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over (optionally masked) frames."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = tn.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    if mask is not None:
        onehot *= np.asarray(mask, dtype=np.float64)[..., None]
    count = max(float(onehot.sum()), 1.0)
    return tn.mul(tn.sum(tn.mul(logp, onehot)), -1.0 / count)


# ---------------------------------------------------------------------------
# finetuning


@dataclass
class FinetuneConfig:
    mode: str = "linear"
    label_fraction: float = 1.0
    lr: float = 0.05
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_size: int = 16
    knn_k: int = 9
    knn_stride: int = 4

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.label_fraction <= 1:
            raise ConfigError(f"label_fraction must be in (0, 1], got {self.label_fraction}")
        if self.epochs < 0 or self.batch_size < 1 or self.knn_k < 1 or self.knn_stride < 1:
            raise ConfigError("epochs >= 0, batch_size, knn_k, knn_stride >= 1 required")


def select_labeled(n: int, fraction: float, seed: int) -> np.ndarray:
    """Deterministic subset of ``round(fraction * n)`` sequence indices, sorted."""
    if not 0 < fraction <= 1:
        raise ConfigError(f"label_fraction must be in (0, 1], got {fraction}")
    k = int(round(fraction * n))
    if k < 1:
        raise ConfigError(f"label_fraction={fraction} selects no sequence out of {n}")
    if k == n:
        return np.arange(n)
    perm = stream_rng(seed, "labels").permutation(n)
    return np.sort(perm[:k])


@dataclass
class LocalizationModel:
    """Encoder + fusion + head parameters, with the shapes needed to run them."""

    enc_cfg: EncoderConfig
    fusion_cfg: FusionConfig
    num_classes: int
    params: ParamTree
    adjacency: np.ndarray

    def group(self, prefix: str) -> ParamTree:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def trainable(self, mode: str) -> ParamTree:
        if mode == "full":
            return dict(self.params)
        if mode == "linear":
            return self.group("head.")
        return {}

    def features(self, joints, grad: bool = True) -> Tensor:
        joints = np.asarray(joints, dtype=np.float64)
        T = joints.shape[-3]
        if not grad:
            with tn.no_grad():
                return self.features(joints, grad=True)
        _, inter = encode(joints, self.params, self.enc_cfg, self.adjacency)
        return u_fuse(inter, self.params, self.fusion_cfg, T_out=T, strides=self.enc_cfg.strides)

    def logits(self, joints, grad: bool = True) -> Tensor:
        return classify_frames(self.features(joints, grad=grad), self.params)

    def probabilities(self, joints) -> np.ndarray:
        with tn.no_grad():
            return tn.softmax(self.logits(joints, grad=False).data, axis=-1)


def build_model(enc_cfg: EncoderConfig, fusion_cfg: FusionConfig, num_classes: int,
                encoder_params: ParamTree, seed: int, adjacency: np.ndarray) -> LocalizationModel:
    """Copy the encoder parameters and attach freshly initialized fusion and head."""
    rng = stream_rng(seed, "init-finetune")
    params = {k: Tensor(v.data.copy(), requires_grad=True)
              for k, v in encoder_params.items() if k.startswith("enc.")}
    params.update(init_fusion(enc_cfg.channels, fusion_cfg, rng))
    params.update(init_head(fusion_cfg.hidden_dim, num_classes, rng))
    return LocalizationModel(enc_cfg, fusion_cfg, num_classes, params, adjacency)


@dataclass
class FinetuneStats:
    step: int
    loss: float
    accuracy: float


class Finetuner:
    """Holds the optimizer and freeze mask for one finetuning run."""

    def __init__(self, model: LocalizationModel, cfg: FinetuneConfig):
        cfg.validate()
        if cfg.mode == "frozen-knn":
            raise ConfigError("frozen-knn mode has no gradient step; use knn_frame_classify")
        self.model = model
        self.cfg = cfg
        self.optimizer = SGD(model.trainable(cfg.mode), cfg.lr, cfg.sgd_momentum, cfg.weight_decay)
        self.step_count = 0
        self._cache: dict[int, np.ndarray] = {}

    def _features(self, joints: np.ndarray, key) -> Tensor:
        if self.cfg.mode != "linear":
            return self.model.features(joints)
        # frozen backbone: features never change, so compute them once
        if key is None or key not in self._cache:
            feats = self.model.features(joints, grad=False).data
            if key is None:
                return Tensor(feats)
            self._cache[key] = feats
        return Tensor(self._cache[key])

    def step(self, batch: list[SkeletonSequence], cache_key=None) -> FinetuneStats:
        joints = np.stack([s.joints for s in batch])
        labels = np.stack([s.frame_labels for s in batch])
        feats = self._features(joints, cache_key)
        logits = classify_frames(feats, self.model.params)
        loss = frame_cross_entropy(logits, labels)
        self.optimizer.zero_grad()
        tn.backward(loss)
        self.optimizer.step()
        self.step_count += 1
        acc = float(np.mean(np.argmax(logits.data, axis=-1) == labels))
        return FinetuneStats(self.step_count, loss.item(), acc)


def finetune_step(batch, finetuner: Finetuner) -> FinetuneStats:
    return finetuner.step(batch)


def finetune(sequences: list[SkeletonSequence], model: LocalizationModel, cfg: FinetuneConfig,
             seed: int, on_step=None) -> list[FinetuneStats]:
    """Train on the labeled subset for ``cfg.epochs`` shuffled epochs."""
    cfg.validate()
    chosen = select_labeled(len(sequences), cfg.label_fraction, seed)
    labeled = [sequences[i] for i in chosen]
    tuner = Finetuner(model, cfg)
    rng = stream_rng(seed, "finetune-shuffle")
    # fixed batch composition lets linear mode reuse cached features
    batches = [list(range(i, min(i + cfg.batch_size, len(labeled))))
               for i in range(0, len(labeled), cfg.batch_size)]
    history = []
    for _ in range(cfg.epochs):
        if cfg.mode == "full":
            perm = rng.permutation(len(labeled))
            plan = [(None, perm[idx[0]:idx[-1] + 1]) for idx in batches]
        else:
            plan = [(bi, batches[bi]) for bi in rng.permutation(len(batches))]
        for key, idx in plan:
            stats = tuner.step([labeled[i] for i in idx], cache_key=key)
            history.append(stats)
            if on_step is not None:
                on_step(stats)
    return history
