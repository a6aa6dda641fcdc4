"""Stage 1: dense snippet contrast on top of a video-level MoCo objective."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .data import AugmentPolicy, SkeletonSequence, augment_sequence, skeleton_layout, stream_rng
from .encoder import (EncoderConfig, EncoderState, ParamTree, encode, init_encoder,
                      momentum_update, normalized_adjacency, uniform_init, zeros)
from .errors import ConfigError, ContractError, DegenerateError, TrainingError
from .optim import SGD
from .tensor import Tensor

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-6


@dataclass
class PretrainConfig:
    tau: float = 0.007
    bank_size: int = 1024  # the original large-scale setting is 32768
    snippets: int = 19
    lam: float = 1.5
    key_momentum: float = 0.999
    embed_dim: int = 32
    lr: float = 0.01
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 10
    batch_size: int = 16
    lr_decay: bool = False  # x0.1 at 75% of epochs
    warmup_steps: int = 0  # linear lr ramp
    grad_clip: float = 0.0  # 0 disables
    dense_loss: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.snippets < 1:
            raise ConfigError(f"snippets must be >= 1, got {self.snippets}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.warmup_steps < 0 or self.grad_clip < 0:
            raise ConfigError("warmup_steps and grad_clip must be >= 0")
        if self.bank_size < 1 or self.embed_dim < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("bank_size, embed_dim, batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.key_momentum <= 1:
            raise ConfigError(f"key_momentum must be in [0, 1], got {self.key_momentum}")


# ---------------------------------------------------------------------------
# projection heads


def init_projectors(c_e: int, c: int, rng: np.random.Generator) -> ParamTree:
    return {
        "gproj.w": uniform_init(rng, (c_e, c), c_e, gain=math.sqrt(3.0)),
        "gproj.b": zeros((c,)),
        "dproj.w1": uniform_init(rng, (1, c_e, c_e), c_e),
        "dproj.b1": zeros((c_e,)),
        "dproj.w2": uniform_init(rng, (1, c_e, c), c_e, gain=math.sqrt(3.0)),
        "dproj.b2": zeros((c,)),
    }


def global_project(h: Tensor, params: ParamTree) -> Tensor:
    """Temporal mean of ``[..., T_L, C_e]`` -> linear map -> unit ``[..., C]``."""
    if h.shape[-2] < 1:
        raise ContractError("global_project needs at least one frame")
    pooled = tn.mean(h, axis=-2)
    z = tn.add(tn.matmul(tn.reshape(pooled, pooled.shape[:-1] + (1, pooled.shape[-1])),
                         params["gproj.w"]), params["gproj.b"])
    z = tn.reshape(z, z.shape[:-2] + (z.shape[-1],))
    return tn.l2_normalize(z)


def dense_project(h: Tensor, params: ParamTree, n: int) -> tuple[Tensor, Tensor]:
    """Return ``(S, F_d)``: unit snippet embeddings ``[..., N, C]`` and pooled features ``[..., N, C_e]``."""
    t = h.shape[-2]
    if n > t:
        raise ConfigError(f"cannot pool {t} frames into {n} snippets")
    f_d = tn.adaptive_avg_pool1d(h, n)
    z = tn.relu(tn.conv1d(f_d, params["dproj.w1"], params["dproj.b1"]))
    z = tn.conv1d(z, params["dproj.w2"], params["dproj.b2"])
    return tn.l2_normalize(z), f_d


def match_snippets(f_query, f_key) -> np.ndarray:
    """Index of the most cosine-similar key row for each query row.

    Works on ``[..., N, C]``; ties go to the smallest index.
    """
    fq = f_query.data if isinstance(f_query, Tensor) else np.asarray(f_query, dtype=np.float64)
    fk = f_key.data if isinstance(f_key, Tensor) else np.asarray(f_key, dtype=np.float64)
    nq = np.linalg.norm(fq, axis=-1, keepdims=True)
    nk = np.linalg.norm(fk, axis=-1, keepdims=True)
    if np.any(nq <= tn.NORM_EPS) or np.any(nk <= tn.NORM_EPS):
        raise DegenerateError("match_snippets: zero-norm snippet feature")
    sims = (fq / nq) @ np.swapaxes(fk / nk, -1, -2)
    return np.argmax(sims, axis=-1)


# ---------------------------------------------------------------------------
# contrastive losses


def info_nce_from_similarities(pos: Tensor, neg: Tensor | None, tau: float) -> Tensor:
    """Per-anchor InfoNCE from similarity scalars ``pos [...]`` and ``neg [..., M]``."""
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    pos_col = tn.reshape(pos, pos.shape + (1,))
    logits = pos_col if neg is None or neg.shape[-1] == 0 else tn.concat([pos_col, neg], axis=-1)
    logits = tn.mul(logits, 1.0 / tau)
    return tn.add(tn.logsumexp(logits, axis=-1), tn.neg(tn.mul(pos, 1.0 / tau)))


def _check_unit(name: str, x: np.ndarray) -> None:
    if x.size and np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > UNIT_TOL):
        raise ContractError(f"info_nce: {name} must be unit-norm")


def info_nce_terms(anchor: Tensor, positive, negatives, tau: float) -> Tensor:
    """``-log(e^{a.p/tau} / (e^{a.p/tau} + sum_n e^{a.q_n/tau}))`` per anchor row.

    ``anchor`` and ``positive`` are ``[..., C]``; ``negatives`` is ``[M, C]``
    (a Tensor, an array, or a list of vectors) shared by every anchor.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    anchor = tn._as_tensor(anchor)
    positive = tn._as_tensor(positive)
    if isinstance(negatives, (list, tuple)):
        negatives = np.stack([n.data if isinstance(n, Tensor) else np.asarray(n) for n in negatives]) \
            if len(negatives) else np.zeros((0, anchor.shape[-1]))
    negatives = tn._as_tensor(negatives)
    _check_unit("anchor", anchor.data)
    _check_unit("positive", positive.data)
    _check_unit("negatives", negatives.data)
    pos = tn.sum(tn.mul(anchor, positive), axis=-1)
    neg = None
    if negatives.shape[0]:
        neg = tn.matmul(anchor if anchor.ndim >= 2 else tn.reshape(anchor, (1,) + anchor.shape),
                        tn.transpose(negatives, (1, 0)))
        if anchor.ndim == 1:
            neg = tn.reshape(neg, (negatives.shape[0],))
    return info_nce_from_similarities(pos, neg, tau)


def info_nce(anchor, positive, negatives, tau: float) -> Tensor:
    """InfoNCE summed over anchor rows (a scalar for a single anchor)."""
    return tn.sum(info_nce_terms(anchor, positive, negatives, tau))


def dense_contrastive_loss(s_query: Tensor, s_key, j_star, bank, tau: float) -> Tensor:
    """Sum over snippets i of InfoNCE(s_i, s_key[j*(i)], bank entries).

    ``s_query`` is ``[..., N, C]``; the result has the leading shape (a scalar
    for one sequence).
    """
    j_star = np.asarray(j_star)
    s_key_d = s_key.data if isinstance(s_key, Tensor) else np.asarray(s_key, dtype=np.float64)
    if j_star.shape != s_query.shape[:-1]:
        raise ContractError(f"j* shape {j_star.shape} does not match snippets {s_query.shape[:-1]}")
    positives = np.take_along_axis(s_key_d, j_star[..., None], axis=-2)
    negatives = bank.negatives() if isinstance(bank, MemoryBank) else bank
    return tn.sum(info_nce_terms(s_query, positives, negatives, tau), axis=-1)


def total_loss(l_global, l_dense, lam: float):
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return l_global
    return tn.add(l_global, tn.mul(l_dense, lam)) if isinstance(l_global, Tensor) else l_global + lam * l_dense


def negative_snippet_embedding(s_prime) -> np.ndarray | None:
    """Unit-normalized mean of the rows of ``[N, C]``; ``None`` if the mean vanishes."""
    s = s_prime.data if isinstance(s_prime, Tensor) else np.asarray(s_prime, dtype=np.float64)
    if s.shape[-2] < 1:
        raise ContractError("negative_snippet_embedding needs N >= 1")
    m = s.mean(axis=-2)
    norm = np.linalg.norm(m)
    if norm <= tn.NORM_EPS:
        return None
    return m / norm


# ---------------------------------------------------------------------------
# memory bank


class MemoryBank:
    """Fixed-capacity FIFO of unit-norm vectors backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ConfigError(f"bank needs capacity >= 1 and dim >= 1, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.buffer = np.zeros((capacity, dim))
        self.size = 0
        self.cursor = 0
        self.skipped = 0

    def __len__(self) -> int:
        return self.size

    def enqueue(self, batch) -> "MemoryBank":
        batch = np.asarray(batch, dtype=np.float64)
        if batch.size == 0:
            return self
        batch = batch.reshape(-1, batch.shape[-1])
        if batch.shape[1] != self.dim:
            raise ContractError(f"bank dim is {self.dim}, got embeddings of dim {batch.shape[1]}")
        if np.any(np.abs(np.linalg.norm(batch, axis=1) - 1.0) > UNIT_TOL):
            raise ContractError("memory bank accepts unit-norm embeddings only")
        n = len(batch)
        if n >= self.capacity:
            self.buffer[:] = batch[-self.capacity:]
            self.cursor = 0
            self.size = self.capacity
            return self
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.buffer[idx] = batch
        self.cursor = (self.cursor + n) % self.capacity
        self.size = min(self.capacity, self.size + n)
        return self

    def entries(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self.size < self.capacity:
            return self.buffer[:self.size].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def negatives(self) -> np.ndarray:
        """Stored vectors in storage order (the loss is order-invariant)."""
        return self.buffer[:self.size]


def memory_enqueue(bank: MemoryBank, batch) -> MemoryBank:
    return bank.enqueue(batch)


# ---------------------------------------------------------------------------
# training


@dataclass
class PretrainState:
    enc_cfg: EncoderConfig
    cfg: PretrainConfig
    params: EncoderState
    bank: MemoryBank
    dense_bank: MemoryBank
    optimizer: SGD
    adjacency: np.ndarray
    step: int = 0
    skipped_negatives: int = 0
    rng_state: dict | None = None  # augmentation stream after the last step


def init_pretrain(enc_cfg: EncoderConfig, cfg: PretrainConfig, seed: int) -> PretrainState:
    cfg.validate()
    rng = stream_rng(seed, "init")
    query = init_encoder(enc_cfg, rng)
    query.update(init_projectors(enc_cfg.out_channels, cfg.embed_dim, rng))
    state = EncoderState(query)
    _, edges = skeleton_layout(enc_cfg.J)
    return PretrainState(
        enc_cfg=enc_cfg, cfg=cfg, params=state,
        bank=MemoryBank(cfg.bank_size, cfg.embed_dim),
        dense_bank=MemoryBank(cfg.bank_size, cfg.embed_dim),
        optimizer=SGD(state.query, cfg.lr, cfg.sgd_momentum, cfg.weight_decay, cfg.grad_clip),
        adjacency=normalized_adjacency(enc_cfg.J, edges),
    )


@dataclass
class StepStats:
    step: int
    l_global: float
    l_dense: float | None
    l_total: float
    bank_size: int
    dense_bank_size: int | None
    grad_norm: float = 0.0


def _views(batch, policy: AugmentPolicy, rng) -> tuple[np.ndarray, np.ndarray]:
    lengths = {s.T for s in batch}
    if len(lengths) != 1:
        raise ContractError(f"a batch needs equal-length sequences, got lengths {sorted(lengths)}")
    q = np.stack([augment_sequence(s, policy, rng).joints for s in batch])
    k = np.stack([augment_sequence(s, policy, rng).joints for s in batch])
    return q, k


def key_embeddings(state: PretrainState, joints: np.ndarray):
    """Key-path ``(p_hat, S_hat, F_hat)`` without recording a graph."""
    key = state.params.key
    with tn.no_grad():
        h, _ = encode(joints, key, state.enc_cfg, state.adjacency)
        p = global_project(h, key).data
        if not state.cfg.dense_loss:
            return p, None, None
        s, f = dense_project(h, key, state.cfg.snippets)
    return p, s.data, f.data


def _enqueue(state: PretrainState, p_hat: np.ndarray, s_hat: np.ndarray | None) -> None:
    state.bank.enqueue(p_hat)
    if s_hat is not None:
        negs = []
        for s in s_hat:
            v = negative_snippet_embedding(s)
            if v is None:
                state.skipped_negatives += 1
                state.dense_bank.skipped += 1
            else:
                negs.append(v)
        if negs:
            state.dense_bank.enqueue(np.stack(negs))


def warm_up_banks(state: PretrainState, sequences, policy: AugmentPolicy, rng,
                  batch_size: int | None = None) -> None:
    """Fill both banks with key embeddings without updating any parameter."""
    bs = batch_size or state.cfg.batch_size
    for i in range(0, len(sequences), bs):
        if len(state.bank) >= state.bank.capacity:
            break
        chunk = sequences[i:i + bs]
        joints = np.stack([augment_sequence(s, policy, rng).joints for s in chunk])
        p, s, _ = key_embeddings(state, joints)
        _enqueue(state, p, s)


def pretrain_losses(state: PretrainState, q_joints: np.ndarray, k_joints: np.ndarray):
    """Forward both paths; return ``(total, l_global, l_dense, p_hat, S_hat)``."""
    cfg = state.cfg
    p_hat, s_hat, f_hat = key_embeddings(state, k_joints)
    query = state.params.query
    h, _ = encode(q_joints, query, state.enc_cfg, state.adjacency)
    p_bar = global_project(h, query)
    l_global = tn.mean(info_nce_terms(p_bar, p_hat, state.bank.negatives(), cfg.tau))
    l_dense = None
    if cfg.dense_loss:
        s_bar, f_bar = dense_project(h, query, cfg.snippets)
        j_star = match_snippets(f_bar, f_hat)
        l_dense = tn.mean(dense_contrastive_loss(s_bar, s_hat, j_star, state.dense_bank, cfg.tau))
        total = total_loss(l_global, l_dense, cfg.lam)
    else:
        total = l_global
    return total, l_global, l_dense, p_hat, s_hat


def pretrain_step(batch, state: PretrainState, policy: AugmentPolicy, rng) -> StepStats:
    """One optimization step over a batch of preprocessed sequences."""
    q_joints, k_joints = _views(batch, policy, rng)
    total, l_global, l_dense, p_hat, s_hat = pretrain_losses(state, q_joints, k_joints)
    opt = state.optimizer
    opt.zero_grad()
    tn.backward(total)
    gnorm = opt.grad_norm()
    values = [total.item(), l_global.item()] + ([l_dense.item()] if l_dense is not None else [])
    if not all(math.isfinite(v) for v in values) or not math.isfinite(gnorm):
        raise TrainingError(
            f"non-finite loss at step {state.step + 1}: total={values[0]}, global={values[1]}, "
            f"dense={values[2] if len(values) > 2 else None}, grad_norm={gnorm}")
    lr = opt.lr
    if state.cfg.warmup_steps:
        lr *= min(1.0, (state.step + 1) / state.cfg.warmup_steps)
    opt.step(lr)
    momentum_update(state.params.query, state.params.key, state.cfg.key_momentum)
    _enqueue(state, p_hat, s_hat)
    state.step += 1
    return StepStats(
        step=state.step, l_global=values[1],
        l_dense=values[2] if l_dense is not None else None, l_total=values[0],
        bank_size=len(state.bank),
        dense_bank_size=len(state.dense_bank) if state.cfg.dense_loss else None,
        grad_norm=gnorm)


def pretrain(sequences: list[SkeletonSequence], state: PretrainState, policy: AugmentPolicy,
             seed: int, on_step=None) -> list[StepStats]:
    """Run ``cfg.epochs`` epochs of shuffled mini-batches; returns per-step stats."""
    cfg = state.cfg
    aug_rng = stream_rng(seed, "augment")
    shuffle_rng = stream_rng(seed, "shuffle")
    warm_up_banks(state, sequences, policy, aug_rng)
    history = []
    decay_at = int(math.ceil(0.75 * cfg.epochs)) if cfg.lr_decay else None
    for epoch in range(cfg.epochs):
        if decay_at is not None and epoch == decay_at:
            state.optimizer.lr *= 0.1
        order = shuffle_rng.permutation(len(sequences))
        for i in range(0, len(order), cfg.batch_size):
            batch = [sequences[j] for j in order[i:i + cfg.batch_size]]
            stats = pretrain_step(batch, state, policy, aug_rng)
            history.append(stats)
            if on_step is not None:
                on_step(stats)
    state.rng_state = aug_rng.bit_generator.state
    return history
