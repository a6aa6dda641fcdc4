"""Dense float64 tensors with reverse-mode differentiation.

Every op takes and returns :class:`Tensor`. When any input requires a
gradient, the output keeps references to its parents and a closure mapping
the output gradient to input gradients. :func:`backward` orders the graph
into a :class:`Tape` and runs the closures in reverse.

Ops accept arbitrary leading (batch) dimensions; the documented shapes refer
to the trailing axes.
"""

from __future__ import annotations

import contextlib
import threading
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateError, ShapeError

NORM_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array that can participate in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "Tape":
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward_fn, op: str) -> Tensor:
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tape:
    """Topologically ordered record of the ops reachable from a root.

    ``nodes`` lists every tensor that requires a gradient, inputs before the
    ops that consume them. ``gradients`` maps ``id(node)`` to the gradient
    accumulated during the last :meth:`run`.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        self.gradients: dict[int, np.ndarray] = {}
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    @property
    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]

    def run(self, seed: np.ndarray) -> None:
        grads = self.gradients
        grads.clear()
        grads[id(self.root)] = seed
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # leaves that received no gradient still get a zero array
        for node in self.nodes:
            if node.is_leaf and node.grad is None:
                node.grad = np.zeros_like(node.data)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Repeated calls accumulate; call ``zero_grad`` on the leaves to reset.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape(loss)
    if not loss.requires_grad:
        return tape
    tape.run(np.ones_like(loss.data))
    return tape


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), bw, "mul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    sizes = [x.shape[axis] for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shapes incompatible: {[x.shape for x in xs]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, xs, bw, "concat")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), bw, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis``; repeated indices accumulate grads."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(np.take(x.data, indices, axis=axis), (x,), bw, "take")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    try:
        out = ad @ bd
    except ValueError as exc:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}") from exc
    return _make(out, (a, b), bw, "matmul")


def conv1d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Temporal cross-correlation.

    Args:
        x: ``[..., T, C_in]``.
        w: ``[k, C_in, C_out]``.
        bias: optional ``[C_out]``.
        stride: temporal step between windows.
        padding: ``"same"`` zero-pads ``k - 1`` frames split left/right
            (left gets the floor); ``"valid"`` pads nothing.

    Returns:
        ``[..., T', C_out]`` with ``T' = (T_pad - k) // stride + 1``.
    """
    if w.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [k, C_in, C_out], got {w.shape}")
    k, c_in, c_out = w.shape
    if k < 1 or stride < 1:
        raise ConfigError(f"conv1d needs k >= 1 and stride >= 1, got k={k}, stride={stride}")
    if x.ndim < 2 or x.shape[-1] != c_in:
        raise ShapeError(f"conv1d channel mismatch: input {x.shape}, kernel {w.shape}")
    if padding == "same":
        left, right = (k - 1) // 2, k - 1 - (k - 1) // 2
    elif padding == "valid":
        left = right = 0
    else:
        raise ConfigError(f"unknown padding {padding!r}")
    t = x.shape[-2]
    t_pad = t + left + right
    if k > t_pad:
        raise ShapeError(f"conv1d kernel length {k} exceeds padded input length {t_pad}: empty output")
    t_out = (t_pad - k) // stride + 1

    xd, wd = x.data, w.data
    if k == 1 and stride == 1:
        out = xd @ wd[0]

        def bw(g):
            gx = g @ wd[0].T if x.requires_grad else None
            gw = None
            if w.requires_grad:
                gw = (xd.reshape(-1, c_in).T @ g.reshape(-1, c_out))[None]
            return gx, gw
    else:
        pad = [(0, 0)] * (xd.ndim - 2) + [(left, right), (0, 0)]
        xp = np.pad(xd, pad) if left or right else xd
        starts = np.arange(t_out) * stride
        idx = starts[:, None] + np.arange(k)[None, :]
        cols = xp[..., idx, :]  # [..., T', k, C_in]
        flat = cols.reshape(*cols.shape[:-2], k * c_in)
        w2 = wd.reshape(k * c_in, c_out)
        out = flat @ w2

        def bw(g):
            gx = gw = None
            if w.requires_grad:
                gw = (flat.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)).reshape(k, c_in, c_out)
            if x.requires_grad:
                gcols = (g @ w2.T).reshape(*g.shape[:-1], k, c_in)
                gxp = np.zeros(xp.shape)
                span = stride * (t_out - 1) + 1
                for j in range(k):
                    gxp[..., j:j + span:stride, :] += gcols[..., :, j, :]
                gx = gxp[..., left:left + t, :]
            return gx, gw

    out_t = _make(out, (x, w), bw, "conv1d")
    if bias is not None:
        out_t = add(out_t, bias)
    return out_t


# ---------------------------------------------------------------------------
# fixed temporal operators


@lru_cache(maxsize=256)
def pool_matrix(t: int, n: int) -> np.ndarray:
    """``[n, t]`` averaging matrix; bin i covers frames ``[i*t//n, (i+1)*t//n)``."""
    m = np.zeros((n, t))
    for i in range(n):
        lo, hi = (i * t) // n, ((i + 1) * t) // n
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.flags.writeable = False
    return m


@lru_cache(maxsize=256)
def upsample_matrix(t: int, t_out: int) -> np.ndarray:
    """``[t_out, t]`` linear-interpolation matrix with aligned endpoints."""
    m = np.zeros((t_out, t))
    if t == 1 or t_out == 1:
        m[:, 0] = 1.0
    elif t == t_out:
        m = np.eye(t)
    else:
        pos = np.arange(t_out) * (t - 1) / (t_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), t - 2)
        frac = pos - lo
        rows = np.arange(t_out)
        m[rows, lo] = 1.0 - frac
        m[rows, lo + 1] = frac
    m.flags.writeable = False
    return m


def _temporal_apply(x: Tensor, m: np.ndarray, op: str) -> Tensor:
    xd = x.data
    return _make(m @ xd, (x,), lambda g: (m.T @ g,), op)


def adaptive_avg_pool1d(x: Tensor, n: int) -> Tensor:
    """Average ``[..., T, C]`` into ``n`` contiguous, non-overlapping bins."""
    t = x.shape[-2]
    if not 1 <= n <= t:
        raise ConfigError(f"adaptive_avg_pool1d needs 1 <= N <= T, got N={n}, T={t}")
    if n == t:
        return _make(x.data.copy(), (x,), lambda g: (g,), "pool")
    return _temporal_apply(x, pool_matrix(t, n), "pool")


def linear_interp_upsample(x: Tensor, t_out: int) -> Tensor:
    t = x.shape[-2]
    if t < 1 or t_out < t:
        raise ConfigError(f"upsample needs 1 <= T <= T_out, got T={t}, T_out={t_out}")
    if t_out == t:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    return _temporal_apply(x, upsample_matrix(t, t_out), "upsample")


# ---------------------------------------------------------------------------
# normalization and softmax family


def l2_normalize(x: Tensor) -> Tensor:
    """Scale each last-axis slice to unit Euclidean norm."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise DegenerateError("cannot normalize a zero-norm embedding")
    y = x.data / norm

    def bw(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _make(y, (x,), bw, "l2_normalize")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each last-axis slice to zero mean and unit variance."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc, axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g - g.mean(axis=-1, keepdims=True)
        return (inv * (gm - y * np.mean(g * y, axis=-1, keepdims=True)),)

    return _make(y, (x,), bw, "layer_norm")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    m = np.max(xd, axis=axis, keepdims=True)
    shifted = xd - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * np.sum(g, axis=axis, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-array softmax (no graph)."""
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# finite-difference check


def grad_check(f: Callable[[], Tensor] | Callable[[Tensor], Tensor], x,
               h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference grads.

    ``x`` is a Tensor or a list of Tensors. If ``f`` takes an argument it is
    called as ``f(x)``; otherwise ``f`` must close over ``x``. The relative
    error of each element is ``|a - n| / max(1, |a|, |n|)``.
    """
    xs = list(x) if isinstance(x, (list, tuple)) else [x]
    call = (lambda: f(x)) if _takes_arg(f) else f
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    loss = call()
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {loss.shape}")
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in xs]
    worst = 0.0
    with no_grad():
        for t, a in zip(xs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(call().data)
                flat[i] = orig - h
                fm = float(call().data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                err = abs(af[i] - num) / max(1.0, abs(af[i]), abs(num))
                worst = max(worst, err)
    for t, (rg, g) in zip(xs, saved):
        t.requires_grad, t.grad = rg, g
    return worst


def _takes_arg(f) -> bool:
    import inspect

    try:
        sig = inspect.signature(f)
    except (TypeError, ValueError):
        return True
    params = [p for p in sig.parameters.values()
              if p.default is p.empty and p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
    return len(params) >= 1
