"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations run eagerly on numpy arrays. When a :class:`Tape` is active and an
operand requires a gradient, the operation is appended to the tape together
with a closure that maps the output gradient to operand gradients.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> backward(loss, tape)
    >>> w.grad
    array([[2., 4.]])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "DimensionError", "NonDeterminismError", "GradCheckReport",
    "set_debug", "record_op", "backward", "grad_check",
    "add", "sub", "mul", "scale", "neg", "matmul", "transpose", "reshape",
    "softmax_rows", "log_softmax", "relu", "layer_norm", "dropout", "concat",
    "embedding", "index_select", "tsum", "tmean", "conv2d",
]

_current_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "hybridsan_tape", default=None)
_DEBUG = False


class DimensionError(ValueError):
    pass


class NonDeterminismError(RuntimeError):
    pass


def set_debug(flag: bool) -> None:
    """Toggle NaN/Inf checks on every operation output."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    @property
    def T(self):
        return transpose(self)


def _scalar_error(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Entry:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations executed inside the block are recorded
    in execution order, which is a valid topological order by construction.
    A tape belongs to one evaluation and is not shared between threads.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)

    def backward(self, loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
        backward(loss, self, leaves)


def record_op(inputs: Sequence[Tensor], data: np.ndarray,
              grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``data`` as the output of a primitive over ``inputs``.

    ``grad_fn`` receives the output gradient and returns one gradient (or None)
    per input. This is also the extension point for custom primitives.
    """
    out = Tensor(data)
    if _DEBUG and not np.all(np.isfinite(out.data)):
        raise FloatingPointError("non-finite value produced by a tensor operation")
    tape = _current_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(_Entry(tuple(inputs), out, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape, leaves: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Gradients accumulate across calls until ``zero_grad`` is called. Any tensor
    listed in ``leaves`` that the loss does not depend on receives zeros.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    leaf_refs: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for t, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaf_refs[key] = t
    for key, t in leaf_refs.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g
    if leaves is not None:
        for t in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    return record_op((a, b), a.data + b.data,
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return record_op((a, b), a.data - b.data,
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return record_op((a, b), a.data * b.data,
                     lambda g: (_unbroadcast(g * b.data, a.shape),
                                _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return record_op((a,), a.data * c, lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return record_op((a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. Without an rng (evaluation) or with p == 0 this is the identity."""
    if rng is None or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return record_op((a,), a.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------- structural

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record_op((a, b), out, grad_fn)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record_op((a,), np.transpose(a.data, axes), lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return record_op((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record_op(tuple(tensors), data, lambda g: tuple(np.split(g, bounds, axis=axis)))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range for table with {table.shape[0]} rows")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return record_op((table,), table.data[ids], grad_fn)


def index_select(a: Tensor, idx) -> Tensor:
    """Rows ``idx`` of ``a`` along the first axis."""
    idx = np.asarray(idx, dtype=np.int64)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return record_op((a,), a.data[idx], grad_fn)


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return record_op((a,), np.asarray(out), grad_fn)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# ---------------------------------------------------------------- normalizers

def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` is boolean, True where attention is permitted."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_rows: a row is fully masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return record_op((x,), p, grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record_op((x,), y, grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a feature width of at least 2")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (gx,
                (g * xhat).reshape(-1, d).sum(axis=0),
                g.reshape(-1, d).sum(axis=0))

    return record_op((x, gamma, beta), xhat * gamma.data + beta.data, grad_fn)


# ---------------------------------------------------------------- convolution

def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 2-D cross-correlation. x: (B, Cin, H, W), w: (Cout, Cin, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    _, _, kh, kw = w.shape
    H, W = x.shape[2:]
    if H < kh or W < kw:
        raise DimensionError(f"conv2d input {x.shape} smaller than kernel {w.shape}")
    ho = (H - kh) // stride + 1
    wo = (W - kw) // stride + 1
    patches = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    patches = patches[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(patches, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(g, patches, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.tensordot(g, w.data[:, :, i, j], axes=([1], [0]))
                    gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += (
                        contrib.transpose(0, 3, 1, 2))
        return gx, gw

    return record_op((x, w), np.ascontiguousarray(out), grad_fn)


# ---------------------------------------------------------------- verification

@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def flagged(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v <= self.tol]

    @property
    def ok(self) -> bool:
        return not self.flagged

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
               tol: float = 1e-4, n_coords: int = 32, seed: int = 0,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` must close over ``params`` and be deterministic. Relative error per
    coordinate is |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    if f().item() != f().item():
        raise NonDeterminismError("two forward passes disagree; disable dropout")
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(loss, tape, leaves=params.values())

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        coords = (np.arange(flat.size) if flat.size <= n_coords
                  else rng.choice(flat.size, n_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2 * eps)
            denom = max(abs(analytic[c]), abs(numeric), abs_floor)
            worst = max(worst, abs(analytic[c] - numeric) / denom)
        report.max_rel_error[name] = worst
    return report
