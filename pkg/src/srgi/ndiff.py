"""Minimal dense-tensor reverse-mode differentiation over numpy arrays.

Ops compute forward values eagerly; while a :class:`Tape` is active, each
op whose output depends on a trainable leaf records a closure that
propagates adjoints. ``Tape.backward`` replays closures in reverse
insertion order, accumulating (summing) gradients across fan-out into
each tensor's ``grad`` slot.

Values are float64 throughout. The tape is process-global and the
reference path is single-threaded; one tape per thread is the intended
discipline if ops are ever driven concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_NORM_FLOOR = 1e-12
_active_tape = None


def as_tensor(x) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class Tensor:
    """Dense float64 array with a gradient slot.

    ``requires_grad`` marks trainable leaves; it propagates through ops so
    that constant subgraphs are never recorded.
    """

    __slots__ = ("values", "grad", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Append-only record of backward closures, replayed in reverse order."""

    def __init__(self):
        self._backward_ops = []
        self.nondeterministic = False

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def record(self, backward_fn) -> None:
        self._backward_ops.append(backward_fn)

    def __len__(self):
        return len(self._backward_ops)

    def backward(self, loss: Tensor) -> None:
        """Seed the scalar loss with gradient 1 and run all adjoints."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        _accumulate(loss, np.ones_like(loss.values))
        for fn in reversed(self._backward_ops):
            fn()


def active_tape():
    return _active_tape


def grad_or_zero(t: Tensor) -> np.ndarray:
    """Gradient of ``t`` after backward; zeros if it was off the loss's ancestry."""
    if t.grad is None:
        return np.zeros_like(t.values)
    return t.grad


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(values, inputs, backward_fn) -> Tensor:
    rg = any(t.requires_grad for t in inputs)
    out = Tensor(values, requires_grad=rg)
    if rg and _active_tape is not None:
        _active_tape.record(backward_fn(out))
    return out


def _check_finite(values, op: str) -> None:
    if not np.all(np.isfinite(values)):
        raise ValueError(f"non-finite values produced by op {op}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values + b.values

    def bw(out):
        def fn():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad, b.shape))
        return fn

    return _make(values, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    values = a.values - b.values

    def bw(out):
        def fn():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(-out.grad, b.shape))
        return fn

    return _make(values, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise (broadcasting) product."""
    a, b = as_tensor(a), as_tensor(b)
    values = a.values * b.values

    def bw(out):
        def fn():
            if out.grad is None:
                return
            if a.requires_grad:
                _accumulate(a, _unbroadcast(out.grad * b.values, a.shape))
            if b.requires_grad:
                _accumulate(b, _unbroadcast(out.grad * a.values, b.shape))
        return fn

    return _make(values, (a, b), bw)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    a = as_tensor(a)
    c = float(c)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, c * out.grad)
        return fn

    return _make(a.values * c, (a,), bw)


def matmul(a, b) -> Tensor:
    """``a @ b`` for 1-D/2-D operands with numpy semantics."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ValueError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    values = a.values @ b.values

    def bw(out):
        def fn():
            if out.grad is None:
                return
            g = out.grad
            av, bv = a.values, b.values
            if a.requires_grad:
                if a.ndim == 2 and b.ndim == 2:
                    da = g @ bv.T
                elif a.ndim == 2 and b.ndim == 1:
                    da = np.outer(g, bv)
                elif a.ndim == 1 and b.ndim == 2:
                    da = bv @ g
                else:
                    da = g * bv
                _accumulate(a, da)
            if b.requires_grad:
                if a.ndim == 2 and b.ndim == 2:
                    db = av.T @ g
                elif a.ndim == 2 and b.ndim == 1:
                    db = av.T @ g
                elif a.ndim == 1 and b.ndim == 2:
                    db = np.outer(av, g)
                else:
                    db = g * av
                _accumulate(b, db)
        return fn

    return _make(values, (a, b), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad.T)
        return fn

    return _make(a.values.T, (a,), bw)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat of zero tensors")
    values = np.concatenate([p.values for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def fn():
            if out.grad is None:
                return
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    _accumulate(p, out.grad[tuple(sl)])
        return fn

    return _make(values, parts, bw)


def stack_rows(parts) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("stack_rows of zero tensors")
    values = np.stack([p.values for p in parts], axis=0)

    def bw(out):
        def fn():
            if out.grad is None:
                return
            for i, p in enumerate(parts):
                if p.requires_grad:
                    _accumulate(p, out.grad[i])
        return fn

    return _make(values, parts, bw)


def row(a, i: int) -> Tensor:
    """Extract row ``i`` of a matrix as a 1-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"row expects a 2-D tensor, got shape {a.shape}")
    i = int(i)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                g = np.zeros_like(a.values)
                g[i] = out.grad
                _accumulate(a, g)
        return fn

    return _make(a.values[i], (a,), bw)


def gather(table, indices) -> Tensor:
    """Row gather (embedding lookup); adjoint scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.intp)

    def bw(out):
        def fn():
            if out.grad is not None and table.requires_grad:
                g = np.zeros_like(table.values)
                np.add.at(g, idx, out.grad)
                _accumulate(table, g)
        return fn

    return _make(table.values[idx], (table,), bw)


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * (1.0 - out.values ** 2))
        return fn

    return _make(y, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * out.values * (1.0 - out.values))
        return fn

    return _make(y, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * (a.values > 0))
        return fn

    return _make(np.maximum(a.values, 0.0), (a,), bw)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    a = as_tensor(a)
    y = np.where(a.values > 0, a.values, slope * a.values)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * np.where(a.values > 0, 1.0, slope))
        return fn

    return _make(y, (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.values)
    _check_finite(y, "exp")

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * out.values)
        return fn

    return _make(y, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values <= 0):
        raise ValueError("log of non-positive values; clip first")
    y = np.log(a.values)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad / a.values)
        return fn

    return _make(y, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside the interval."""
    a = as_tensor(a)
    y = np.clip(a.values, lo, hi)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                inside = (a.values > lo) & (a.values < hi)
                _accumulate(a, out.grad * inside)
        return fn

    return _make(y, (a,), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                g = out.grad
                dot = (g * out.values).sum(axis=axis, keepdims=True)
                _accumulate(a, out.values * (g - dot))
        return fn

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and normalization


def tsum(a) -> Tensor:
    """Sum of all elements (scalar tensor)."""
    a = as_tensor(a)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, np.full_like(a.values, float(out.grad)))
        return fn

    return _make(a.values.sum(), (a,), bw)


def sum_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, np.broadcast_to(
                    np.expand_dims(out.grad, axis), a.shape).copy())
        return fn

    return _make(a.values.sum(axis=axis), (a,), bw)


def mean_axis(a, axis: int) -> Tensor:
    a = as_tensor(a)
    n = a.shape[axis]

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, np.broadcast_to(
                    np.expand_dims(out.grad / n, axis), a.shape).copy())
        return fn

    return _make(a.values.mean(axis=axis), (a,), bw)


def l2_normalize(a) -> Tensor:
    """Scale rows (or a single vector) to unit L2 norm; zero rows pass through.

    A zero row keeps zero output and propagates zero gradient, so untrained
    all-zero embeddings cannot produce NaNs downstream.
    """
    a = as_tensor(a)
    if a.ndim == 1:
        norm = np.linalg.norm(a.values, keepdims=True)
    else:
        norm = np.linalg.norm(a.values, axis=-1, keepdims=True)
    nonzero = norm > _NORM_FLOOR
    safe = np.where(nonzero, norm, 1.0)
    y = np.where(nonzero, a.values / safe, 0.0)

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                g = out.grad
                dot = (g * out.values).sum(axis=-1, keepdims=True)
                da = np.where(nonzero, (g - out.values * dot) / safe, 0.0)
                _accumulate(a, da)
        return fn

    return _make(y, (a,), bw)


def cosine_similarity(a, b) -> Tensor:
    """Row-wise cosine of two equal-shape tensors; zero vectors give cosine 0."""
    na, nb = l2_normalize(a), l2_normalize(b)
    return sum_axis(mul(na, nb), -1)


def dropout(a, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train scales survivors by 1/(1-rate); eval is identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    a = as_tensor(a)
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(a.shape) >= rate
    factor = keep / (1.0 - rate)
    if _active_tape is not None:
        _active_tape.nondeterministic = True

    def bw(out):
        def fn():
            if out.grad is not None and a.requires_grad:
                _accumulate(a, out.grad * factor)
        return fn

    return _make(a.values * factor, (a,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool


def grad_check(f, params: list[Tensor], step: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central finite differences.

    ``f`` is a zero-argument callable closing over ``params`` and returning
    a scalar tensor; it must be deterministic (train-mode dropout on the
    tape is rejected). Relative error is |a-b| / max(1, |a|, |b|) per
    coordinate.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
        if tape.nondeterministic:
            raise ValueError("nondeterministic program")
        tape.backward(loss)
    analytic = [grad_or_zero(p).copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        for idx in np.ndindex(p.values.shape):
            saved = p.values[idx]
            p.values[idx] = saved + step
            up = float(f().values)
            p.values[idx] = saved - step
            down = float(f().values)
            p.values[idx] = saved
            numeric = (up - down) / (2.0 * step)
            a = float(g[idx])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, passed=worst < tol)
