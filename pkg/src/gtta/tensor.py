"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable op records one entry on the active :class:`Tape`
when at least one input is tracked (a leaf with ``requires_grad`` or an
output of an earlier recorded op).  :func:`backward` walks the tape in
reverse from the loss, so a fresh tape per forward pass is the normal
usage::

    with new_tape():
        loss = model_loss(params)
        backward(loss)

Broadcasting follows numpy rules; gradients are summed back onto the
broadcast operand.
"""

from __future__ import annotations

import contextlib
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from gtta.errors import (
    AxisOutOfRange,
    CheckpointError,
    DetachedTensor,
    DomainError,
    IndexOutOfRange,
    InvalidDistribution,
    MissingGradient,
    NonFinite,
    NotScalar,
    ShapeMismatch,
)

DTYPE = np.float64


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Record:
    output: "Tensor"
    inputs: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered list of recorded ops; inputs always precede their consumers."""

    def __init__(self):
        self.records: list[Record] = []

    def __len__(self):
        return len(self.records)

    def record(self, out, inputs, backward_fn) -> int:
        self.records.append(Record(out, tuple(inputs), backward_fn))
        return len(self.records) - 1

    def clear(self):
        self.records.clear()


_state = threading.local()


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def new_tape():
    """Install a fresh tape for the duration of the block."""
    prev = getattr(_state, "tape", None)
    tape = _state.tape = Tape()
    try:
        yield tape
    finally:
        _state.tape = prev


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "tape")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def values(self) -> list:
        return self.data.ravel().tolist()

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(shape: Sequence[int], values: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeMismatch(f"shape entries must be positive, got {shape}")
    vals = np.asarray(values, dtype=DTYPE).reshape(-1)
    if math.prod(shape) != vals.size:
        raise ShapeMismatch(f"shape {shape} needs {math.prod(shape)} values, got {vals.size}")
    if not np.all(np.isfinite(vals)):
        raise NonFinite("tensor values must be finite")
    return Tensor(vals.reshape(shape), requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(array) -> Tensor:
    return Tensor(np.array(array, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(t.tracked for t in inputs):
        tape = active_tape()
        for t in inputs:
            if t.node_id is not None and t.tape is not tape:
                raise DetachedTensor("input was recorded on a different tape")
        out.tape = tape
        out.node_id = tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot combine shapes {a.shape} and {b.shape}") from None


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise AxisOutOfRange(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    out = ad / bd
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def elu(x, alpha: float = 1.0) -> Tensor:
    x = as_tensor(x)
    d = x.data
    pos = d > 0
    neg_part = np.exp(np.minimum(d, 0.0))
    neg_part -= 1.0
    neg_part *= alpha
    out = np.where(pos, d, neg_part)
    deriv = neg_part + alpha
    deriv[pos] = 1.0
    return _make(out, (x,), lambda g: (g * deriv,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    if not np.all(np.isfinite(out)):
        raise NonFinite("exp overflow")
    return _make(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log requires strictly positive inputs")
    d = x.data
    return _make(np.log(d), (x,), lambda g: (g / d,))


def xlogx(x) -> Tensor:
    """x*log(x) with the 0*log(0) = 0 convention."""
    x = as_tensor(x)
    d = x.data
    if np.any(d < 0):
        raise DomainError("xlogx requires non-negative inputs")
    pos = d > 0
    safe = np.where(pos, d, 1.0)
    out = np.where(pos, d * np.log(safe), 0.0)
    deriv = np.where(pos, np.log(safe) + 1.0, 0.0)
    return _make(out, (x,), lambda g: (g * deriv,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),))


_UNARY = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: unary kinds take one tensor, ``scale`` takes (x, c)."""
    if kind in _UNARY:
        return _UNARY[kind](*args)
    if kind in _BINARY:
        a, b = as_tensor(args[0]), as_tensor(args[1])
        if a.shape != b.shape:
            raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} differ")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(*args)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-d")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2 and ad.ndim > 2:
        # fold leading axes into one GEMM; the weight gradient sums over them
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def back(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.tracked else None
            gb = a2.T @ g2 if b.tracked else None
            return ga, gb

        return _make(out, (a, b), back)

    def back(g):
        ga = gb = None
        if a.tracked:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.tracked:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), back)


def transpose(x, axes=None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise AxisOutOfRange("transpose needs at least 2 axes")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {old} to {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(old),))


def index(x, key) -> Tensor:
    """numpy-style indexing; repeated advanced indices accumulate in backward."""
    x = as_tensor(x)
    shape = x.shape
    try:
        out = x.data[key]
    except IndexError as exc:
        raise IndexOutOfRange(str(exc)) from None

    def back(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out, dtype=DTYPE), (x,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = _norm_axis(axis, ts[0].ndim)
    sizes = [t.shape[axis] for t in ts]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    splits = np.cumsum(sizes)[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    ax = axis % out.ndim
    return _make(out, ts, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))))


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------


def reduce(kind: str, x, axis=None, keepdims: bool = False) -> Tensor:
    """sum / mean / max over one axis or all (``axis=None``).

    ``max`` sends the whole gradient to the first maximal element.
    """
    x = as_tensor(x)
    shape = x.shape
    if axis is not None:
        axis = _norm_axis(axis, x.ndim)
    d = x.data

    def expand(g):
        if axis is None:
            return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    if kind == "sum":
        out = d.sum(axis=axis, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.array(expand(g)),))
    if kind == "mean":
        count = d.size if axis is None else shape[axis]
        out = d.mean(axis=axis, keepdims=keepdims)
        return _make(out, (x,), lambda g: (np.array(expand(g)) / count,))
    if kind == "max":
        if axis is None:
            flat = int(np.argmax(d))
            out = d.reshape(-1)[flat]

            def back(g):
                full = np.zeros(d.size, dtype=DTYPE)
                full[flat] = np.reshape(g, ())
                return (full.reshape(shape),)

            return _make(np.array(out), (x,), back)
        first = np.argmax(d, axis=axis)  # numpy returns the first maximal index
        idx = np.expand_dims(first, axis)
        out = np.take_along_axis(d, idx, axis=axis)
        if not keepdims:
            out = np.squeeze(out, axis)

        def back(g):
            full = np.zeros(shape, dtype=DTYPE)
            gk = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(full, idx, gk, axis=axis)
            return (full,)

        return _make(out, (x,), back)
    raise ValueError(f"unknown reduction {kind!r}")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), back)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12, return_flag: bool = False):
    """Scale each slice along ``axis`` to unit L2 norm.

    Slices with norm below ``eps`` pass through unchanged; with
    ``return_flag`` a boolean array marking them is returned as well.
    """
    x = as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    d = x.data
    norm = np.sqrt((d * d).sum(axis=axis, keepdims=True))
    degenerate = norm < eps
    safe = np.where(degenerate, 1.0, norm)
    out = np.where(degenerate, d, d / safe)

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        gx = np.where(degenerate, g, (g - out * proj) / safe)
        return (gx,)

    y = _make(out, (x,), back)
    if return_flag:
        return y, np.squeeze(degenerate, axis)
    return y


# ---------------------------------------------------------------------------
# losses / divergences
# ---------------------------------------------------------------------------


def _target_matrix(target, batch: int, k: int) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.ndim == 1 and np.issubdtype(t.dtype, np.integer):
        if t.shape[0] != batch:
            raise ShapeMismatch("one class index per row expected")
        if np.any(t < 0) or np.any(t >= k):
            raise IndexOutOfRange(f"class indices must lie in [0, {k})")
        out = np.zeros((batch, k), dtype=DTYPE)
        out[np.arange(batch), t] = 1.0
        return out
    t = np.asarray(t, dtype=DTYPE)
    if t.shape != (batch, k):
        raise ShapeMismatch(f"target shape {t.shape} != {(batch, k)}")
    if np.any(t < -1e-12) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise InvalidDistribution("target rows must be distributions")
    return t


def cross_entropy(logits, target) -> Tensor:
    """Batch-mean cross-entropy of ``logits`` [B x K] against class indices
    or a (constant) probability matrix."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeMismatch("cross_entropy expects [B x K] logits")
    b, k = logits.shape
    t = _target_matrix(target, b, k)
    lsm = log_softmax(logits, axis=1)
    return scale(reduce("sum", mul(lsm, t)), -1.0 / b)


def _check_distribution(p: np.ndarray, tol: float):
    if p.ndim != 2:
        raise ShapeMismatch("expected a [B x K] probability matrix")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise InvalidDistribution("rows must be non-negative and sum to 1")


def kl_divergence(p, q, eps: float = 1e-4) -> Tensor:
    """Per-row KL(p || q) after clamping both to [eps, 1] and renormalising."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"kl shapes differ: {p.shape} vs {q.shape}")
    _check_distribution(p.data, 1e-6)
    _check_distribution(q.data, 1e-6)

    def clamp(t):
        c = clip(t, eps, 1.0)
        return div(c, reduce("sum", c, axis=1, keepdims=True))

    pc, qc = clamp(p), clamp(q)
    return reduce("sum", mul(pc, sub(log(pc), log(qc))), axis=1)


def entropy(p) -> Tensor:
    """Per-row Shannon entropy (nats)."""
    p = as_tensor(p)
    _check_distribution(p.data, 1e-6)
    return scale(reduce("sum", xlogx(clip(p, 0.0, 1.0)), axis=1), -1.0)


# ---------------------------------------------------------------------------
# backward / optimiser / verification
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a mapping leaf tensor -> gradient contributed by this call.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    contributed: dict = {}
    if loss.node_id is None:
        if not loss.requires_grad:
            raise DetachedTensor("loss is not on a tape")
        g = np.ones_like(loss.data)
        loss.grad = g if loss.grad is None else loss.grad + g
        contributed[loss] = g
        return contributed
    records = loss.tape.records
    if loss.node_id >= len(records) or records[loss.node_id].output is not loss:
        raise DetachedTensor("loss tape has been cleared")
    pending = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        rec = records[nid]
        for inp, gi in zip(rec.inputs, rec.backward_fn(g)):
            if gi is None or not inp.tracked:
                continue
            if inp.node_id is not None:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = gi if prev is None else prev + gi
            else:
                gi = np.array(gi, dtype=DTYPE).reshape(inp.shape)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                prev = contributed.get(inp)
                contributed[inp] = gi if prev is None else prev + gi
    return contributed


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update in place; clears ``.grad`` afterwards."""
    for p in params:
        if p.grad is None:
            raise MissingGradient(f"no gradient for parameter of shape {p.shape}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ShapeMismatch("optimizer state built for a different parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = None


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar loss from ``params`` on every call.
    """
    zero_grads(params)
    with new_tape():
        backward(f())
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    zero_grads(params)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                ai = a.reshape(-1)[i]
                err = abs(ai - num) / max(1e-12, abs(ai) + abs(num))
                worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_dict(tensors: dict) -> dict:
    out = {}
    for name in sorted(tensors):
        arr = tensors[name].data if isinstance(tensors[name], Tensor) else np.asarray(tensors[name], dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"tensor {name!r} has non-finite values")
        out[name] = {"shape": list(arr.shape), "values": [float(v) for v in arr.reshape(-1)]}
    return {"format_version": CHECKPOINT_VERSION, "tensors": out}


def save_checkpoint(path, tensors: dict) -> None:
    # json writes floats with repr(), the shortest round-trip form
    text = json.dumps(checkpoint_dict(tensors), separators=(",", ":"))
    with open(path, "w") as fh:
        fh.write(text)


def parse_checkpoint(doc: dict) -> dict:
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    out = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        vals = np.asarray(entry["values"], dtype=DTYPE)
        if vals.size != math.prod(shape):
            raise CheckpointError(f"tensor {name!r}: value count does not match shape")
        out[name] = vals.reshape(shape)
    return out


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(str(exc)) from None
    return parse_checkpoint(doc)
