"""Float64 n-d tensors with reverse-mode autodiff on an explicit tape.

Design notes
------------
* All data is float64. Arrays are row-major (C order) with explicit shape
  metadata; there are no views or strides at the API level, every op
  returns a fresh array, which keeps the backward rules auditable.
* Broadcasting follows trailing-axis alignment with extent-1 stretching
  (numpy semantics). Gradients of broadcast operands are summed back to
  the operand shape.
* Differentiation is tape-based: while a :class:`Tape` is active (see
  :func:`recording`), every op whose inputs require grad appends a record
  holding the input/output tensors and a backward rule. ``Tape.backward``
  replays the records in reverse order, which is a valid reverse
  topological order because records were appended in execution order.
* ``log(0)`` yields -inf by design (documented); ``log``/``sqrt`` of
  negative values raise :class:`DomainError`. No op introduces NaN for
  inputs inside its domain.
* Stability: softmax subtracts the row max before exponentiating;
  softplus switches to ``x + log1p(exp(-x))`` above a threshold of 20.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ParameterError
from .rng import Rng

__all__ = [
    "Tensor", "Tape", "recording", "paused", "is_recording",
    "tensor", "zeros", "ones", "full",
    "add", "sub", "mul", "div", "neg", "relu", "exp", "log", "sqrt",
    "square", "softplus", "clip_min", "tsum", "tmean", "reshape", "concat",
    "take_rows", "swap_last2", "matmul", "bmm", "softmax_temperature",
    "conv2d", "avg_pool2d", "sample_standard_normal", "grad_check",
    "grad_check_params",
]


class Tensor:
    """A float64 array plus optional gradient buffer.

    ``requires_grad`` marks the tensor as a differentiation target; ops
    propagate the flag to their outputs while a tape is recording. ``grad``
    is filled (same shape as ``data``) by ``Tape.backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same data, no grad participation. The array is shared; tensors
        are treated as immutable after creation."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of executed ops; reverse replay yields gradients."""

    def __init__(self):
        self._records: list[_Record] = []

    def __len__(self) -> int:
        return len(self._records)

    def record(self, inputs: tuple, output: Tensor,
               backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> None:
        self._records.append(_Record(inputs, output, backward))

    def reset(self) -> None:
        self._records.clear()

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and replay records in reverse.

        Gradients accumulate additively on every tensor reachable from the
        loss that has ``requires_grad``. Records whose output never
        received a gradient (dead branches) are skipped.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._records):
            gout = rec.output.grad
            if gout is None:
                continue
            grads = rec.backward(gout)
            for t, g in zip(rec.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                t.grad = g if t.grad is None else t.grad + g


_ACTIVE: list[Tape | None] = []


@contextmanager
def recording(tape: Tape):
    """Make ``tape`` the active recording target inside the block."""
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


@contextmanager
def paused():
    """Disable recording inside the block (frozen-model forwards)."""
    _ACTIVE.append(None)
    try:
        yield
    finally:
        _ACTIVE.pop()


def is_recording() -> bool:
    return bool(_ACTIVE) and _ACTIVE[-1] is not None


def _current_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward) -> Tensor:
    """Wrap op output; record on the active tape if any input needs grad."""
    tape = _current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(inputs, out, backward)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were stretched by broadcasting to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_data(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(
            f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# ----------------------------------------------------------------------
# constructors
# ----------------------------------------------------------------------

def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, float(value)), requires_grad=requires_grad)


# ----------------------------------------------------------------------
# elementwise ops
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_data(a, b, "add")
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_data(a, b, "sub")
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_data(a, b, "mul")
    data = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    """Elementwise a / b. The caller guarantees b is nonzero."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_data(a, b, "div")
    data = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (-g,)

    return _result(-a.data, (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _result(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _result(data, (a,), backward)


def log(a) -> Tensor:
    """Natural log. Negative input raises DomainError; log(0) -> -inf."""
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("log of negative value")
    with np.errstate(divide="ignore"):
        data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _result(data, (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt of negative value")
    data = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / data,)

    return _result(data, (a,), backward)


def square(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        return (g * 2.0 * a.data,)

    return _result(a.data * a.data, (a,), backward)


_SOFTPLUS_THRESHOLD = 20.0


def softplus(a) -> Tensor:
    """log(1 + exp(x)), branch form: x + log1p(exp(-x)) for x > 20."""
    a = _as_tensor(a)
    x = a.data
    big = x > _SOFTPLUS_THRESHOLD
    data = np.where(big,
                    x + np.log1p(np.exp(-np.maximum(x, _SOFTPLUS_THRESHOLD))),
                    np.log1p(np.exp(np.minimum(x, _SOFTPLUS_THRESHOLD))))

    def backward(g):
        # d softplus / dx = sigmoid(x), computed in the stable branch form
        s = np.where(x >= 0.0,
                     1.0 / (1.0 + np.exp(-np.maximum(x, 0.0))),
                     np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))
        return (g * s,)

    return _result(data, (a,), backward)


def clip_min(a, floor: float) -> Tensor:
    """max(x, floor) elementwise; gradient passes only where x > floor."""
    a = _as_tensor(a)
    data = np.maximum(a.data, floor)

    def backward(g):
        return (g * (a.data > floor),)

    return _result(data, (a,), backward)


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def _norm_axes(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = g.reshape([1 if i in axes else s for i, s in enumerate(a.shape)])
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.ndim else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = g.reshape([1 if i in axes else s for i, s in enumerate(a.shape)])
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _result(data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _result(data, tuple(parts), backward)


def take_rows(a, idx) -> Tensor:
    """Select rows (axis 0) by integer index; backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    data = a.data[idx]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _result(data, (a,), backward)


def swap_last2(a) -> Tensor:
    """Transpose the last two axes (matrix transpose for 2-d input)."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise DimensionError(f"swap_last2 needs ndim >= 2, got shape {a.shape}")
    perm = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    data = np.transpose(a.data, perm).copy()

    def backward(g):
        return (np.transpose(g, perm).copy(),)

    return _result(data, (a,), backward)


# ----------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-d matrix product a[m,k] @ b[k,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched matrix product a[B,m,k] @ b[B,k,n]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3:
        raise DimensionError(f"bmm needs 3-d operands, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"bmm shape mismatch: {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.transpose(0, 2, 1), a.data.transpose(0, 2, 1) @ g

    return _result(data, (a, b), backward)


def softmax_temperature(a, tau: float) -> Tensor:
    """Temperature softmax over the last axis.

    p = exp(x/tau) / sum(exp(x/tau)), computed with max subtraction so the
    exponent never overflows. Rows sum to 1 within 1e-12.
    """
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    a = _as_tensor(a)
    z = a.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot) / tau,)

    return _result(p, (a,), backward)


# ----------------------------------------------------------------------
# convolution and pooling
# ----------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            hout: int, wout: int) -> np.ndarray:
    """(N,C,Hp,Wp) -> (N, C*kh*kw, hout*wout) patch matrix (copies)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, hout, wout),
        (sn, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(n, c * kh * kw, hout * wout)


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip).

    x: (N,C,H,W), w: (F,C,kh,kw) -> (N,F,H',W') with
    H' = (H + 2*pad - kh)//stride + 1 and likewise for W'.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs 4-d input/kernel, got {x.shape} and {w.shape}")
    n, c, h, wid = x.shape
    f, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    if kh > h + 2 * pad or kw > wid + 2 * pad:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wid + 2 * pad}")
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (wid + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, hout, wout)       # (N, C*kh*kw, P)
    wmat = w.data.reshape(f, c * kh * kw)
    data = (wmat @ cols).reshape(n, f, hout, wout)

    def backward(g):
        gm = g.reshape(n, f, hout * wout)
        dw = np.einsum("nfp,nkp->fk", gm, cols).reshape(w.shape)
        dcols = (wmat.T @ gm).reshape(n, c, kh, kw, hout, wout)
        dxp = np.zeros((n, c, h + 2 * pad, wid + 2 * pad))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * hout:stride,
                    j:j + stride * wout:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wid] if pad else dxp
        return dx, dw

    return _result(data, (x, w), backward)


def avg_pool2d(x, k: int = 2) -> Tensor:
    """Non-overlapping k x k average pooling; trailing remainder is cropped."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d needs a 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise DimensionError(f"avg_pool2d window {k} larger than input {h}x{w}")
    cropped = x.data[:, :, :ho * k, :wo * k]
    data = cropped.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :, :ho * k, :wo * k] = np.repeat(
            np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (dx,)

    return _result(data, (x,), backward)


# ----------------------------------------------------------------------
# sampling and verification
# ----------------------------------------------------------------------

def sample_standard_normal(rng: Rng, shape) -> Tensor:
    """i.i.d. N(0, 1) draws as a constant tensor; advances the rng."""
    return Tensor(rng.normal(shape))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    f must be a deterministic scalar-valued function of x (replay any
    randomness). Error per component is
    |analytic - central| / max(|analytic|, |central|, 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    tape = Tape()
    with recording(tape):
        y = f(probe)
    if y.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued f, got shape {y.shape}")
    tape.backward(y)
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = x.data.copy().ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / denom))


def grad_check_params(build_loss: Callable[[], Tensor], params: Sequence[Tensor],
                      eps: float = 1e-5) -> float:
    """Gradient check against parameters perturbed in place.

    ``build_loss`` must rebuild the scalar loss deterministically from the
    current parameter values (replaying any randomness). Returns the max
    relative error over all components of all listed parameters, with the
    same error metric as :func:`grad_check`.
    """
    for p in params:
        p.grad = None
    tape = Tape()
    with recording(tape):
        y = build_loss()
    if y.size != 1:
        raise ContractError(f"grad_check_params needs a scalar loss, got shape {y.shape}")
    tape.backward(y)
    worst = 0.0
    for p in params:
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).ravel()
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = build_loss().item()
            flat[i] = orig - eps
            lo = build_loss().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    for p in params:
        p.grad = None
    return worst
