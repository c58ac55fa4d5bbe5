"""Reverse-mode autodiff over numpy arrays.

Covers exactly the layer primitives the segmentation networks need:
convolutions (2D/3D), max pooling, transposed convolutions with
stride = kernel, channel concatenation, pointwise sum, relu, sigmoid, a
numerically stable binary cross-entropy on logits, and a scalar sum.

Recording is a per-thread tape: executing an op appends a backward closure,
and ``backward(loss)`` replays the tape in reverse execution order (which is
a topological order by construction), then clears it. One training step owns
one tape; independent threads get independent tapes, so concurrent trials do
not interact.

Training runs in float32. Float64 is supported throughout but exists for
finite-difference gradient checking.
"""

import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    DetachedTensor,
    EmptyOutput,
    MissingGrad,
    NonBinaryTarget,
    NonFiniteLoss,
    NotScalar,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32

# When enabled, every op asserts its output is finite. Costs a pass over the
# data, so it is off by default and switched on in tests.
_debug_finite = bool(int(os.environ.get("DENDRITESEG_DEBUG", "0")))


def set_debug_finite(enabled: bool) -> None:
    global _debug_finite
    _debug_finite = enabled


class Tensor:
    """A numeric array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_recorded")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._tape = None
        self._recorded = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


@dataclass
class _Record:
    out: Tensor
    fn: object  # closure(grad_of_out) -> None


@dataclass
class Tape:
    records: list = field(default_factory=list)

    def clear(self):
        self.records.clear()


_tls = threading.local()


def _thread_tape() -> Tape:
    tape = getattr(_tls, "tape", None)
    if tape is None:
        tape = Tape()
        _tls.tape = tape
    return tape


def _recording_enabled() -> bool:
    return not getattr(_tls, "no_grad", False)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = getattr(_tls, "no_grad", False)
        _tls.no_grad = True
        return self

    def __exit__(self, *exc):
        _tls.no_grad = self._prev
        return False


def _check_finite(arr):
    if _debug_finite and not np.isfinite(arr).all():
        raise NonFiniteLoss("non-finite values produced by an op")


def _make_out(data, *inputs) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._tape = None
    out._recorded = False
    return out


def _record(out: Tensor, fn) -> None:
    if out.requires_grad and _recording_enabled():
        tape = _thread_tape()
        tape.records.append(_Record(out, fn))
        out._tape = tape
        out._recorded = True


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Populate grads of everything reachable from ``loss``; clear the tape."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.data.shape}")
    tape = getattr(_tls, "tape", None)
    if not loss._recorded or loss._tape is not tape or tape is None:
        raise DetachedTensor("loss was not produced on the current tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for rec in reversed(tape.records):
            if rec.out.grad is not None:
                rec.fn(rec.out.grad)
                _check_finite(rec.out.grad)
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# shape helpers


def _tuplify(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ShapeMismatch(f"expected {n} entries, got {v!r}")
        return tuple(int(e) for e in v)
    return (int(v),) * n


# ---------------------------------------------------------------------------
# convolution


def _conv(x: Tensor, w: Tensor, b: Tensor, stride, padding, nd: int) -> Tensor:
    stride = _tuplify(stride, nd)
    padding = _tuplify(padding, nd)
    if x.data.ndim != nd + 2 or w.data.ndim != nd + 2:
        raise ShapeMismatch(
            f"conv{nd}d expects {nd + 2}-d input/weight, got {x.data.ndim}/{w.data.ndim}"
        )
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeMismatch(
            f"input channels {x.data.shape[1]} != weight C_in {w.data.shape[1]}"
        )
    if b.data.shape != (w.data.shape[0],):
        raise ShapeMismatch(f"bias shape {b.data.shape} != ({w.data.shape[0]},)")
    out_spatial = kernels.conv_out_spatial(x.data.shape[2:], w.data.shape[2:], stride, padding)
    if any(o < 1 for o in out_spatial):
        raise EmptyOutput(
            f"conv output spatial dims {out_spatial} from input {x.data.shape[2:]}"
        )
    fwd = kernels.conv3d_forward if nd == 3 else kernels.conv2d_forward
    bwd_in = kernels.conv3d_bwd_input if nd == 3 else kernels.conv2d_bwd_input
    bwd_par = kernels.conv3d_bwd_params if nd == 3 else kernels.conv2d_bwd_params
    out = _make_out(fwd(x.data, w.data, b.data, stride, padding), x, w, b)

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, bwd_in(g, w.data, stride, padding, x.data.shape[2:]))
        if w.requires_grad or b.requires_grad:
            dw, db = bwd_par(g, x.data, w.data.shape, stride, padding)
            _accum(w, dw)
            _accum(b, db)

    _record(out, grad_fn)
    return out


def conv3d(x, w, b, stride=1, padding=0) -> Tensor:
    return _conv(x, w, b, stride, padding, 3)


def conv2d(x, w, b, stride=1, padding=0) -> Tensor:
    return _conv(x, w, b, stride, padding, 2)


# ---------------------------------------------------------------------------
# max pooling (stride defaults to the kernel; windows must tile exactly)


def _maxpool(x: Tensor, kernel, stride, nd: int) -> Tensor:
    kernel = _tuplify(kernel, nd)
    stride = kernel if stride is None else _tuplify(stride, nd)
    if x.data.ndim != nd + 2:
        raise ShapeMismatch(f"maxpool{nd}d expects {nd + 2}-d input")
    for dim, k, s in zip(x.data.shape[2:], kernel, stride):
        if dim < k or (dim - k) % s != 0:
            raise ShapeMismatch(
                f"spatial dim {dim} not coverable by kernel {k} stride {s}"
            )
    fwd = kernels.maxpool3d_forward if nd == 3 else kernels.maxpool2d_forward
    data, argmax = fwd(x.data, kernel, stride)
    out = _make_out(data, x)
    x_shape = x.data.shape

    def grad_fn(g):
        _accum(x, kernels.maxpool_bwd(g, argmax, x_shape))

    _record(out, grad_fn)
    return out


def maxpool3d(x, kernel, stride=None) -> Tensor:
    return _maxpool(x, kernel, stride, 3)


def maxpool2d(x, kernel, stride=None) -> Tensor:
    return _maxpool(x, kernel, stride, 2)


# ---------------------------------------------------------------------------
# transposed convolution (stride = kernel; kernel entries in {1, 2} per axis,
# never larger than the stored weight kernel)


def _tconv(x: Tensor, w: Tensor, b: Tensor, kernel, nd: int) -> Tensor:
    kernel = _tuplify(kernel, nd)
    if x.data.ndim != nd + 2 or w.data.ndim != nd + 2:
        raise ShapeMismatch(f"transposed_conv{nd}d expects {nd + 2}-d input/weight")
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(
            f"input channels {x.data.shape[1]} != weight C_in {w.data.shape[0]}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ShapeMismatch(f"bias shape {b.data.shape} != ({w.data.shape[1]},)")
    for k, wk in zip(kernel, w.data.shape[2:]):
        if not (1 <= k <= wk):
            raise ShapeMismatch(f"kernel {kernel} exceeds stored weight kernel {w.data.shape[2:]}")
    fwd = kernels.tconv3d_forward if nd == 3 else kernels.tconv2d_forward
    bwd_in = kernels.tconv3d_bwd_input if nd == 3 else kernels.tconv2d_bwd_input
    bwd_par = kernels.tconv3d_bwd_params if nd == 3 else kernels.tconv2d_bwd_params
    out = _make_out(fwd(x.data, w.data, b.data, kernel), x, w, b)
    in_spatial = x.data.shape[2:]

    def grad_fn(g):
        if x.requires_grad:
            _accum(x, bwd_in(g, w.data, kernel, in_spatial))
        if w.requires_grad or b.requires_grad:
            dw, db = bwd_par(g, x.data, w.data.shape, kernel)
            _accum(w, dw)
            _accum(b, db)

    _record(out, grad_fn)
    return out


def transposed_conv3d(x, w, b, kernel=(2, 2, 2)) -> Tensor:
    return _tconv(x, w, b, kernel, 3)


def transposed_conv2d(x, w, b, kernel=(2, 2)) -> Tensor:
    return _tconv(x, w, b, kernel, 2)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != b.data.ndim or a.data.shape[0] != b.data.shape[0] or (
        a.data.shape[2:] != b.data.shape[2:]
    ):
        raise ShapeMismatch(f"cannot concat {a.data.shape} with {b.data.shape}")
    ca = a.data.shape[1]
    out = _make_out(np.concatenate([a.data, b.data], axis=1), a, b)

    def grad_fn(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    _record(out, grad_fn)
    return out


def pointwise_sum(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"pointwise_sum shapes {a.data.shape} vs {b.data.shape}")
    out = _make_out(a.data + b.data, a, b)

    def grad_fn(g):
        _accum(a, g)
        _accum(b, g)

    _record(out, grad_fn)
    return out


def relu(x: Tensor) -> Tensor:
    out = _make_out(np.maximum(x.data, 0), x)
    xd = x.data

    def grad_fn(g):
        _accum(x, g * (xd > 0))

    _record(out, grad_fn)
    return out


def _sigmoid_stable(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_stable(x.data)
    out = _make_out(y, x)

    def grad_fn(g):
        _accum(x, g * y * (1.0 - y))

    _record(out, grad_fn)
    return out


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy on logits, in log-sum-exp form."""
    if logits.data.shape != targets.data.shape:
        raise ShapeMismatch(
            f"logits {logits.data.shape} vs targets {targets.data.shape}"
        )
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise NonBinaryTarget("targets must be exactly 0 or 1")
    z = logits.data
    # max(z,0) - z*t + log(1+exp(-|z|)) is finite for every finite z
    per_elem = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    value = np.asarray(per_elem.mean(dtype=np.float64), dtype=z.dtype)
    out = _make_out(value.reshape(()), logits, targets)
    n = z.size

    def grad_fn(g):
        if logits.requires_grad:
            _accum(logits, g * (_sigmoid_stable(z) - t) / n)

    _record(out, grad_fn)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _make_out(np.asarray(x.data.sum(), dtype=x.data.dtype).reshape(()), x)

    def grad_fn(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    _record(out, grad_fn)
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adam_step(params, state: AdamState) -> None:
    """One bias-corrected Adam update; zeroes grads and bumps the counter."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGrad(f"parameter {i} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ShapeMismatch(f"grad shape {p.grad.shape} != param {p.data.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.grad = None
