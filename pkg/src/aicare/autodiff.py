"""Reverse-mode automatic differentiation on dense float64 tensors.

Everything is built on numpy arrays. A ``Tensor`` wraps one array; while a
``Tape`` is active (``with Tape() as tape:``) every primitive operation whose
inputs require gradients appends a pullback closure to the tape.
``tape.backward(loss)`` replays those closures in exact reverse order and
accumulates gradients into a per-tape mapping, so parameters that never took
part in the computation report an exactly-zero gradient.

Tapes are confined to the thread that created them; a fresh tape per
forward/backward pass is the intended usage.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, DomainError, NumericError, UsageError

_TLS = threading.local()

# Clamp bounds keeping sigmoid outputs strictly inside (0, 1) in float64.
_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def _active_tape():
    return getattr(_TLS, "tape", None)


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    ``requires_grad`` marks trainable leaves; results of operations inherit
    the flag from their inputs. Gradients live on the tape, not the tensor.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Sugar for the handful of arithmetic forms used by model code.
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

    def __neg__(self):
        return neg(self)


def as_tensor(value) -> Tensor:
    """Wrap arrays and scalars; pass tensors through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def param(data, rng: np.random.Generator | None = None, scale: float | None = None) -> Tensor:
    """Create a trainable leaf. With ``rng`` and ``scale``, sample
    uniform(-scale, +scale) into the given shape instead of wrapping data."""
    if rng is not None:
        shape = tuple(data) if isinstance(data, (tuple, list)) else (int(data),)
        data = rng.uniform(-scale, scale, size=shape)
    return Tensor(data, requires_grad=True)


class Tape:
    """Ordered op record for one forward pass plus its gradient state."""

    def __init__(self):
        self._ops: list[Callable[[], None]] = []
        self._grads: dict[Tensor, np.ndarray] = {}
        self._produced: set[int] = set()

    def __enter__(self):
        if _active_tape() is not None:
            raise UsageError("a tape is already active on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.tape = None
        return False

    def _push(self, out: Tensor, pullback: Callable[[], None]) -> None:
        self._produced.add(id(out))
        self._ops.append(pullback)

    def _grad_of(self, t: Tensor):
        return self._grads.get(t)

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        held = self._grads.get(t)
        if held is None:
            # Copy so later in-place accumulation cannot alias another buffer.
            self._grads[t] = np.array(g, dtype=np.float64)
        else:
            held += g

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(leaf) for every tracked leaf on this tape.

        Deterministic: replaying twice resets and reproduces gradients
        bitwise. ``output`` must be a scalar produced on this tape.
        """
        if not isinstance(output, Tensor):
            raise UsageError("backward() expects a Tensor output")
        if id(output) not in self._produced:
            raise UsageError("output was not produced on this tape")
        if output.data.size != 1:
            raise UsageError(f"backward() needs a scalar output, got shape {output.data.shape}")
        self._grads = {output: np.ones_like(output.data)}
        for pullback in reversed(self._ops):
            pullback()

    def gradient(self, t: Tensor) -> np.ndarray:
        """Gradient accumulated for ``t``; exact zeros if it was untouched."""
        held = self._grads.get(t)
        if held is None:
            return np.zeros_like(t.data)
        return held


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, fwd, da, db) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(fwd(a.data, b.data))
    tape = _active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        out.requires_grad = True

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            if a.requires_grad:
                tape._accumulate(a, _unbroadcast(da(g, a.data, b.data), a.data.shape))
            if b.requires_grad:
                tape._accumulate(b, _unbroadcast(db(g, a.data, b.data), b.data.shape))

        tape._push(out, pull)
    return out


def _unary(x, fwd, dx) -> Tensor:
    x = as_tensor(x)
    y = fwd(x.data)
    out = Tensor(y)
    tape = _active_tape()
    if tape is not None and x.requires_grad:
        out.requires_grad = True

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            tape._accumulate(x, dx(g, x.data, y))

        tape._push(out, pull)
    return out


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x)


def neg(x) -> Tensor:
    return _unary(x, lambda v: -v, lambda g, v, y: -g)


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log requires strictly positive inputs")
    return _unary(x, np.log, lambda g, v, y: g / v)


def tanh(x) -> Tensor:
    return _unary(x, np.tanh, lambda g, v, y: g * (1.0 - y * y))


def sigmoid_np(v: np.ndarray) -> np.ndarray:
    """Stable logistic kernel clamped strictly inside (0, 1); shared by the
    taped op and fused primitives so both produce identical bits."""
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(x) -> Tensor:
    """Numerically stable logistic; output clamped strictly inside (0, 1)."""
    return _unary(x, sigmoid_np, lambda g, v, y: g * y * (1.0 - y))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the bounds."""

    def dx(g, v, y):
        return g * ((v >= lo) & (v <= hi))

    return _unary(x, lambda v: np.clip(v, lo, hi), dx)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _unary(x, lambda v: v.reshape(shape), lambda g, v, y: g.reshape(v.shape))


def transpose(x) -> Tensor:
    """2-D transpose."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got shape {x.data.shape}")
    return _unary(x, lambda v: np.ascontiguousarray(v.T), lambda g, v, y: g.T)


def ssum(x, axis=None, keepdims: bool = False) -> Tensor:
    """Sum along ``axis`` (all axes when None)."""
    x = as_tensor(x)

    def dx(g, v, y):
        if axis is None:
            return np.broadcast_to(g, v.shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, v.shape)

    return _unary(x, lambda v: v.sum(axis=axis, keepdims=keepdims), dx)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.data.size
    else:
        n = x.data.shape[axis]
    return mul(ssum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def where_mask(mask, a, b) -> Tensor:
    """Select ``a`` where mask is true else ``b``; mask is a constant."""
    m = np.asarray(mask)

    def fwd(x, y):
        return np.where(m, x, y)

    return _binary(a, b, fwd,
                   lambda g, x, y: g * m,
                   lambda g, x, y: g * (~m if m.dtype == bool else 1.0 - m))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parts):
        out.requires_grad = True
        sizes = [p.data.shape[axis] for p in parts]

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            offset = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(offset, offset + n)
                    tape._accumulate(p, g[tuple(idx)])
                offset += n

        tape._push(out, pull)
    return out


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.stack([p.data for p in parts], axis=axis))
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parts):
        out.requires_grad = True

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            for i, p in enumerate(parts):
                if p.requires_grad:
                    tape._accumulate(p, np.take(g, i, axis=axis))

        tape._push(out, pull)
    return out


def matmul(a, b) -> Tensor:
    """General dot product following numpy ``@`` semantics for 1-D/2-D."""
    a = as_tensor(a)
    b = as_tensor(b)
    inner_a = a.data.shape[-1]
    inner_b = b.data.shape[0] if b.data.ndim >= 1 else None
    if inner_a != inner_b:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}")

    def da(g, x, y):
        if x.ndim == 1 and y.ndim == 1:
            return g * y
        if x.ndim == 1:
            return g @ y.T if y.ndim == 2 else g * y
        if y.ndim == 1:
            return np.outer(g, y) if x.ndim == 2 else g * y
        return g @ y.T

    def db(g, x, y):
        if x.ndim == 1 and y.ndim == 1:
            return g * x
        if x.ndim == 1:
            return np.outer(x, g)
        if y.ndim == 1:
            return x.T @ g
        return x.T @ g

    return _binary(a, b, lambda x, y: x @ y, da, db)


def affine(weight, bias, x) -> Tensor:
    """weight @ x + bias for a 2-D weight and 1-D input vector."""
    weight, x = as_tensor(weight), as_tensor(x)
    if weight.data.ndim != 2 or x.data.ndim != 1 or weight.data.shape[1] != x.data.shape[0]:
        raise DimensionError(
            f"affine needs weight (m, n) and x (n,), got {weight.data.shape} and {x.data.shape}")
    if bias is None:
        return matmul(weight, x)
    bias = as_tensor(bias)
    if bias.data.shape != (weight.data.shape[0],):
        raise DimensionError(
            f"affine bias shape {bias.data.shape} does not match weight {weight.data.shape}")
    return add(matmul(weight, x), bias)


def channel_matvec(u, h) -> Tensor:
    """Per-channel matrix-vector product.

    ``u`` has shape (N, out, inp); ``h`` has shape (..., N, inp). Returns
    (..., N, out) where out[..., n, :] = u[n] @ h[..., n, :].
    """
    u, h = as_tensor(u), as_tensor(h)
    if u.data.ndim != 3 or h.data.shape[-1] != u.data.shape[2] or h.data.shape[-2] != u.data.shape[0]:
        raise DimensionError(
            f"channel_matvec needs u (N, o, i) and h (..., N, i), got {u.data.shape} and {h.data.shape}")
    n, o, i = u.data.shape
    lead = h.data.shape[:-2]
    hm = h.data.reshape(-1, n, i)
    # (N, m, i) @ (N, i, o) batched products run on BLAS; einsum would not.
    om = np.matmul(hm.transpose(1, 0, 2), u.data.transpose(0, 2, 1)).transpose(1, 0, 2)
    out = Tensor(om.reshape(*lead, n, o))
    tape = _active_tape()
    if tape is not None and (u.requires_grad or h.requires_grad):
        out.requires_grad = True

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            gm = g.reshape(-1, n, o)
            if u.requires_grad:
                tape._accumulate(u, np.matmul(gm.transpose(1, 2, 0), hm.transpose(1, 0, 2)))
            if h.requires_grad:
                gh = np.matmul(gm.transpose(1, 0, 2), u.data).transpose(1, 0, 2)
                tape._accumulate(h, gh.reshape(h.data.shape))

        tape._push(out, pull)
    return out


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    z = as_tensor(z)
    if z.data.shape[-1] == 0 or z.data.ndim == 0:
        raise DomainError("softmax needs a non-empty vector")

    def dx(g, v, y):
        return y * (g - (g * y).sum(axis=-1, keepdims=True))

    return _unary(z, _softmax_np, dx)


def _sparsemax_np(z: np.ndarray) -> np.ndarray:
    # Euclidean projection onto the probability simplex via the sorted
    # cumulative-sum threshold. Max is subtracted first, which keeps the
    # projection exactly invariant to representable constant shifts.
    shifted = z - z.max(axis=-1, keepdims=True)
    srt = np.sort(shifted, axis=-1)[..., ::-1]
    csum = np.cumsum(srt, axis=-1)
    k = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    support = 1.0 + k * srt > csum
    k_star = support.sum(axis=-1, keepdims=True)
    tau_sum = np.take_along_axis(csum, k_star - 1, axis=-1)
    tau = (tau_sum - 1.0) / k_star
    return np.maximum(shifted - tau, 0.0)


def sparsemax(z) -> Tensor:
    """Projection of the last axis onto the probability simplex.

    Returns exact zeros outside the support set; the Jacobian acts only on
    the support (identity minus the support mean).
    """
    z = as_tensor(z)
    if z.data.shape[-1] == 0 or z.data.ndim == 0:
        raise DomainError("sparsemax needs a non-empty vector")

    def dx(g, v, y):
        support = y > 0.0
        k = support.sum(axis=-1, keepdims=True)
        inner = (g * support).sum(axis=-1, keepdims=True) / k
        return np.where(support, g - inner, 0.0)

    return _unary(z, _sparsemax_np, dx)


def custom(out_data: np.ndarray, inputs: Sequence[Tensor],
           pullback: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Record a fused primitive with a hand-written pullback.

    ``pullback`` receives the output gradient and returns one gradient per
    input (None to skip an input). Lets model code collapse a hot composite
    (like a full GRU step) into one tape entry.
    """
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True

        def pull():
            g = tape._grad_of(out)
            if g is None:
                return
            grads = pullback(g)
            for t, gt in zip(inputs, grads):
                if gt is not None and t.requires_grad:
                    tape._accumulate(t, gt)

        tape._push(out, pull)
    return out


def finite_diff_check(f, params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter dict to a scalar Tensor. Every coordinate of
    every parameter is probed at +-eps. The relative error of a coordinate
    is |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise DomainError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    with Tape() as tape:
        out = f(params)
        value = out.item()
    if not np.isfinite(value):
        raise NumericError("f is not finite at the evaluation point")
    tape.backward(out)
    analytic = {name: np.array(tape.gradient(p)) for name, p in params.items()}

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            hi = f(params).item()
            flat[i] = saved - eps
            lo = f(params).item()
            flat[i] = saved
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"f is not finite probing {name}[{i}]")
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
