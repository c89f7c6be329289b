"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays; the canonical layout for network math is
rank-4 ``(batch, channels, height, width)``.  Operations executed while a
:class:`Tape` is active record a backward rule onto it; ``tape.backward``
replays the rules in exact reverse order.  Gradients accumulate across
backward calls; zeroing them is the caller's duty.

Only the op set the segmentation network and its losses need is
implemented.  No broadcasting: elementwise ops require identical shapes.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "Adam",
    "set_default_dtype",
    "default_dtype",
    "set_debug_checks",
    "add",
    "sub",
    "scale",
    "square",
    "sqrt",
    "mean_all",
    "relu",
    "sigmoid",
    "conv2d",
    "upsample_nearest",
    "channel_norm",
    "concat_channels",
    "stack_first",
    "select_rows",
    "variance_along_first_axis",
    "bce_loss",
    "zero_grads",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


_DTYPE = np.float32
_DEBUG_FINITE = False


def set_default_dtype(dtype) -> None:
    """Set the float dtype for newly created tensors (float32 or float64).

    float64 exists for test configurations where finite-difference checks
    need tighter tolerances; production math runs at float32.
    """
    global _DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DTYPE = dt.type


def default_dtype():
    return _DTYPE


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness assertions on every op output (slow; test use)."""
    global _DEBUG_FINITE
    _DEBUG_FINITE = bool(enabled)


class Tensor:
    """A dense float array plus an optional gradient buffer.

    ``requires_grad`` marks a leaf whose gradient the caller wants; op
    outputs get it set automatically whenever any input carries it and a
    tape is active.  ``grad`` is allocated lazily (same shape as ``data``)
    the first time a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


class Tape:
    """Ordered record of executed operations for one backward pass.

    Used as a context manager; ops executed inside append their backward
    rule, so the record order is a topological order of the compute DAG
    and reverse iteration is a valid backpropagation schedule.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must nest"

    @staticmethod
    def active() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> None:
        self.records.append((out, backward))

    def backward(self, root: Tensor) -> None:
        """Populate gradients of every recorded tensor reachable from root.

        Seeds the root with a gradient of ones and visits records in exact
        reverse recording order.  Gradients of this tape's own op outputs
        are per-pass scratch and reset on entry; leaf gradients accumulate
        across calls (caller resets them).
        """
        for out, _ in self.records:
            if out.grad is not None:
                out.grad[...] = 0.0
        root.ensure_grad()
        root.grad += np.ones_like(root.data)
        for out, backward_fn in reversed(self.records):
            if out.grad is not None:
                backward_fn(out.grad)


def _finish(out_data: np.ndarray, parents: Sequence[Tensor],
            backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result, recording its backward rule if a tape is active."""
    if _DEBUG_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values in op output")
    tape = Tape.active()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape.record(out, backward)
    return out


def _accum(parent: Tensor, contribution: np.ndarray) -> None:
    if parent.requires_grad:
        parent.ensure_grad()
        parent.grad += contribution


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ: {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _finish(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _finish(a.data - b.data, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    c = a.data.dtype.type(factor)

    def backward(g):
        _accum(a, g * c)

    return _finish(a.data * c, (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, g * (2.0 * a.data))

    return _finish(a.data * a.data, (a,), backward)


def sqrt(a: Tensor, shift: float = 0.0) -> Tensor:
    """Elementwise sqrt(x + shift); shift > 0 keeps the gradient finite at 0."""
    root = np.sqrt(a.data + a.data.dtype.type(shift))

    def backward(g):
        _accum(a, g * (0.5 / root))

    return _finish(root, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def backward(g):
        _accum(a, np.full_like(a.data, g / n))

    return _finish(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _finish(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _finish(out, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat_channels: empty input list")
    base = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != 4 or s[0] != base[0] or s[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {base} vs {s}")
    sizes = [p.data.shape[1] for p in parts]
    edges = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, edges[:-1], edges[1:]):
            _accum(p, g[:, lo:hi])

    return _finish(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)


def stack_first(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not parts:
        raise ShapeError("stack_first: empty input list")
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != base:
            raise ShapeError(f"stack_first: shapes differ: {base} vs {p.data.shape}")

    def backward(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _finish(np.stack([p.data for p in parts], axis=0), tuple(parts), backward)


def select_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or idx.size == 0:
        raise ShapeError("select_rows: need a non-empty 1-D index list")
    if idx.min() < 0 or idx.max() >= a.data.shape[0]:
        raise ShapeError(f"select_rows: index out of range for first extent {a.data.shape[0]}")

    def backward(g):
        if a.requires_grad:
            a.ensure_grad()
            np.add.at(a.grad, idx, g)

    return _finish(a.data[idx], (a,), backward)


def variance_along_first_axis(stacked: Tensor) -> Tensor:
    """Population variance over the leading axis, per remaining coordinate."""
    n = stacked.data.shape[0]
    if n < 2:
        raise ShapeError(f"variance_along_first_axis: first extent must be >= 2, got {n}")
    centered = stacked.data - stacked.data.mean(axis=0, keepdims=True)
    out = np.mean(centered * centered, axis=0)

    def backward(g):
        # d var / d x_i = 2 (x_i - mean) / n; the mean's own dependence cancels
        _accum(stacked, (2.0 / n) * centered * g[None])

    return _finish(out.astype(stacked.data.dtype), (stacked,), backward)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: need rank-4 input, got shape {a.data.shape}")
    if factor == 1:
        def backward_id(g):
            _accum(a, g)
        return _finish(a.data.copy(), (a,), backward_id)

    b, c, h, w = a.data.shape
    out = np.repeat(np.repeat(a.data, factor, axis=2), factor, axis=3)

    def backward(g):
        folded = g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5))
        _accum(a, folded)

    return _finish(out, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (B,Cin,H,W) input with a (Cout,Cin,k,k) kernel."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: need rank-4 input and kernel, got {x.data.shape} and {kernel.data.shape}")
    bsz, cin, h, w = x.data.shape
    cout, cin_k, kh, kw = kernel.data.shape
    if cin != cin_k:
        raise ShapeError(f"conv2d: input channels {x.data.shape} do not match kernel {kernel.data.shape}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match kernel {kernel.data.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride {stride} / padding {padding}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kernel.data.shape} does not fit input {x.data.shape} "
                         f"with stride {stride}, padding {padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    sb, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (bsz, cin, ho, wo, kh, kw), (sb, sc, sh * stride, sw * stride, sh, sw))
    # im2col -> one BLAS matmul per pass
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(bsz * ho * wo, cin * kh * kw)
    w2 = kernel.data.reshape(cout, cin * kh * kw)
    out = (cols @ w2.T + bias.data).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * ho * wo, cout)
        if bias.requires_grad:
            bias.ensure_grad()
            bias.grad += g2.sum(axis=0)
        if kernel.requires_grad:
            kernel.ensure_grad()
            kernel.grad += (g2.T @ cols).reshape(kernel.data.shape)
        if x.requires_grad:
            dcols = (g2 @ w2).reshape(bsz, ho, wo, cin, kh, kw)
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            x.ensure_grad()
            if padding:
                x.grad += dxp[:, :, padding:padding + h, padding:padding + w]
            else:
                x.grad += dxp

    return _finish(np.ascontiguousarray(out), (x, kernel, bias), backward)


def channel_norm(x: Tensor, gain: Tensor, shift: Tensor, epsilon: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean / unit variance,
    then apply a learned per-channel affine."""
    if x.data.ndim != 4:
        raise ShapeError(f"channel_norm: need rank-4 input, got {x.data.shape}")
    c = x.data.shape[1]
    if gain.data.shape != (c,) or shift.data.shape != (c,):
        raise ShapeError(f"channel_norm: gain/shift must have shape ({c},), "
                         f"got {gain.data.shape} and {shift.data.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(epsilon))
    xhat = (x.data - mu) * inv
    out = gain.data[None, :, None, None] * xhat + shift.data[None, :, None, None]

    def backward(g):
        if shift.requires_grad:
            shift.ensure_grad()
            shift.grad += g.sum(axis=(0, 2, 3))
        if gain.requires_grad:
            gain.ensure_grad()
            gain.grad += (g * xhat).sum(axis=(0, 2, 3))
        if x.requires_grad:
            gx = g * gain.data[None, :, None, None]
            m1 = gx.mean(axis=(2, 3), keepdims=True)
            m2 = (gx * xhat).mean(axis=(2, 3), keepdims=True)
            x.ensure_grad()
            x.grad += inv * (gx - m1 - xhat * m2)

    return _finish(out.astype(x.data.dtype), (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# losses


BCE_CLAMP = 1e-7


def bce_loss(probs: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy of probabilities against (possibly soft)
    targets; probabilities are clamped to [1e-7, 1 - 1e-7]."""
    _check_same_shape("bce_loss", probs, targets)
    lo = probs.data.dtype.type(BCE_CLAMP)
    hi = probs.data.dtype.type(1.0 - BCE_CLAMP)
    p = np.clip(probs.data, lo, hi)
    t = targets.data
    n = p.size
    out = np.asarray(np.mean(-(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))), dtype=p.dtype)

    def backward(g):
        if probs.requires_grad:
            inside = (probs.data > lo) & (probs.data < hi)
            dp = np.where(inside, (-t / p + (1.0 - t) / (1.0 - p)) / n, 0.0)
            probs.ensure_grad()
            probs.grad += g * dp.astype(probs.data.dtype)
        # targets are labels; no gradient path

    return _finish(out, (probs, targets), backward)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Bias-corrected adaptive-moment optimizer over named parameters."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data, dtype=np.float64) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g.astype(np.float64) ** 2)
            update = (self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps))
            p.data -= update.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
