"""Dense float32 tensors with reverse-mode autodiff on an explicit tape.

Values are numpy float32 arrays in row-major order. Differentiable ops are
plain functions; when a :class:`Tape` is active (``with Tape() as tape:``)
and an operand is attached to the graph, the op records a backward rule on
the tape. Calling :func:`backward` on a scalar loss walks the tape once in
reverse and accumulates gradients into the ``grad`` field of every leaf
(``requires_grad=True``) tensor that the loss reaches.

Rules of the road:
  * binary ops take two tensors of identical shape, or a tensor and a
    Python scalar -- there is no implicit broadcasting,
  * structured shape changes (reshape, concat, bias/channel injection)
    are explicit ops with their own backward rules,
  * every op validates that its output is finite and raises
    :class:`NumericError` otherwise,
  * reductions accumulate in float64 before casting back to float32.

Inference simply runs the same ops with no tape active; nothing records.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

Scalar = (int, float, np.integer, np.floating)


class NumericError(ArithmeticError):
    """Raised when an op produces or would produce non-finite values."""


def _as_f32(data) -> np.ndarray:
    # not ascontiguousarray: that call promotes 0-d arrays to shape (1,)
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def _check_finite(arr: np.ndarray, ctx: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {ctx}")
    return arr


class Tensor:
    """A float32 array plus optional gradient and a link into the active tape.

    ``grad`` is ``None`` until a backward pass deposits a gradient; a missing
    gradient means "no contribution", i.e. zero.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _check_finite(_as_f32(data), "Tensor()")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None
        self._node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def clear_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_const_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_const_like(other, self), self)

    def __pow__(self, other):
        return power(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _const_like(value, ref: Tensor) -> Tensor:
    """Promote a scalar to a constant tensor of the reference shape."""
    if isinstance(value, Tensor):
        return value
    if not isinstance(value, Scalar):
        raise TypeError(f"expected Tensor or scalar, got {type(value).__name__}")
    return Tensor(np.full(ref.shape, value, dtype=np.float32))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class _Node:
    __slots__ = ("out_id", "inputs", "backward_fn")

    def __init__(self, out_id, inputs, backward_fn):
        self.out_id = out_id
        # inputs: tuple of (tensor, needs_grad) in op-argument order
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops for one training step.

    Appending preserves topological order by construction (an op's inputs
    always already exist), so a single reverse sweep visits every node once.
    A tape is single-threaded and meant to be dropped after the step.
    """

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self._nodes)

    def _append(self, out: Tensor, inputs, backward_fn) -> None:
        out._tape = self
        out._node_id = len(self._nodes)
        self._nodes.append(_Node(out._node_id, inputs, backward_fn))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _needs_grad(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t._node_id is not None and t._tape is tape)


def _record(out: Tensor, inputs: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    """Attach a backward rule if a tape is active and any input is live."""
    tape = _active_tape()
    if tape is None:
        return out
    flags = tuple(_needs_grad(t, tape) for t in inputs)
    if any(flags):
        tape._append(out, tuple(zip(inputs, flags)), backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Reverse sweep from ``loss``; accumulates into leaf ``grad`` fields.

    Gradients add across multiple uses of a tensor and across repeated
    backward calls; use :meth:`Tensor.clear_grad` (or the optimizer, which
    clears after each step) to reset leaves.
    """
    if loss.data.size != 1:
        raise RuntimeError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None or loss._node_id is None:
        raise RuntimeError("loss is not attached to an active tape")
    grads: list[np.ndarray | None] = [None] * (loss._node_id + 1)
    grads[loss._node_id] = np.ones_like(loss.data)
    for node in reversed(tape._nodes[: loss._node_id + 1]):
        g_out = grads[node.out_id]
        if g_out is None:
            continue
        for (tens, needed), g_in in zip(node.inputs, node.backward_fn(g_out)):
            if not needed or g_in is None:
                continue
            g_in = np.asarray(g_in, dtype=np.float32)
            if tens.requires_grad:
                tens.grad = g_in.copy() if tens.grad is None else tens.grad + g_in
            elif tens._node_id is not None and tens._tape is tape:
                if grads[tens._node_id] is None:
                    grads[tens._node_id] = g_in.copy()
                else:
                    grads[tens._node_id] = grads[tens._node_id] + g_in
        grads[node.out_id] = None


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------

def _binary_operands(a: Tensor, b, op: str) -> tuple[Tensor, Tensor, bool]:
    """Validate a binary op; returns (a, b_tensor, b_was_scalar)."""
    if not isinstance(a, Tensor):
        raise TypeError(f"{op}: first operand must be a Tensor")
    if isinstance(b, Scalar):
        return a, Tensor(np.full(a.shape, b, dtype=np.float32)), True
    if not isinstance(b, Tensor):
        raise TypeError(f"{op}: second operand must be a Tensor or scalar")
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} "
                         "(only tensor-with-scalar is broadcast)")
    return a, b, False


def add(a: Tensor, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "add")
    out = Tensor(_check_finite(a.data + b.data, "add"))
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "sub")
    out = Tensor(_check_finite(a.data - b.data, "sub"))
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "mul")
    out = Tensor(_check_finite(a.data * b.data, "mul"))
    return _record(out, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: Tensor, b) -> Tensor:
    a, b, _ = _binary_operands(a, b, "div")
    if np.any(b.data == 0.0):
        raise NumericError("div: zero entries in denominator")
    out = Tensor(_check_finite(a.data / b.data, "div"))

    def bwd(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _record(out, (a, b), bwd)


def power(a: Tensor, b) -> Tensor:
    """Elementwise ``a ** b``; tensor exponents require a positive base."""
    a, b, scalar_exp = _binary_operands(a, b, "power")
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out_data = a.data ** b.data
    out = Tensor(_check_finite(out_data, "power"))

    def bwd(g):
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            ga = g * b.data * a.data ** (b.data - 1.0)
            gb = None if scalar_exp else g * out.data * np.log(a.data)
        return ga, gb

    return _record(out, (a, b), bwd)


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); the denoiser's activation."""
    s = expit(x.data)
    out = Tensor(_check_finite(x.data * s, "silu"))
    return _record(out, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation, see module docstring)
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (int(axes),)
    axes = tuple(int(ax) for ax in axes)
    norm = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for ndim {ndim}")
        norm.append(ax % ndim)
    if len(set(norm)) != len(norm):
        raise ValueError(f"duplicate axes in {axes}")
    return tuple(sorted(norm))


def _unreduce(g: np.ndarray, in_shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, in_shape)


def reduce_sum(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(_check_finite(out_data, "reduce_sum"))
    return _record(out, (a,),
                   lambda g: (_unreduce(g, a.shape, axes, keepdims),))


def reduce_mean(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out_data = a.data.mean(axis=axes, keepdims=keepdims, dtype=np.float64)
    out = Tensor(_check_finite(out_data, "reduce_mean"))
    return _record(out, (a,),
                   lambda g: (_unreduce(g / count, a.shape, axes, keepdims),))


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty input list")
    ndim = tensors[0].ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for ndim {ndim}")
    axis %= ndim
    for t in tensors[1:]:
        if t.ndim != ndim:
            raise ValueError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ValueError(f"concat: extent mismatch on axis {ax}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _record(out, tuple(tensors), bwd)


# ---------------------------------------------------------------------------
# Bias / channel injection (explicit alternatives to broadcasting)
# ---------------------------------------------------------------------------

def _axis_view(v: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = v.shape[0]
    return v.reshape(shape)


def add_bias(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Add a 1-D vector along one axis of ``x`` (e.g. a conv or linear bias)."""
    if v.ndim != 1 or x.shape[axis] != v.shape[0]:
        raise ValueError(f"add_bias: need 1-D vector of length {x.shape[axis]}, "
                         f"got shape {v.shape}")
    out = Tensor(_check_finite(x.data + _axis_view(v.data, x.ndim, axis), "add_bias"))
    other = tuple(ax for ax in range(x.ndim) if ax != axis)

    def bwd(g):
        return g, g.sum(axis=other, dtype=np.float64)

    return _record(out, (x, v), bwd)


def mul_bias(x: Tensor, v: Tensor, axis: int) -> Tensor:
    """Scale ``x`` by a 1-D vector along one axis (e.g. a norm gain)."""
    if v.ndim != 1 or x.shape[axis] != v.shape[0]:
        raise ValueError(f"mul_bias: need 1-D vector of length {x.shape[axis]}, "
                         f"got shape {v.shape}")
    vb = _axis_view(v.data, x.ndim, axis)
    out = Tensor(_check_finite(x.data * vb, "mul_bias"))
    other = tuple(ax for ax in range(x.ndim) if ax != axis)

    def bwd(g):
        return g * vb, (g * x.data).sum(axis=other, dtype=np.float64)

    return _record(out, (x, v), bwd)


def add_channel_map(x: Tensor, v: Tensor) -> Tensor:
    """Add a per-sample per-channel offset ``v[N, C]`` to ``x[N, C, H, W]``.

    Carries the projected step embedding into a feature map.
    """
    if x.ndim != 4 or v.ndim != 2 or x.shape[:2] != v.shape:
        raise ValueError(f"add_channel_map: got x {x.shape}, v {v.shape}")
    out = Tensor(_check_finite(x.data + v.data[:, :, None, None], "add_channel_map"))

    def bwd(g):
        return g, g.sum(axis=(2, 3), dtype=np.float64)

    return _record(out, (x, v), bwd)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = Tensor(_check_finite(a.data @ b.data, "matmul"))
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _conv_cols(xp: np.ndarray, kh: int, kw: int, stride: int,
               ho: int, wo: int) -> np.ndarray:
    """im2col: padded input -> (N, C*kh*kw, ho*wo) patch matrix."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, ho, wo),
        (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.reshape(n, c * kh * kw, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x[N,C,H,W]`` with ``kernel[F,C,kH,kW]``.

    Symmetric zero padding; output extent (H + 2*padding - kH)/stride + 1
    must be integral. Gradients flow to both the input and the kernel.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError("conv2d: input and kernel must be 4-D")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if ck != c:
        raise ValueError(f"conv2d: channel mismatch, input has {c}, kernel expects {ck}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ValueError("conv2d: non-integral output extent; "
                         f"(H+2p-kH)={hp - kh} not divisible by stride {stride}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    if padding:
        xp = np.zeros((n, c, hp, wp), dtype=np.float32)
        xp[:, :, padding:padding + h, padding:padding + w] = x.data
    else:
        xp = x.data
    cols = _conv_cols(xp, kh, kw, stride, ho, wo)
    km = kernel.data.reshape(f, c * kh * kw)
    out = Tensor(_check_finite((km @ cols).reshape(n, f, ho, wo), "conv2d"))

    def bwd(g):
        g2 = g.reshape(n, f, ho * wo)
        gk = np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        gcols = (km.T @ g2).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, hp, wp), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride,
                    j:j + stride * wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return gx, gk

    return _record(out, (x, kernel), bwd)


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping mean pooling; spatial extents must divide by ``window``."""
    if x.ndim != 4:
        raise ValueError("avg_pool2d: input must be 4-D")
    n, c, h, w = x.shape
    if h % window or w % window:
        raise ValueError(f"avg_pool2d: extents {h}x{w} not divisible by {window}")
    ho, wo = h // window, w // window
    blocks = x.data.reshape(n, c, ho, window, wo, window)
    out = Tensor(blocks.mean(axis=(3, 5), dtype=np.float64).astype(np.float32))

    def bwd(g):
        g = g / (window * window)
        return (np.repeat(np.repeat(g, window, axis=2), window, axis=3),)

    return _record(out, (x,), bwd)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    if x.ndim != 4:
        raise ValueError("upsample_nearest: input must be 4-D")
    out = Tensor(np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3))
    n, c, h, w = x.shape

    def bwd(g):
        return (g.reshape(n, c, h, factor, w, factor)
                .sum(axis=(3, 5), dtype=np.float64),)

    return _record(out, (x,), bwd)


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) plane to zero mean, unit variance.

    Population variance over the spatial dims; the batch plays no role, so
    the statistics are identical at any batch size.
    """
    if x.ndim != 4:
        raise ValueError("channel_norm: input must be 4-D")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv_std).astype(np.float32)
    out = Tensor(_check_finite(xhat, "channel_norm"))
    inv_std32 = inv_std.astype(np.float32)

    def bwd(g):
        g_mu = g.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        gy_mu = (g * xhat).mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        return (inv_std32 * (g - g_mu - xhat * gy_mu),)

    return _record(out, (x,), bwd)
