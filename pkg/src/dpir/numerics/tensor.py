"""Dense float32 tensors with tape-based reverse-mode autodiff.

CPU-only, numpy-backed, float32-only. Ops record onto the innermost active
Tape; with no tape active every op is a plain forward evaluation. Reduction
order is numpy's (pairwise summation), fixed per shape, so repeated runs of
the same graph on the same machine are bitwise identical.

Backward closures capture references to input arrays. Mutating a tensor's
``.data`` between forward and backward is undefined behaviour; optimizers
update parameters only after the backward pass of a step.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor", "Tape", "backward", "as_tensor", "zeros", "ones", "full",
    "randn", "add", "sub", "mul", "div", "neg", "pow_scalar", "exp", "log",
    "sqrt", "absolute", "relu", "silu", "sigmoid", "matmul", "conv2d",
    "upsample_nearest", "layer_norm", "softmax", "scaled_dot_attention",
    "sum_", "mean_", "reshape", "transpose", "concat", "narrow", "chunk",
]

_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """A float32 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

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
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Constant view of the same buffer; drops graph membership."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- convenience arithmetic -------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_scalar(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Execution record for one forward pass.

    Ops append ``(out, inputs, backward_fn)`` in execution order; reverse
    iteration is therefore a valid topological order and visits each record
    exactly once. A tape is single-threaded; run independent tapes for
    parallel work.
    """

    __slots__ = ("_records", "_interior")

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._interior: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"
        return False

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._records.append((out, inputs, backward_fn))
        self._interior.add(id(out))


def backward(loss: Tensor) -> None:
    """Reverse-replay the active tape, accumulating into leaf ``.grad``.

    Interior gradients live in a per-call map, so calling backward twice on
    the same tape adds one more unit of gradient to every leaf rather than
    compounding.
    """
    tape = _active_tape()
    if tape is None:
        raise RuntimeError("backward requires an active Tape")
    if loss.data.size != 1:
        raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._interior:
        raise ValueError("loss was not produced under the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        input_grads = fn(g)
        for t, ig in zip(inputs, input_grads):
            if ig is None:
                continue
            if id(t) in tape._interior:
                acc = grads.get(id(t))
                grads[id(t)] = ig if acc is None else acc + ig
            elif t.requires_grad:
                t.grad = ig.astype(np.float32, copy=True) if t.grad is None else t.grad + ig


# ---------------------------------------------------------------------------
# helpers

def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, np.float32), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, np.float32), requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, np.float32), requires_grad)


def randn(rng: np.random.Generator, shape, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    data = rng.standard_normal(shape, dtype=np.float32)
    if std != 1.0:
        data = data * np.float32(std)
    return Tensor(data, requires_grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _maybe_record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._record(out, inputs, backward_fn)


def _binary_setup(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return a, b, a.requires_grad or b.requires_grad


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b, rg = _binary_setup(a, b)
    out = Tensor(a.data + b.data, rg)
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b, rg = _binary_setup(a, b)
    out = Tensor(a.data - b.data, rg)
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b, rg = _binary_setup(a, b)
    out = Tensor(a.data * b.data, rg)
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))
    return out


def div(a, b) -> Tensor:
    a, b, rg = _binary_setup(a, b)
    out = Tensor(a.data / b.data, rg)
    _maybe_record(out, (a, b), lambda g: (_unbroadcast(g / b.data, a.shape),
                                          _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data, a.requires_grad)
    _maybe_record(out, (a,), lambda g: (-g,))
    return out


def pow_scalar(a, p) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = Tensor(a.data ** np.float32(p), a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * np.float32(p) * a.data ** np.float32(p - 1.0),))
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor(y, a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * y,))
    return out


def log(a) -> Tensor:
    """Natural log; caller guarantees strictly positive input."""
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g / a.data,))
    return out


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    out = Tensor(y, a.requires_grad)
    # 1e-12 floor keeps the zero-variance corner finite; elsewhere it is
    # far below f32 resolution of the true 0.5/sqrt(x).
    _maybe_record(out, (a,), lambda g: (g * (np.float32(0.5) / np.maximum(y, np.float32(1e-12))),))
    return out


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * np.sign(a.data),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, np.float32(0)), a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * (a.data > 0),))
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    out = Tensor(s, a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * s * (1.0 - s),))
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x); smooth gate used throughout the model stacks."""
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    out = Tensor(a.data * s, a.requires_grad)
    _maybe_record(out, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),))
    return out


# ---------------------------------------------------------------------------
# contractions

def matmul(a, b) -> Tensor:
    """a @ b for 2-D or stacked 3-D operands (leading dims broadcast)."""
    a, b, rg = _binary_setup(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner-dim mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data, rg)

    def bwd(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    _maybe_record(out, (a, b), bwd)
    return out


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else (int(v[0]), int(v[1]))


def conv2d(x, kernels, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation via im2col.

    x: (C, H, W) or (N, C, H, W); kernels: (O, C, kh, kw). Zero padding.
    Output extent per axis is (h + 2*pad - kh) // stride + 1 and must be
    positive.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise ValueError(f"conv2d expects (N,C,H,W)/(C,H,W) input and (O,C,kh,kw) kernels, "
                         f"got {x.shape} and {kernels.shape}")
    xd = x.data if batched else x.data[None]
    n, c, h, w = xd.shape
    o, ck, kh, kw = kernels.shape
    if ck != c:
        raise ValueError(f"conv2d channel mismatch: input has {c}, kernels expect {ck}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    hp, wp = h + 2 * ph, w + 2 * pw
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d kernel {kh}x{kw} exceeds padded input {hp}x{wp}")
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d non-positive output extent {ho}x{wo}")

    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else xd
    cols = np.empty((c, kh, kw, n, ho, wo), np.float32)
    for a_ in range(kh):
        ah = a_ + sh * (ho - 1) + 1
        for b_ in range(kw):
            bw_ = b_ + sw * (wo - 1) + 1
            cols[:, a_, b_] = xp[:, :, a_:ah:sh, b_:bw_:sw].transpose(1, 0, 2, 3)
    mat = cols.reshape(c * kh * kw, n * ho * wo)
    km = kernels.data.reshape(o, c * kh * kw)
    y = (km @ mat).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = Tensor(y if batched else y[0], x.requires_grad or kernels.requires_grad)

    def bwd(g):
        gd = g if batched else g[None]
        gm = gd.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gk = (gm @ mat.T).reshape(kernels.shape)
        dmat = km.T @ gm
        dcols = dmat.reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((n, c, hp, wp), np.float32)
        for a_ in range(kh):
            ah = a_ + sh * (ho - 1) + 1
            for b_ in range(kw):
                bw_ = b_ + sw * (wo - 1) + 1
                dxp[:, :, a_:ah:sh, b_:bw_:sw] += dcols[:, a_, b_].transpose(1, 0, 2, 3)
        dx = dxp[:, :, ph:ph + h, pw:pw + w]
        return (dx if batched else dx[0]), gk

    _maybe_record(out, (x, kernels), bwd)
    return out


def upsample_nearest(x, factor: int) -> Tensor:
    """Integer nearest-neighbour upsampling of the two trailing axes."""
    x = as_tensor(x)
    f = int(factor)
    if f < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    y = x.data.repeat(f, axis=-2).repeat(f, axis=-1)
    out = Tensor(y, x.requires_grad)

    def bwd(g):
        lead = g.shape[:-2]
        h, w = x.shape[-2], x.shape[-1]
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    _maybe_record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# normalization / attention

def layer_norm(x, gain: "Tensor | None" = None, bias: "Tensor | None" = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (population),
    then apply the optional elementwise affine."""
    x = as_tensor(x)
    if x.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.float32(eps))
    xh = xc * inv
    y = xh
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    rg = x.requires_grad or (gain is not None and gain.requires_grad) \
        or (bias is not None and bias.requires_grad)
    out = Tensor(y, rg)
    inputs = (x,) + ((gain,) if gain is not None else ()) + ((bias,) if bias is not None else ())

    def bwd(g):
        gxh = g * gain.data if gain is not None else g
        m1 = gxh.mean(axis=-1, keepdims=True)
        m2 = (gxh * xh).mean(axis=-1, keepdims=True)
        dx = inv * (gxh - m1 - xh * m2)
        grads = [dx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xh).sum(axis=lead) if lead else g * xh)
        if bias is not None:
            grads.append(g.sum(axis=lead) if lead else g)
        return tuple(grads)

    _maybe_record(out, inputs, bwd)
    return out


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p, x.requires_grad)
    _maybe_record(out, (x,), lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))
    return out


def scaled_dot_attention(q, k, v) -> Tensor:
    """softmax(q k^T / sqrt(d)) v over the two trailing axes."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"attention head-dim mismatch: q {q.shape} vs k {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention key/value row mismatch: k {k.shape} vs v {v.shape}")
    d = q.shape[-1]
    scores = mul(matmul(q, transpose(k, _swap_last_axes(k.ndim))), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last_axes(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# reductions / movement

def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims), x.requires_grad)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(np.float32, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.shape).astype(np.float32, copy=False),)

    _maybe_record(out, (x,), bwd)
    return out


def mean_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims), x.requires_grad)
    count = x.data.size if axis is None else x.data.shape[axis]

    def bwd(g):
        scale = np.float32(1.0 / count)
        if axis is None:
            return (np.broadcast_to(g * scale, x.shape).astype(np.float32, copy=False),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg * scale, x.shape).astype(np.float32, copy=False),)

    _maybe_record(out, (x,), bwd)
    return out


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    _maybe_record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(x.data.transpose(axes), x.requires_grad)
    _maybe_record(out, (x,), lambda g: (g.transpose(inverse),))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    _maybe_record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    x = as_tensor(x)
    if not (0 <= start and start + length <= x.shape[axis]):
        raise ValueError(f"narrow [{start}:{start + length}) out of range for axis {axis} "
                         f"of shape {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(x.data[idx], x.requires_grad)

    def bwd(g):
        full_g = np.zeros(x.shape, np.float32)
        full_g[idx] = g
        return (full_g,)

    _maybe_record(out, (x,), bwd)
    return out


def chunk(x, n: int, axis: int = -1) -> list[Tensor]:
    x = as_tensor(x)
    ax = axis % x.ndim
    if x.shape[ax] % n:
        raise ValueError(f"chunk: axis {axis} of shape {x.shape} not divisible by {n}")
    step = x.shape[ax] // n
    return [narrow(x, ax, i * step, step) for i in range(n)]
