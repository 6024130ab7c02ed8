"""Small parameterized building blocks shared by the model stacks.

Each layer owns named Tensors and exposes ``params(prefix)`` so components
can be flattened into the checkpoint/optimizer naming scheme.
"""

from __future__ import annotations

import zlib

import numpy as np

from .numerics import Tensor, add, conv2d, matmul, reshape, silu, transpose

__all__ = ["Linear", "Conv", "MLP", "patchify", "unpatchify", "sincos_2d",
           "split_heads", "merge_heads", "param_count", "checksum"]


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, *,
                 bias: bool = True, std: float = 0.02, zero_init: bool = False,
                 trainable: bool = True):
        if zero_init:
            w = np.zeros((d_in, d_out), np.float32)
        else:
            w = rng.standard_normal((d_in, d_out), dtype=np.float32) * np.float32(std)
        self.w = Tensor(w, requires_grad=trainable)
        self.b = Tensor(np.zeros(d_out, np.float32), requires_grad=trainable) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        vector = x.ndim == 1
        if vector:
            x = reshape(x, (1, x.shape[0]))
        y = matmul(x, self.w)
        if self.b is not None:
            y = add(y, self.b)
        return reshape(y, (y.shape[-1],)) if vector else y

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.w": self.w}
        if self.b is not None:
            out[f"{prefix}.b"] = self.b
        return out


class Conv:
    """3x3-style conv with bias; He-scaled init."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3,
                 *, stride: int = 1, padding: int | None = None, trainable: bool = True,
                 zero_init: bool = False):
        fan_in = c_in * kernel * kernel
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel), np.float32)
        else:
            w = rng.standard_normal((c_out, c_in, kernel, kernel), dtype=np.float32)
            w *= np.float32(np.sqrt(2.0 / fan_in))
        self.w = Tensor(w, requires_grad=trainable)
        self.b = Tensor(np.zeros(c_out, np.float32), requires_grad=trainable)
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding

    def __call__(self, x: Tensor) -> Tensor:
        y = conv2d(x, self.w, stride=self.stride, padding=self.padding)
        bias_shape = (self.b.shape[0], 1, 1)
        return add(y, reshape(self.b, bias_shape))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class MLP:
    """Two linears with a silu between."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int, d_out: int, *,
                 std: float = 0.02, trainable: bool = True):
        self.fc1 = Linear(rng, d_in, hidden, std=std, trainable=trainable)
        self.fc2 = Linear(rng, hidden, d_out, std=std, trainable=trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(silu(self.fc1(x)))

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


def patchify(x: Tensor, patch: int) -> Tensor:
    """(C, H, W) -> (H/p * W/p, C p^2), patches in row-major grid order."""
    c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"extents {(h, w)} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    t = reshape(x, (c, gh, patch, gw, patch))
    t = transpose(t, (1, 3, 0, 2, 4))
    return reshape(t, (gh * gw, c * patch * patch))


def unpatchify(tokens: Tensor, channels: int, gh: int, gw: int, patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    if tokens.shape != (gh * gw, channels * patch * patch):
        raise ValueError(f"token shape {tokens.shape} does not fold into "
                         f"({channels},{gh * patch},{gw * patch}) with patch {patch}")
    t = reshape(tokens, (gh, gw, channels, patch, patch))
    t = transpose(t, (2, 0, 3, 1, 4))
    return reshape(t, (channels, gh * patch, gw * patch))


def sincos_2d(gh: int, gw: int, dim: int) -> np.ndarray:
    """Fixed 2-D sin/cos position table, (gh*gw, dim), float32."""
    if dim % 4:
        raise ValueError(f"position dim must be a multiple of 4, got {dim}")
    quarter = dim // 4
    omega = 1.0 / (10000.0 ** (np.arange(quarter) / max(quarter, 1)))
    ys, xs = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")
    parts = []
    for pos in (ys.reshape(-1), xs.reshape(-1)):
        ang = np.outer(pos, omega)
        parts.extend([np.sin(ang), np.cos(ang)])
    return np.concatenate(parts, axis=1).astype(np.float32)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(L, D) -> (heads, L, D/heads)."""
    l, d = x.shape
    t = reshape(x, (l, heads, d // heads))
    return transpose(t, (1, 0, 2))


def merge_heads(x: Tensor) -> Tensor:
    h, l, dh = x.shape
    return reshape(transpose(x, (1, 0, 2)), (l, h * dh))


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def checksum(params: dict[str, Tensor]) -> int:
    """Order-independent-by-name crc32 of all parameter bytes."""
    crc = 0
    for name in sorted(params):
        crc = zlib.crc32(params[name].data.tobytes(), crc)
    return crc
