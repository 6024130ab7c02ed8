"""Synthetic degradation: blur -> downscale -> noise -> block compression.

Pure numpy on float32 (C, H, W) images in [0, 1]; nothing here participates
in autodiff. Every sampled parameter comes from the recipe seed, so a
(recipe, image) pair degrades identically on every run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["DegradationRecipe", "gaussian_blur", "resize", "add_gaussian_noise",
           "block_compress", "degrade", "format_record", "parse_record"]


def _check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ValueError(f"{name} must be (C, H, W), got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    return img.astype(np.float32, copy=False)


# ---------------------------------------------------------------------------
# blur

def _gauss_kernel(sigma: float, size: int | None) -> np.ndarray:
    if size is None:
        size = 2 * int(np.ceil(3.0 * sigma)) + 1
    if size % 2 == 0:
        raise ValueError(f"blur kernel size must be odd, got {size}")
    if sigma <= 0:
        k = np.zeros(size)
        k[size // 2] = 1.0
        return k
    x = np.arange(size) - size // 2
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    xp = np.pad(img, pad, mode="reflect")
    out = np.zeros(img.shape, np.float64)
    for i, w in enumerate(kernel):
        sl = [slice(None)] * img.ndim
        sl[axis] = slice(i, i + img.shape[axis])
        out += w * xp[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, sigma: float | tuple[float, float],
                  kernel_size: int | None = None) -> np.ndarray:
    """Separable Gaussian blur with reflection padding; sigma 0 is identity.

    A (sigma_y, sigma_x) pair blurs the axes independently (axis-aligned
    anisotropic kernel).
    """
    img = _check_image(img)
    sy, sx = (sigma, sigma) if np.isscalar(sigma) else (float(sigma[0]), float(sigma[1]))
    if sy < 0 or sx < 0:
        raise ValueError(f"blur sigma must be non-negative, got {(sy, sx)}")
    if sy == 0 and sx == 0 and kernel_size is None:
        return img.copy()
    out = _blur_axis(img.astype(np.float64), _gauss_kernel(sy, kernel_size), axis=1)
    out = _blur_axis(out, _gauss_kernel(sx, kernel_size), axis=2)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# resize

def _cubic_weight(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    ax = np.abs(x)
    w = np.zeros_like(ax)
    m1 = ax <= 1
    m2 = (ax > 1) & (ax < 2)
    w[m1] = (a + 2) * ax[m1] ** 3 - (a + 3) * ax[m1] ** 2 + 1
    w[m2] = a * ax[m2] ** 3 - 5 * a * ax[m2] ** 2 + 8 * a * ax[m2] - 4 * a
    return w


def _resample_matrix(in_len: int, out_len: int, mode: str) -> np.ndarray:
    """Row-stochastic (out_len, in_len) sampling matrix, half-pixel centers,
    edge-clamped taps."""
    scale = in_len / out_len
    src = (np.arange(out_len) + 0.5) * scale - 0.5
    m = np.zeros((out_len, in_len))
    rows = np.arange(out_len)
    if mode == "nearest":
        idx = np.clip(np.floor((np.arange(out_len) + 0.5) * scale).astype(int), 0, in_len - 1)
        m[rows, idx] = 1.0
        return m
    base = np.floor(src).astype(int)
    if mode == "bilinear":
        taps, offs = 2, (0, 1)
    elif mode == "bicubic":
        taps, offs = 4, (-1, 0, 1, 2)
    else:
        raise ValueError(f"unknown resize mode '{mode}'")
    frac = src - base
    for o in offs:
        if mode == "bilinear":
            w = 1.0 - np.abs(frac - o)
            w = np.clip(w, 0.0, 1.0)
        else:
            w = _cubic_weight(frac - o)
        np.add.at(m, (rows, np.clip(base + o, 0, in_len - 1)), w)
    # cubic taps clipped at borders can leave tiny normalization drift
    m /= m.sum(axis=1, keepdims=True)
    return m


def resize(img: np.ndarray, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """Resample to (out_h, out_w) with half-pixel centers."""
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"resize target must be positive, got {(out_h, out_w)}")
    my = _resample_matrix(img.shape[1], out_h, mode)
    mx = _resample_matrix(img.shape[2], out_w, mode)
    out = np.einsum("oi,cij,pj->cop", my, img.astype(np.float64), mx, optimize=True)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# noise / compression

def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    img = _check_image(img)
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    out = img + sigma * rng.standard_normal(img.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], np.float64)


def _dct_matrix() -> np.ndarray:
    n = np.arange(8)
    d = np.cos(np.pi * (2 * n[None, :] + 1) * n[:, None] / 16.0)
    d[0] *= np.sqrt(1.0 / 8.0)
    d[1:] *= np.sqrt(2.0 / 8.0)
    return d


_DCT = _dct_matrix()


def quant_table(quality: int) -> np.ndarray:
    """JPEG-style quality scaling of the base table; all ones at quality 100."""
    q = int(quality)
    if not 1 <= q <= 100:
        raise ValueError(f"compression quality must be in [1, 100], got {quality}")
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    return np.clip(np.floor((_JPEG_LUMA * scale + 50.0) / 100.0), 1.0, 255.0)


def block_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block-DCT quantization applied per channel.

    Quality 100 resolves to the all-ones table, which this implementation
    treats as the exact identity (no coefficient rounding), so the round-trip
    is lossless by contract.
    """
    img = _check_image(img)
    if int(quality) == 100:
        quant_table(100)  # still validates range
        return img.copy()
    q = quant_table(quality)
    c, h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    x = np.pad(img.astype(np.float64), ((0, 0), (0, ph), (0, pw)), mode="edge")
    x = x * 255.0 - 128.0
    nh, nw = x.shape[1] // 8, x.shape[2] // 8
    blocks = x.reshape(c, nh, 8, nw, 8).transpose(0, 1, 3, 2, 4)
    coef = np.einsum("ij,cnmjk,lk->cnmil", _DCT, blocks, _DCT, optimize=True)
    coef = np.round(coef / q) * q
    rec = np.einsum("ji,cnmjk,kl->cnmil", _DCT, coef, _DCT, optimize=True)
    rec = rec.transpose(0, 1, 3, 2, 4).reshape(c, nh * 8, nw * 8)
    rec = (rec + 128.0) / 255.0
    return np.clip(rec[:, :h, :w], 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# full chain

@dataclass
class DegradationRecipe:
    """Parameter ranges for one degradation draw; all sampling keys off seed."""

    blur_sigma: tuple[float, float] = (0.4, 1.6)
    blur_kernels: tuple[str, ...] = ("iso", "aniso")
    scale: int = 4
    resize_mode: str = "bicubic"
    noise_sigma: tuple[float, float] = (0.005, 0.04)
    quality: tuple[int, int] = (55, 95)
    second_pass: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.scale < 1:
            raise ValueError(f"scale must be >= 1, got {self.scale}")
        for name in ("blur_sigma", "noise_sigma", "quality"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is inverted: {(lo, hi)}")
        for k in self.blur_kernels:
            if k not in ("iso", "aniso"):
                raise ValueError(f"unknown blur kernel kind '{k}'")


def _sample_pass(img, rng, sigma_range, kernels, noise_range, quality_range, tag, record):
    kind = kernels[int(rng.integers(len(kernels)))]
    if kind == "iso":
        s = float(rng.uniform(*sigma_range))
        sigma = (s, s)
    else:
        sigma = (float(rng.uniform(*sigma_range)), float(rng.uniform(*sigma_range)))
    img = gaussian_blur(img, sigma)
    record[f"{tag}blur_kind"] = kind
    record[f"{tag}blur_sy"] = round(sigma[0], 6)
    record[f"{tag}blur_sx"] = round(sigma[1], 6)
    ns = float(rng.uniform(*noise_range))
    img = add_gaussian_noise(img, ns, rng)
    record[f"{tag}noise_sigma"] = round(ns, 6)
    q = int(rng.integers(quality_range[0], quality_range[1] + 1))
    img = block_compress(img, q)
    record[f"{tag}quality"] = q
    return img


def degrade(img: np.ndarray, recipe: DegradationRecipe) -> tuple[np.ndarray, dict]:
    """Apply the sampled chain; returns the LQ image and the sampled values.

    HQ extents must be divisible by the scale; the LQ has extents hq/scale.
    The resize sits between the first blur and the first noise stage.
    """
    img = _check_image(img, "hq image")
    c, h, w = img.shape
    if h % recipe.scale or w % recipe.scale:
        raise ValueError(f"hq extents {(h, w)} not divisible by scale {recipe.scale}")
    rng = np.random.default_rng(recipe.seed)
    record: dict = {"seed": recipe.seed, "scale": recipe.scale, "resize_mode": recipe.resize_mode}

    kind = recipe.blur_kernels[int(rng.integers(len(recipe.blur_kernels)))]
    if kind == "iso":
        s = float(rng.uniform(*recipe.blur_sigma))
        sigma = (s, s)
    else:
        sigma = (float(rng.uniform(*recipe.blur_sigma)), float(rng.uniform(*recipe.blur_sigma)))
    out = gaussian_blur(img, sigma)
    record["blur_kind"] = kind
    record["blur_sy"] = round(sigma[0], 6)
    record["blur_sx"] = round(sigma[1], 6)

    out = resize(out, h // recipe.scale, w // recipe.scale, recipe.resize_mode)

    ns = float(rng.uniform(*recipe.noise_sigma))
    out = add_gaussian_noise(out, ns, rng)
    record["noise_sigma"] = round(ns, 6)

    q = int(rng.integers(recipe.quality[0], recipe.quality[1] + 1))
    out = block_compress(out, q)
    record["quality"] = q

    if recipe.second_pass:
        # lighter repeat at final resolution: halved blur/noise, upper-half quality
        lo_q = (recipe.quality[0] + recipe.quality[1]) // 2
        out = _sample_pass(out, rng,
                           (0.0, 0.5 * recipe.blur_sigma[1]), recipe.blur_kernels,
                           (0.0, 0.5 * recipe.noise_sigma[1]), (lo_q, recipe.quality[1]),
                           "p2_", record)
        record["second_pass"] = 1

    return np.clip(out, 0.0, 1.0).astype(np.float32), record


def format_record(record: dict) -> str:
    """Serialize a provenance record as 'k=v;k=v' for the dataset manifest."""
    return ";".join(f"{k}={record[k]}" for k in sorted(record))


def parse_record(text: str) -> dict:
    out = {}
    if not text:
        return out
    for item in text.split(";"):
        k, _, v = item.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out
