"""PSNR and SSIM on (C, H, W) or (H, W) arrays, plus CSV reporting.

Metrics are evaluation-only and computed in float64. SSIM follows the
windowed formulation: 11x11 Gaussian window (sigma 1.5), k1=0.01, k2=0.03,
population (weighted) moments, map averaged over valid positions; RGB inputs
average the per-channel scores unless luma mode is requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

__all__ = ["psnr", "ssim", "MetricReport", "evaluate_pairs"]


def _pair(a, b, fn: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{fn} shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"{fn} expects (C,H,W) or (H,W), got {a.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0, cap: float = 99.0) -> float:
    """10 log10(peak^2 / MSE) in dB; an exact match reports the cap."""
    a, b = _pair(a, b, "psnr")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float(cap)
    return float(min(10.0 * np.log10(peak * peak / mse), cap))


_WINDOW = 11
_SIGMA = 1.5


def _ssim_window() -> np.ndarray:
    x = np.arange(_WINDOW) - _WINDOW // 2
    g = np.exp(-0.5 * (x / _SIGMA) ** 2)
    return g / g.sum()


_WIN1D = _ssim_window()


def _filter_valid(img: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of (H, W) with the SSIM window."""
    h, w = img.shape
    out = np.zeros((h - _WINDOW + 1, w), np.float64)
    for i, wt in enumerate(_WIN1D):
        out += wt * img[i:i + out.shape[0], :]
    out2 = np.zeros((out.shape[0], w - _WINDOW + 1), np.float64)
    for j, wt in enumerate(_WIN1D):
        out2 += wt * out[:, j:j + out2.shape[1]]
    return out2


def _luma(img: np.ndarray) -> np.ndarray:
    if img.shape[0] == 3:
        r, g, b = img
        return (0.299 * r + 0.587 * g + 0.114 * b)[None]
    return img


def ssim(a, b, peak: float = 1.0, channel_mode: str = "rgb") -> float:
    """Mean structural similarity over valid window positions."""
    a, b = _pair(a, b, "ssim")
    if peak <= 0:
        raise ValueError(f"peak must be positive, got {peak}")
    if channel_mode == "luma":
        a, b = _luma(a), _luma(b)
    elif channel_mode != "rgb":
        raise ValueError(f"unknown channel_mode '{channel_mode}'")
    if a.shape[1] < _WINDOW or a.shape[2] < _WINDOW:
        raise ValueError(f"ssim needs extents >= {_WINDOW}, got {a.shape[1:]}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    scores = []
    for ch in range(a.shape[0]):
        x, y = a[ch], b[ch]
        mx = _filter_valid(x)
        my = _filter_valid(y)
        mxx = _filter_valid(x * x)
        myy = _filter_valid(y * y)
        mxy = _filter_valid(x * y)
        vx = mxx - mx * mx
        vy = myy - my * my
        cov = mxy - mx * my
        num = (2 * mx * my + c1) * (2 * cov + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        scores.append(np.mean(num / den))
    return float(np.mean(scores))


@dataclass
class MetricReport:
    """Per-image rows plus their arithmetic means."""

    rows: list[tuple[str, float, float]]

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def write_csv(self, path) -> None:
        """Rows as id,psnr_db,ssim with a trailing 'mean' aggregate row."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "psnr_db", "ssim"])
            for ident, p, s in self.rows:
                w.writerow([ident, f"{p:.4f}", f"{s:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])


def evaluate_pairs(pairs, peak: float = 1.0, channel_mode: str = "rgb") -> MetricReport:
    """pairs: iterable of (id, test_image, reference_image)."""
    rows = [(str(ident), psnr(x, ref, peak), ssim(x, ref, peak, channel_mode))
            for ident, x, ref in pairs]
    return MetricReport(rows)
