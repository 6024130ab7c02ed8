"""Lightweight conditioning branch that injects degraded-input features
into the restoration backbone.

A tiny conv stack turns the degraded latent into one token per backbone
patch; the tokens are then *cross-normalized* -- whitened against their own
statistics and rescaled to the statistics measured on the backbone's
first-block output -- and added to that output.  Matching the scales this
way keeps the injected signal from drowning out (or vanishing under) the
host stream regardless of how either branch is initialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv, param_count
from .numerics import (Tensor, add, div, mean_, mul, narrow, reshape, silu,
                       sqrt, sub, transpose)

__all__ = ["AlignmentStats", "ConditionExtractor", "measure_stats",
           "cross_normalize", "inject"]


@dataclass
class AlignmentStats:
    """Mean / standard deviation targets for cross-normalization.

    Both entries are 0-d tensors (scalar granularity) or 1-d tensors of
    width ``channels`` (per-channel granularity), kept as Tensors so the
    statistics stay differentiable when measured on a live activation.
    """

    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")
        if self.mu.ndim > 1:
            raise ValueError("stats must be scalars or per-channel vectors")
        if not np.all(np.isfinite(self.mu.data)) or not np.all(np.isfinite(self.sigma.data)):
            raise ValueError("non-finite alignment statistics")
        if np.any(self.sigma.data < 0):
            raise ValueError("negative sigma in alignment statistics")


class ConditionExtractor:
    """Conv stack mapping a degraded latent to one token per backbone patch.

    Stays deliberately small: construction fails if it exceeds 5% of the
    backbone's parameter count.
    """

    def __init__(self, rng: np.random.Generator, latent_channels: int, model_dim: int,
                 patch_size: int, *, widths: tuple[int, int] = (16, 16),
                 backbone_params: int | None = None):
        if patch_size < 1:
            raise ValueError(f"patch size must be >= 1, got {patch_size}")
        w1, w2 = widths
        self.conv1 = Conv(rng, latent_channels, w1, 3, stride=1)
        self.conv2 = Conv(rng, w1, w2, 3, stride=patch_size)
        self.conv3 = Conv(rng, w2, model_dim, 3, stride=1)
        self.patch_size = patch_size
        self.model_dim = model_dim
        if backbone_params is not None:
            own = param_count(self.params())
            if own >= 0.05 * backbone_params:
                raise ValueError(
                    f"condition extractor has {own} parameters, >= 5% of the "
                    f"backbone's {backbone_params}")

    def params(self, prefix: str = "cond") -> dict[str, Tensor]:
        return {**self.conv1.params(f"{prefix}.conv1"),
                **self.conv2.params(f"{prefix}.conv2"),
                **self.conv3.params(f"{prefix}.conv3")}

    def __call__(self, z_lq: Tensor) -> Tensor:
        """(C, H, W) latent -> (H/p * W/p, model_dim) tokens, row-major."""
        if z_lq.ndim != 3:
            raise ValueError(f"expected a 3-d latent, got shape {z_lq.shape}")
        _, h, w = z_lq.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"latent extents {(h, w)} not divisible by "
                             f"patch size {self.patch_size}")
        y = silu(self.conv1(z_lq))
        y = silu(self.conv2(y))
        y = self.conv3(y)
        d, gh, gw = y.shape
        tokens = reshape(y, (d, gh * gw))
        return transpose(tokens, (1, 0))


def _item_stats(x: Tensor) -> AlignmentStats:
    mu = mean_(x)
    centered = sub(x, mu)
    var = mean_(mul(centered, centered))
    return AlignmentStats(mu=mu, sigma=sqrt(var))


def _channel_stats(x: Tensor) -> AlignmentStats:
    # reduce over every axis but the trailing channel axis
    flat = reshape(x, (x.size // x.shape[-1], x.shape[-1]))
    mu = mean_(flat, axis=0)
    centered = sub(flat, mu)
    var = mean_(mul(centered, centered), axis=0)
    return AlignmentStats(mu=mu, sigma=sqrt(var))


def measure_stats(features: Tensor, granularity: str = "item"):
    """Differentiable mean/std of a feature map.

    ``granularity`` is "item" (one scalar pair over all elements) or
    "channel" (one pair per trailing-axis channel).  A 2-d map yields a
    single :class:`AlignmentStats`; a 3-d batch yields one per item.
    """
    if granularity not in ("item", "channel"):
        raise ValueError(f"unknown granularity {granularity!r}")
    single = _item_stats if granularity == "item" else _channel_stats
    if features.ndim <= 2:
        return single(features)
    if features.ndim == 3:
        return [single(_batch_item(features, i)) for i in range(features.shape[0])]
    raise ValueError(f"expected a 2-d or 3-d feature map, got shape {features.shape}")


def _batch_item(x: Tensor, i: int) -> Tensor:
    item = narrow(x, 0, i, 1)
    return reshape(item, x.shape[1:])


def cross_normalize(cond: Tensor, stats: AlignmentStats, eps: float = 1e-6) -> Tensor:
    """Whiten ``cond`` against its own statistics, rescale to ``stats``.

    The epsilon sits only in the whitening denominator; the target sigma is
    applied as-is so a zero-variance target genuinely flattens the output.
    """
    if cond.ndim != 2:
        raise ValueError(f"expected a single 2-d feature map, got shape {cond.shape}")
    own = measure_stats(cond, "item" if stats.mu.ndim == 0 else "channel")
    white = div(sub(cond, own.mu), add(own.sigma, eps))
    return add(mul(white, stats.sigma), stats.mu)


def inject(block_out: Tensor, cond_tokens: Tensor, *, eps: float = 1e-6,
           granularity: str = "item", stats_sink: list | None = None) -> Tensor:
    """Add cross-normalized condition tokens onto a block output.

    Statistics are measured on ``block_out`` so the injected tokens land at
    the host stream's operating scale. ``stats_sink``, when given, receives
    the measured statistics so samplers can be probed per step.
    """
    if cond_tokens.shape != block_out.shape:
        raise ValueError(f"condition tokens {cond_tokens.shape} do not match "
                         f"block output {block_out.shape}")
    stats = measure_stats(block_out, granularity)
    if stats_sink is not None:
        stats_sink.append(stats)
    return add(block_out, cross_normalize(cond_tokens, stats, eps))
