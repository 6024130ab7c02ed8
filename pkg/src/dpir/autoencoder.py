"""Latent autoencoder with a degradation-robust encoder variant.

A plain (non-variational) conv autoencoder maps pixels to a small latent
grid.  The base encoder/decoder pair is pretrained on clean images; a copy
of the encoder is then fine-tuned, decoder frozen, so that decoding the
latent of a degraded image approximates the clean one.  A small patch
discriminator supplies an optional adversarial term after a warmup phase.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .layers import Conv
from .numerics import (Tensor, absolute, add, mean_, mul, neg, relu, silu,
                       sub, upsample_nearest)
from .numerics.tensor import as_tensor

__all__ = ["Encoder", "Decoder", "Autoencoder", "Discriminator",
           "AELossWeights", "perceptual_distance", "ae_finetune_loss",
           "discriminator_step", "generator_gan_term"]


def _default_widths(stages: int) -> tuple[int, ...]:
    return tuple(16 + 8 * i for i in range(stages + 1))


def _stages(factor: int) -> int:
    s = int(round(np.log2(factor)))
    if 2 ** s != factor or factor < 2:
        raise ValueError(f"downsample factor must be a power of two >= 2, got {factor}")
    return s


class Encoder:
    """Strided conv stack: (3, H, W) -> (latent_channels, H/f, W/f)."""

    def __init__(self, rng: np.random.Generator, factor: int = 4,
                 latent_channels: int = 8, widths: tuple[int, ...] | None = None):
        stages = _stages(factor)
        widths = _default_widths(stages) if widths is None else widths
        if len(widths) != stages + 1:
            raise ValueError(f"need {stages + 1} widths for factor {factor}, "
                             f"got {len(widths)}")
        self.factor = factor
        self.latent_channels = latent_channels
        self.widths = tuple(widths)
        self.stem = Conv(rng, 3, widths[0], 3)
        self.downs = [Conv(rng, widths[i], widths[i + 1], 3, stride=2)
                      for i in range(stages)]
        self.head = Conv(rng, widths[-1], latent_channels, 3)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.stem.params(f"{prefix}.stem")
        for i, c in enumerate(self.downs):
            out.update(c.params(f"{prefix}.down{i}"))
        out.update(self.head.params(f"{prefix}.head"))
        return out

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ValueError(f"pixel extents {(h, w)} not divisible by "
                             f"downsample factor {self.factor}")
        y = silu(self.stem(x))
        for c in self.downs:
            y = silu(c(y))
        return self.head(y)


class Decoder:
    """Mirror of :class:`Encoder`: nearest-upsample + conv per stage."""

    def __init__(self, rng: np.random.Generator, factor: int = 4,
                 latent_channels: int = 8, widths: tuple[int, ...] | None = None):
        stages = _stages(factor)
        widths = _default_widths(stages) if widths is None else widths
        if len(widths) != stages + 1:
            raise ValueError(f"need {stages + 1} widths for factor {factor}, "
                             f"got {len(widths)}")
        self.factor = factor
        self.latent_channels = latent_channels
        self.widths = tuple(widths)
        self.head = Conv(rng, latent_channels, widths[-1], 3)
        self.ups = [Conv(rng, widths[i + 1], widths[i], 3)
                    for i in reversed(range(stages))]
        self.stem = Conv(rng, widths[0], 3, 3)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = self.head.params(f"{prefix}.head")
        for i, c in enumerate(self.ups):
            out.update(c.params(f"{prefix}.up{i}"))
        out.update(self.stem.params(f"{prefix}.stem"))
        return out

    def __call__(self, z) -> Tensor:
        z = as_tensor(z)
        y = silu(self.head(z))
        for c in self.ups:
            y = silu(c(upsample_nearest(y, 2)))
        return self.stem(y)


class Autoencoder:
    """Base encoder + decoder pair with shape bookkeeping.

    ``clone_encoder`` spawns an independent copy of the current encoder
    (same values, fresh Tensors) to serve as the fine-tune target while the
    original stays untouched as the reference.
    """

    def __init__(self, seed: int = 0, factor: int = 4, latent_channels: int = 8,
                 widths: tuple[int, ...] | None = None):
        if latent_channels < 4:
            raise ValueError(f"latent_channels must be >= 4, got {latent_channels}")
        rng = np.random.default_rng([seed, 0xAE])
        self.factor = factor
        self.latent_channels = latent_channels
        self.encoder = Encoder(rng, factor, latent_channels, widths)
        self.decoder = Decoder(rng, factor, latent_channels, widths)

    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        if z.shape[-3] != self.latent_channels:
            raise ValueError(f"latent has {z.shape[-3]} channels, "
                             f"expected {self.latent_channels}")
        return self.decoder(z)

    def clone_encoder(self) -> Encoder:
        dup = copy.deepcopy(self.encoder)
        for p in dup.params("e").values():
            p.grad = None
        return dup

    def params(self, prefix: str = "ae") -> dict[str, Tensor]:
        return {**self.encoder.params(f"{prefix}.enc"),
                **self.decoder.params(f"{prefix}.dec")}


class Discriminator:
    """Tiny strided conv stack producing patch realness logits."""

    def __init__(self, seed: int = 0, widths: tuple[int, int] = (16, 32)):
        rng = np.random.default_rng([seed, 0xD15C])
        self.conv1 = Conv(rng, 3, widths[0], 3, stride=2)
        self.conv2 = Conv(rng, widths[0], widths[1], 3, stride=2)
        self.conv3 = Conv(rng, widths[1], 1, 3)

    def params(self, prefix: str = "disc") -> dict[str, Tensor]:
        return {**self.conv1.params(f"{prefix}.conv1"),
                **self.conv2.params(f"{prefix}.conv2"),
                **self.conv3.params(f"{prefix}.conv3")}

    def __call__(self, x) -> Tensor:
        y = silu(self.conv1(as_tensor(x)))
        y = silu(self.conv2(y))
        return self.conv3(y)


@dataclass(frozen=True)
class AELossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gan_warmup_steps: int = 500

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gan_warmup_steps < 0:
            raise ValueError("gan_warmup_steps must be non-negative")

    def effective_beta(self, step: int) -> float:
        return self.beta if step >= self.gan_warmup_steps else 0.0


def _items(x: Tensor):
    if x.ndim == 3:
        return [x]
    from .numerics import narrow, reshape
    return [reshape(narrow(x, 0, i, 1), x.shape[1:]) for i in range(x.shape[0])]


def perceptual_distance(enc1, a, b) -> Tensor:
    """Mean squared distance between enc1 hidden states of two images.

    Accepts single (3, H, W) images or batches; extents only need to divide
    the encoder patch size, not match its nominal input resolution.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    total = None
    pairs = list(zip(_items(a), _items(b)))
    for xa, xb in pairs:
        _, ha = enc1(xa)
        _, hb = enc1(xb)
        d = sub(ha, hb)
        term = mean_(mul(d, d))
        total = term if total is None else add(total, term)
    return mul(total, 1.0 / len(pairs)) if len(pairs) > 1 else total


def ae_finetune_loss(encoder: Encoder, decoder: Decoder, enc1, discriminator,
                     x_lq, x_hq, step: int, weights: AELossWeights):
    """Eq.-style fine-tune objective: L1 + alpha * perceptual + beta * adversarial.

    The adversarial term enters the graph only once ``step`` reaches the
    warmup boundary, so earlier losses are provably independent of the
    discriminator.  Returns (loss, parts) with float diagnostics.
    """
    x_lq, x_hq = as_tensor(x_lq), as_tensor(x_hq)
    if x_lq.shape != x_hq.shape:
        raise ValueError(f"paired shapes differ: {x_lq.shape} vs {x_hq.shape}")
    recon = decoder(encoder(x_lq))
    l1 = mean_(absolute(sub(recon, x_hq)))
    loss = l1
    parts = {"l1": float(l1.data)}
    if weights.alpha > 0:
        perc = perceptual_distance(enc1, recon, x_hq)
        loss = add(loss, mul(perc, weights.alpha))
        parts["perceptual"] = float(perc.data)
    beta = weights.effective_beta(step)
    if beta > 0:
        adv = generator_gan_term(discriminator, recon)
        loss = add(loss, mul(adv, beta))
        parts["adversarial"] = float(adv.data)
    parts["total"] = float(loss.data)
    return loss, parts


def generator_gan_term(discriminator, fake) -> Tensor:
    return neg(mean_(discriminator(fake)))


def discriminator_step(discriminator, real, fake) -> Tensor:
    """Hinge loss for the discriminator; gradients w.r.t. its parameters only."""
    real, fake = as_tensor(real), as_tensor(fake)
    if real.shape != fake.shape:
        raise ValueError(f"paired shapes differ: {real.shape} vs {fake.shape}")
    fake = fake.detach()
    d_real = discriminator(real)
    d_fake = discriminator(fake)
    return add(mean_(relu(sub(1.0, d_real))), mean_(relu(add(1.0, d_fake))))