"""Miniature multimodal diffusion transformer predicting the velocity field.

Latent patches and prompt tokens run as two streams with their own
projections, attending jointly over the concatenated sequence; a timestep
plus pooled-prompt vector modulates every block (shift/scale/gate, all
zero-initialized so each block starts as the identity).  The degraded-input
condition, when given, is cross-normalized and added right after block 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conditioning import inject
from .layers import Linear, merge_heads, patchify, sincos_2d, split_heads, unpatchify
from .numerics import (Tensor, add, concat, layer_norm, mul, narrow, reshape,
                       scaled_dot_attention, silu)
from .prompting import DualPrompt

__all__ = ["MiniDiTConfig", "DiTBlock", "MiniDiT", "timestep_features",
           "dit_forward"]

FF_MULT = 4


@dataclass(frozen=True)
class MiniDiTConfig:
    latent_channels: int = 8
    patch_size: int = 2
    model_dim: int = 128
    num_blocks: int = 6
    num_heads: int = 4
    prompt_dim: int = 128
    pooled_dim: int = 48

    def __post_init__(self):
        for name in ("latent_channels", "patch_size", "model_dim", "num_blocks",
                     "num_heads", "prompt_dim", "pooled_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by "
                             f"num_heads {self.num_heads}")
        if self.model_dim % 4:
            raise ValueError(f"model_dim {self.model_dim} must be a multiple of 4 "
                             "for the 2-d position table")


def timestep_features(t: float, dim: int) -> np.ndarray:
    """Raw sinusoidal features of a timestep, (dim,) float32.

    Frequencies span 1..<1000 geometrically, so nearby timesteps stay within
    max-norm ~1e-6 per 1e-9 of t; computed in float64 before the final cast.
    """
    if dim % 2:
        raise ValueError(f"feature dim must be even, got {dim}")
    half = dim // 2
    freqs = 900.0 ** (np.arange(half, dtype=np.float64) / half)
    ang = freqs * float(t)
    return np.concatenate([np.sin(ang), np.cos(ang)]).astype(np.float32)


class DiTBlock:
    """Double-stream transformer block with zero-init modulation."""

    STREAMS = ("lat", "pr")

    def __init__(self, rng: np.random.Generator, dim: int, heads: int):
        self.dim, self.heads = dim, heads
        for s in self.STREAMS:
            setattr(self, f"{s}_qkv", Linear(rng, dim, 3 * dim))
            setattr(self, f"{s}_out", Linear(rng, dim, dim))
            setattr(self, f"{s}_ff1", Linear(rng, dim, FF_MULT * dim))
            setattr(self, f"{s}_ff2", Linear(rng, FF_MULT * dim, dim))
            setattr(self, f"{s}_mod", Linear(rng, dim, 6 * dim, zero_init=True))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for s in self.STREAMS:
            for part in ("qkv", "out", "ff1", "ff2", "mod"):
                out.update(getattr(self, f"{s}_{part}").params(f"{prefix}.{s}.{part}"))
        return out

    def _mod_chunks(self, stream: str, cvec: Tensor) -> list[Tensor]:
        m = getattr(self, f"{stream}_mod")(cvec)
        return [narrow(m, 0, i * self.dim, self.dim) for i in range(6)]

    @staticmethod
    def _modulate(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
        return add(mul(layer_norm(x), add(scale, 1.0)), shift)

    def _qkv(self, stream: str, h: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        qkv = getattr(self, f"{stream}_qkv")(h)
        return (narrow(qkv, 1, 0, self.dim),
                narrow(qkv, 1, self.dim, self.dim),
                narrow(qkv, 1, 2 * self.dim, self.dim))

    def __call__(self, x: Tensor, pt: Tensor, cvec: Tensor) -> tuple[Tensor, Tensor]:
        has_prompt = pt.shape[0] > 0
        lm = self._mod_chunks("lat", cvec)
        q, k, v = self._qkv("lat", self._modulate(x, lm[1], lm[0]))
        if has_prompt:
            pm = self._mod_chunks("pr", cvec)
            pq, pk, pv = self._qkv("pr", self._modulate(pt, pm[1], pm[0]))
            q_all = concat([q, pq], axis=0)
            k_all = concat([k, pk], axis=0)
            v_all = concat([v, pv], axis=0)
        else:
            q_all, k_all, v_all = q, k, v
        att = merge_heads(scaled_dot_attention(split_heads(q_all, self.heads),
                                               split_heads(k_all, self.heads),
                                               split_heads(v_all, self.heads)))
        n_lat = x.shape[0]
        a_lat = narrow(att, 0, 0, n_lat) if has_prompt else att
        x = add(x, mul(self.lat_out(a_lat), lm[2]))
        h2 = self._modulate(x, lm[4], lm[3])
        x = add(x, mul(self.lat_ff2(silu(self.lat_ff1(h2))), lm[5]))
        if has_prompt:
            a_pr = narrow(att, 0, n_lat, pt.shape[0])
            pt = add(pt, mul(self.pr_out(a_pr), pm[2]))
            h2 = self._modulate(pt, pm[4], pm[3])
            pt = add(pt, mul(self.pr_ff2(silu(self.pr_ff1(h2))), pm[5]))
        return x, pt


class MiniDiT:
    def __init__(self, cfg: MiniDiTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xD17])
        d, raw = cfg.model_dim, cfg.latent_channels * cfg.patch_size ** 2
        self.patch_embed = Linear(rng, raw, d)
        self.prompt_embed = Linear(rng, cfg.prompt_dim, d)
        self.pooled_proj = Linear(rng, cfg.pooled_dim, d)
        self.t_fc1 = Linear(rng, d, d)
        self.t_fc2 = Linear(rng, d, d)
        self.blocks = [DiTBlock(rng, d, cfg.num_heads) for _ in range(cfg.num_blocks)]
        self.final_mod = Linear(rng, d, 2 * d, zero_init=True)
        self.head = Linear(rng, d, raw, zero_init=True)

    def params(self, prefix: str = "dit") -> dict[str, Tensor]:
        out = {**self.patch_embed.params(f"{prefix}.patch_embed"),
               **self.prompt_embed.params(f"{prefix}.prompt_embed"),
               **self.pooled_proj.params(f"{prefix}.pooled_proj"),
               **self.t_fc1.params(f"{prefix}.t_fc1"),
               **self.t_fc2.params(f"{prefix}.t_fc2"),
               **self.final_mod.params(f"{prefix}.final_mod"),
               **self.head.params(f"{prefix}.head")}
        for i, blk in enumerate(self.blocks):
            out.update(blk.params(f"{prefix}.blk{i}"))
        return out

    def __call__(self, z_t: Tensor, t: float, prompt: DualPrompt,
                 lq_injection: Tensor | None = None,
                 stats_granularity: str = "item") -> Tensor:
        return dit_forward(self, z_t, t, prompt, lq_injection, stats_granularity)


def dit_forward(model: MiniDiT, z_t: Tensor, t: float, prompt: DualPrompt,
                lq_injection: Tensor | None = None,
                stats_granularity: str = "item",
                stats_sink: list | None = None) -> Tensor:
    """Velocity prediction, same shape as ``z_t``.

    ``lq_injection`` holds the condition tokens from the degraded input; they
    are cross-normalized against the live block-0 output and added there, so
    callers pass raw extractor features, never pre-normalized ones.
    """
    cfg = model.cfg
    if z_t.ndim != 3 or z_t.shape[0] != cfg.latent_channels:
        raise ValueError(f"expected a ({cfg.latent_channels}, h, w) latent, "
                         f"got shape {z_t.shape}")
    _, h, w = z_t.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ValueError(f"latent extents {(h, w)} not divisible by patch {p}")
    if prompt.tokens.shape[1] != cfg.prompt_dim and prompt.tokens.shape[0] > 0:
        raise ValueError(f"prompt token width {prompt.tokens.shape[1]} != "
                         f"prompt_dim {cfg.prompt_dim}")
    if prompt.pooled.shape != (cfg.pooled_dim,):
        raise ValueError(f"pooled width {prompt.pooled.shape} != ({cfg.pooled_dim},)")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestep {t} outside [0, 1]")
    gh, gw = h // p, w // p
    n_tokens = gh * gw
    if lq_injection is not None and lq_injection.shape != (n_tokens, cfg.model_dim):
        raise ValueError(f"injection shape {lq_injection.shape} != "
                         f"({n_tokens}, {cfg.model_dim})")

    x = add(model.patch_embed(patchify(z_t, p)),
            Tensor(sincos_2d(gh, gw, cfg.model_dim)))
    if prompt.tokens.shape[0] > 0:
        pt = model.prompt_embed(prompt.tokens)
    else:
        pt = Tensor(np.zeros((0, cfg.model_dim), np.float32))
    t_emb = model.t_fc2(silu(model.t_fc1(Tensor(timestep_features(t, cfg.model_dim)))))
    cvec = silu(add(t_emb, model.pooled_proj(prompt.pooled)))

    for i, blk in enumerate(model.blocks):
        x, pt = blk(x, pt, cvec)
        if i == 0 and lq_injection is not None:
            x = inject(x, lq_injection, granularity=stats_granularity,
                       stats_sink=stats_sink)

    fm = model.final_mod(cvec)
    shift = narrow(fm, 0, 0, cfg.model_dim)
    scale = narrow(fm, 0, cfg.model_dim, cfg.model_dim)
    x = add(mul(layer_norm(x), add(scale, 1.0)), shift)
    return unpatchify(model.head(x), cfg.latent_channels, gh, gw, p)
