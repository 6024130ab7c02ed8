"""Tiled restoration: encode the degraded input once, denoise latent tiles
with per-tile prompts and per-step feature injection, cross-fade the seams.

The LQ image is bicubic-upsampled to target resolution, encoded by the
degradation-robust encoder, and decoded once to a full pixel canvas that
supplies every tile's local and neighborhood views for prompting. Tiles
overlap by a configurable latent margin and are blended with linear ramps;
an image no larger than one tile skips the blend entirely, which keeps that
fallback byte-exact. ``DPIR_THREADS`` caps optional tile parallelism.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .checkpoint import load_checkpoint
from .config import RunConfig, parse_config
from .train import STREAM_RESTORE, ModelBundle, build_bundle
from ..backbone import dit_forward
from ..degradation import resize
from ..flow import euler_sample
from ..numerics import Tensor
from ..prompting import Rect

__all__ = ["restore", "restore_from_checkpoint", "load_bundle", "worker_count"]


def worker_count() -> int:
    raw = os.environ.get("DPIR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _tile_starts(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    starts = list(range(0, extent - tile + 1, stride))
    if starts[-1] != extent - tile:
        starts.append(extent - tile)
    return starts


def _ramp_weights(h: int, w: int, margin: int) -> np.ndarray:
    def axis(n: int) -> np.ndarray:
        i = np.arange(n, dtype=np.float32)
        return np.minimum(np.minimum(i + 1, n - i), margin + 1) / (margin + 1)
    return np.outer(axis(h), axis(w)).astype(np.float32)[None]


def load_bundle(ckpt_path: str) -> tuple[ModelBundle, RunConfig]:
    """Rebuild the full model from a checkpoint's embedded config."""
    ck = load_checkpoint(ckpt_path)
    cfg = parse_config(ck.config_text)
    bundle = build_bundle(cfg)
    prefixes = ["ae.", "dr.", "dit.", "cond.", "prompt.", "enc1.", "enc2.",
                "text."]
    if "flow.latent_mu" in ck.tensors:
        prefixes.append("flow.")
    bundle.load_tensors(ck.tensors, tuple(prefixes))
    return bundle, cfg


def restore(bundle: ModelBundle, cfg: RunConfig, lq: np.ndarray,
            caption: str = "", steps: int | None = None, seed: int = 0,
            mode: str | None = None, probe=None) -> np.ndarray:
    """LQ (3, h, w) in [0, 1] -> restored (3, scale*h, scale*w) in [0, 1].

    ``probe``, when given, is called per tile as ``probe(tile_index, stats)``
    with the per-sampler-step injection statistics of that tile.
    """
    if bundle.cfg.model.dit() != cfg.model.dit():
        raise ValueError("checkpoint/config backbone dimensions disagree")
    if lq.ndim != 3 or lq.shape[0] != 3:
        raise ValueError(f"expected a (3, h, w) image, got shape {lq.shape}")
    steps = cfg.flow.sample_steps if steps is None else int(steps)
    mode = cfg.conditioning.mode if mode is None else mode
    scale = cfg.degradation.scale
    factor = cfg.model.ae_factor
    _, h, w = lq.shape
    H, W = h * scale, w * scale
    if H % factor or W % factor:
        raise ValueError(f"target extents {(H, W)} not divisible by the "
                         f"autoencoder factor {factor}")
    gh, gw = H // factor, W // factor
    p = cfg.model.patch_size
    tile, overlap = cfg.flow.tile, cfg.flow.tile_overlap
    if gh % p or gw % p or tile % p:
        raise ValueError(f"latent geometry {(gh, gw)}/{tile} not divisible "
                         f"by patch size {p}")

    if bundle.latent_stats is None:
        raise ValueError("bundle carries no latent statistics; restore needs "
                         "a checkpoint produced by train_dpir")
    lat_mu, lat_sigma = bundle.latent_stats

    up = resize(lq.astype(np.float32), H, W, cfg.degradation.resize_mode)
    z_full = bundle.encoder_dr(Tensor(up)).data
    decoded = np.clip(bundle.ae.decode(Tensor(z_full)).data, 0.0, 1.0)
    eps = np.random.default_rng([seed, STREAM_RESTORE]).standard_normal(
        (cfg.model.latent_channels, gh, gw)).astype(np.float32)

    single = gh <= tile and gw <= tile
    if single:
        tiles = [(0, 0, gh, gw)]
    else:
        stride = tile - overlap
        tiles = [(ty, tx, tile, tile)
                 for ty in _tile_starts(gh, tile, stride)
                 for tx in _tile_starts(gw, tile, stride)]

    def run_tile(item):
        index, (ty, tx, th, tw) = item
        rect = Rect(ty * factor, tx * factor, th * factor, tw * factor)
        ctx = bundle.prompter.context(decoded, rect)
        prompt = bundle.prompter.prompt(ctx, caption, mode)
        cond = bundle.extractor(Tensor(z_full[:, ty:ty + th, tx:tx + tw]))
        sink: list = []

        def velocity(z, t, _):
            return dit_forward(bundle.dit, z, t, prompt, lq_injection=cond,
                               stats_sink=sink)

        z0 = euler_sample(velocity, Tensor(eps[:, ty:ty + th, tx:tx + tw]),
                          steps)
        lat = z0.data * lat_sigma[:, None, None] + lat_mu[:, None, None]
        pix = bundle.ae.decode(Tensor(lat.astype(np.float32))).data
        if probe is not None:
            probe(index, sink)
        return pix

    items = list(enumerate(tiles))
    workers = min(worker_count(), len(items))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_tile, items))
    else:
        results = [run_tile(it) for it in items]

    if single:
        return np.clip(results[0], 0.0, 1.0).astype(np.float32)

    out = np.zeros((3, H, W), np.float32)
    acc = np.zeros((1, H, W), np.float32)
    margin = overlap * factor
    for (ty, tx, th, tw), pix in zip(tiles, results):
        wmap = _ramp_weights(th * factor, tw * factor, margin)
        ys, xs = ty * factor, tx * factor
        out[:, ys:ys + th * factor, xs:xs + tw * factor] += pix * wmap
        acc[:, ys:ys + th * factor, xs:xs + tw * factor] += wmap
    return np.clip(out / acc, 0.0, 1.0).astype(np.float32)


def restore_from_checkpoint(ckpt_path: str, lq: np.ndarray, caption: str = "",
                            steps: int | None = None, seed: int = 0,
                            mode: str | None = None) -> np.ndarray:
    bundle, cfg = load_bundle(ckpt_path)
    return restore(bundle, cfg, lq, caption, steps=steps, seed=seed, mode=mode)
