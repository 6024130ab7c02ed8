"""Training orchestration: model assembly, AE stages, joint restorer training.

Every step draws its randomness from ``default_rng([seed, stream, step])``, so
a resumed run replays the exact sample sequence of an uninterrupted one, and
two runs with the same (config, seed) produce bitwise-identical artifacts.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import (Checkpoint, OptimSnapshot, assign_params,
                         load_checkpoint, save_checkpoint, snapshot_params)
from .config import RunConfig, serialize_config
from .data import Corpus
from ..autoencoder import (AELossWeights, Autoencoder, Discriminator, Encoder,
                           ae_finetune_loss, discriminator_step)
from ..backbone import MiniDiT, dit_forward
from ..conditioning import ConditionExtractor
from ..degradation import degrade, resize
from ..flow import cfm_loss, draw_time, interpolate
from ..layers import checksum, param_count
from ..numerics import (AdamState, Tape, Tensor, absolute, adam_step, backward,
                        collect_grads, mean_, sub, zero_grads)
from ..prompting import (PatchContext, Prompter, PromptProjector, Rect,
                         TextTokenTable, VisualEncoder, pretrain_encoder)

__all__ = ["ModelBundle", "build_bundle", "TrainResult", "train_ae",
           "train_dpir", "holdout_l1", "STREAM_AE", "STREAM_AE_FT",
           "STREAM_DPIR", "STREAM_HOLDOUT", "STREAM_RESTORE"]

STREAM_AE = 0xA1
STREAM_AE_FT = 0xA2
STREAM_DPIR = 0xD3
STREAM_HOLDOUT = 0x0D
STREAM_RESTORE = 0xE5


@dataclass
class ModelBundle:
    """Every network of one run, wired to a single RunConfig."""

    cfg: RunConfig
    ae: Autoencoder
    encoder_dr: Encoder
    dit: MiniDiT
    extractor: ConditionExtractor
    prompter: Prompter
    discriminator: Discriminator
    # per-channel latent (mean, std) the flow is trained in; set by train_dpir
    latent_stats: tuple[np.ndarray, np.ndarray] | None = None

    def ae_params(self):
        return self.ae.params("ae")

    def dr_params(self):
        return self.encoder_dr.params("dr")

    def dit_params(self):
        return self.dit.params("dit")

    def cond_params(self):
        return self.extractor.params("cond")

    def prompt_params(self):
        return self.prompter.trainable_params("prompt")

    def disc_params(self):
        return self.discriminator.params("disc")

    def frozen_params(self):
        return {**self.prompter.enc1.params("enc1"),
                **self.prompter.enc2.params("enc2")}

    def all_tensors(self) -> dict[str, np.ndarray]:
        named = {**self.ae_params(), **self.dr_params(), **self.dit_params(),
                 **self.cond_params(), **self.prompt_params(),
                 **self.disc_params(), **self.frozen_params()}
        out = snapshot_params(named)
        out["text.rows"] = self.prompter.table.rows.copy()
        if self.latent_stats is not None:
            out["flow.latent_mu"] = self.latent_stats[0].copy()
            out["flow.latent_sigma"] = self.latent_stats[1].copy()
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray],
                     prefixes: tuple[str, ...]) -> None:
        named = {**self.ae_params(), **self.dr_params(), **self.dit_params(),
                 **self.cond_params(), **self.prompt_params(),
                 **self.disc_params(), **self.frozen_params()}
        for prefix in prefixes:
            if prefix == "text.":
                rows = tensors["text.rows"]
                if rows.shape != self.prompter.table.rows.shape:
                    raise ValueError(f"text table shape {rows.shape} does not "
                                     f"match vocabulary "
                                     f"{self.prompter.table.rows.shape}")
                self.prompter.table.rows = rows.astype(np.float32).copy()
                continue
            if prefix == "flow.":
                self.latent_stats = (
                    tensors["flow.latent_mu"].astype(np.float32).copy(),
                    tensors["flow.latent_sigma"].astype(np.float32).copy())
                continue
            group = {k: v for k, v in named.items() if k.startswith(prefix)}
            if not group:
                raise ValueError(f"no parameters under prefix {prefix!r}")
            assign_params(group, tensors)


def build_bundle(cfg: RunConfig) -> ModelBundle:
    """Deterministic model assembly; all seeds derive from ``cfg.seed``."""
    cfg.validate()
    m, c = cfg.model, cfg.conditioning
    ae = Autoencoder(seed=cfg.seed, factor=m.ae_factor,
                     latent_channels=m.latent_channels,
                     widths=m.ae_widths or None)
    dit = MiniDiT(m.dit(), seed=cfg.seed + 1)
    extractor = ConditionExtractor(
        np.random.default_rng([cfg.seed + 2, 0xC0]), m.latent_channels,
        m.model_dim, m.patch_size, widths=c.extractor_widths,
        backbone_params=param_count(dit.params()))
    enc1 = VisualEncoder(cfg.seed + 3, dim=c.enc1_dim, input_res=c.encoder_res)
    enc2 = VisualEncoder(cfg.seed + 4, dim=c.enc2_dim, input_res=c.encoder_res)
    table = TextTokenTable(cfg.vocab_words(), m.prompt_dim, seed=cfg.seed + 5)
    projector = PromptProjector(cfg.seed + 6, c.enc1_dim, c.enc2_dim,
                                m.prompt_dim, m.pooled_dim)
    prompter = Prompter(enc1, enc2, table, projector, grid=c.grid)
    disc = Discriminator(seed=cfg.seed + 7)
    return ModelBundle(cfg, ae, ae.clone_encoder(), dit, extractor,
                       prompter, disc)


@dataclass
class TrainResult:
    checkpoint: str
    log: str
    metrics: dict = field(default_factory=dict)


def _set_trainable(params, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def _finite_or_abort(value: float, what: str, step: int) -> float:
    if not np.isfinite(value):
        raise RuntimeError(f"non-finite {what} at step {step}")
    return value


def holdout_l1(encoder: Encoder, ae: Autoencoder, pairs) -> float:
    """Mean L1 of decode(encoder(lq_up)) against hq over (lq_up, hq) pairs."""
    vals = []
    for up, hq in pairs:
        rec = ae.decoder(encoder(Tensor(up)))
        vals.append(float(mean_(absolute(sub(rec, Tensor(hq)))).data))
    return float(np.mean(vals))


def _holdout_pairs(cfg: RunConfig, corpus: Corpus) -> list:
    """Deterministic degraded pairs (lq upsampled to hq size, hq patch)."""
    pairs = []
    size = cfg.data.hq_patch
    for idx in range(len(corpus)):
        rng = np.random.default_rng([cfg.seed, STREAM_HOLDOUT, idx])
        img = corpus.images[idx]
        _, h, w = img.shape
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        hq = img[:, top:top + size, left:left + size]
        lq, _ = degrade(hq, cfg.degradation.recipe(int(rng.integers(2 ** 31))))
        pairs.append((resize(lq, size, size, cfg.degradation.resize_mode), hq))
    return pairs


def _split_corpus(cfg: RunConfig, corpus: Corpus) -> tuple[Corpus, Corpus]:
    k = cfg.data.holdout
    if k <= 0 or k >= len(corpus):
        return corpus, corpus
    n = len(corpus)
    return corpus.subset(range(n - k)), corpus.subset(range(n - k, n))


def _warm_encoders(cfg: RunConfig, bundle: ModelBundle, corpus: Corpus) -> None:
    steps = cfg.schedule.encoder_warmup_steps
    if steps > 0:
        pretrain_encoder(bundle.prompter.enc1, corpus.images, steps,
                         seed=cfg.seed + 8)
        pretrain_encoder(bundle.prompter.enc2, corpus.images, steps,
                         seed=cfg.seed + 9)


def train_ae(cfg: RunConfig, bundle: ModelBundle | None = None) -> TrainResult:
    """Two stages: base AE pretrain (HQ->HQ, L1), then encoder-only fine-tune.

    Stage 2 clones nothing: ``bundle.encoder_dr`` starts as a copy of the
    pretrained encoder and is the only network updated; the decoder stays
    bitwise frozen, which the returned metrics prove by checksum.
    """
    cfg.validate()
    corpus = Corpus.from_dir(cfg.paths.hq_dir)
    train_set, _ = _split_corpus(cfg, corpus)
    if bundle is None:
        bundle = build_bundle(cfg)
    _warm_encoders(cfg, bundle, train_set)
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.paths.out_dir, "ae_loss.csv")
    size = cfg.data.hq_patch
    sched, optim = cfg.schedule, cfg.optim

    rows = [("step", "stage", "l1", "perceptual", "adversarial", "total")]

    ae_params = bundle.ae_params()
    _set_trainable(ae_params, True)
    state_ae = AdamState(ae_params, lr=optim.ae_lr,
                         weight_decay=optim.weight_decay)
    for step in range(sched.ae_pretrain_steps):
        rng = np.random.default_rng([cfg.seed, STREAM_AE, step])
        patch, _, _, _, _ = train_set.sample_patch(rng, size)
        with Tape():
            rec = bundle.ae.decode(bundle.ae.encode(Tensor(patch)))
            loss = mean_(absolute(sub(rec, Tensor(patch))))
            backward(loss)
        val = _finite_or_abort(float(loss.data), "AE pretrain loss", step)
        adam_step(ae_params, collect_grads(ae_params), state_ae)
        zero_grads(ae_params)
        if step % sched.log_every == 0:
            rows.append((step, 1, f"{val:.6f}", "", "", f"{val:.6f}"))

    # stage 2 starts from the freshly pretrained encoder
    bundle.encoder_dr = bundle.ae.clone_encoder()
    dr_params = bundle.dr_params()
    pairs = _holdout_pairs(cfg, _split_corpus(cfg, corpus)[1])
    l1_base = holdout_l1(bundle.ae.encoder, bundle.ae, pairs)
    decoder_sum_before = checksum(bundle.ae.decoder.params("dec"))

    _set_trainable(ae_params, False)
    _set_trainable(dr_params, True)
    state_dr = AdamState(dr_params, lr=optim.ae_finetune_lr,
                         weight_decay=optim.weight_decay)
    disc_params = bundle.disc_params()
    state_disc = AdamState(disc_params, lr=optim.disc_lr)
    weights = AELossWeights(alpha=sched.alpha, beta=sched.beta,
                            gan_warmup_steps=sched.gan_warmup_steps)
    for step in range(sched.ae_finetune_steps):
        rng = np.random.default_rng([cfg.seed, STREAM_AE_FT, step])
        patch, _, _, _, _ = train_set.sample_patch(rng, size)
        lq, _ = degrade(patch, cfg.degradation.recipe(int(rng.integers(2 ** 31))))
        up = resize(lq, size, size, cfg.degradation.resize_mode)
        with Tape():
            loss, parts = ae_finetune_loss(
                bundle.encoder_dr, bundle.ae.decoder, bundle.prompter.enc1,
                bundle.discriminator, Tensor(up), Tensor(patch), step, weights)
            backward(loss)
        _finite_or_abort(parts["total"], "AE fine-tune loss", step)
        adam_step(dr_params, collect_grads(dr_params), state_dr)
        zero_grads(dr_params)
        if weights.effective_beta(step) > 0:
            with Tape():
                fake = bundle.ae.decoder(bundle.encoder_dr(Tensor(up)))
                d_loss = discriminator_step(bundle.discriminator,
                                            Tensor(patch), fake)
                backward(d_loss)
            _finite_or_abort(float(d_loss.data), "discriminator loss", step)
            adam_step(disc_params, collect_grads(disc_params), state_disc)
            zero_grads(disc_params)
            zero_grads(dr_params)
        if step % sched.log_every == 0:
            rows.append((step, 2, f"{parts['l1']:.6f}",
                         f"{parts.get('perceptual', 0.0):.6f}",
                         f"{parts.get('adversarial', 0.0):.6f}",
                         f"{parts['total']:.6f}"))

    decoder_sum_after = checksum(bundle.ae.decoder.params("dec"))
    if decoder_sum_after != decoder_sum_before:
        raise RuntimeError("decoder changed during encoder-only fine-tune")
    l1_dr = holdout_l1(bundle.encoder_dr, bundle.ae, pairs)
    _set_trainable(ae_params, True)

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)

    ckpt_path = os.path.join(cfg.paths.out_dir, "ae.ckpt")
    total_steps = sched.ae_pretrain_steps + sched.ae_finetune_steps
    save_checkpoint(ckpt_path, Checkpoint(
        serialize_config(cfg), total_steps, bundle.all_tensors(),
        {"ae": OptimSnapshot.from_state(state_ae),
         "dr": OptimSnapshot.from_state(state_dr),
         "disc": OptimSnapshot.from_state(state_disc)}))
    return TrainResult(ckpt_path, log_path, {
        "holdout_l1_base": l1_base, "holdout_l1_dr": l1_dr,
        "decoder_checksum_before": decoder_sum_before,
        "decoder_checksum_after": decoder_sum_after})


def build_training_context(prompter: Prompter, hq_image: np.ndarray,
                           rect: Rect, decoded_patch: np.ndarray) -> PatchContext:
    """Context whose local view is the decoded LQ patch.

    Global context comes from the clean source image around the patch; when
    the patch covers the whole image the context degenerates to the decoded
    local view alone.
    """
    local = prompter.single_patch_context(decoded_patch)
    _, h, w = hq_image.shape
    if h == rect.height and w == rect.width:
        return local
    around = prompter.context(hq_image, rect)
    return PatchContext(local.x_local, around.x_global, rect)


def _corpus_latent_stats(ae: Autoencoder,
                         corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel latent moments of the clean corpus.

    The flow is trained in latents standardized by these, so predicted
    velocities and the unit-variance noise live on the same scale; restore
    undoes the standardization before decoding.
    """
    lat = np.stack([ae.encode(Tensor(img)).data for img in corpus.images])
    mu = lat.mean(axis=(0, 2, 3)).astype(np.float32)
    sigma = np.maximum(lat.std(axis=(0, 2, 3)), 1e-3).astype(np.float32)
    return mu, sigma


def train_dpir(cfg: RunConfig, ae_ckpt: str,
               resume: str | None = None) -> TrainResult:
    """Joint restorer training: backbone, extractor, and prompt projections.

    The autoencoder pair, degradation-robust encoder, visual encoders, and
    text table all stay frozen; a changed frozen checksum aborts the run.
    """
    cfg.validate()
    corpus = Corpus.from_dir(cfg.paths.hq_dir)
    bundle = build_bundle(cfg)
    ck = load_checkpoint(ae_ckpt)
    bundle.load_tensors(ck.tensors, ("ae.", "dr.", "enc1.", "enc2.", "text."))

    size = cfg.data.hq_patch
    grid = cfg.latent_grid()
    sched, optim = cfg.schedule, cfg.optim
    os.makedirs(cfg.paths.out_dir, exist_ok=True)
    log_path = os.path.join(cfg.paths.out_dir, "dpir_loss.csv")

    groups = {"dit": (bundle.dit_params(), optim.dit_lr),
              "cond": (bundle.cond_params(), optim.extractor_lr),
              "prompt": (bundle.prompt_params(), optim.prompt_lr)}
    states = {name: AdamState(params, lr=lr,
                              weight_decay=optim.weight_decay)
              for name, (params, lr) in groups.items()}

    start_step = 0
    if resume is not None:
        rck = load_checkpoint(resume)
        bundle.load_tensors(rck.tensors,
                            ("ae.", "dr.", "dit.", "cond.", "prompt.", "flow."))
        for name, (params, _) in groups.items():
            states[name] = rck.optim[name].to_state(params)
        start_step = rck.step
    if bundle.latent_stats is None:
        bundle.latent_stats = _corpus_latent_stats(bundle.ae, corpus)
    lat_mu, lat_sigma = bundle.latent_stats

    frozen = {**bundle.ae_params(), **bundle.dr_params()}
    _set_trainable(frozen, False)
    frozen_before = (checksum(frozen), bundle.prompter.frozen_checksum())

    mode = cfg.conditioning.mode
    rows = [("step", "loss")]
    for step in range(start_step, sched.dpir_steps):
        rng = np.random.default_rng([cfg.seed, STREAM_DPIR, step])
        patch, full_img, top, left, caption = corpus.sample_patch(rng, size)
        lq, _ = degrade(patch, cfg.degradation.recipe(int(rng.integers(2 ** 31))))
        up = resize(lq, size, size, cfg.degradation.resize_mode)

        z_lq = Tensor(bundle.encoder_dr(Tensor(up)).data)
        decoded = bundle.ae.decode(z_lq).data
        ctx = build_training_context(bundle.prompter, full_img,
                                     Rect(top, left, size, size), decoded)
        x0_raw = bundle.ae.encode(Tensor(patch)).data
        x0 = Tensor(((x0_raw - lat_mu[:, None, None])
                     / lat_sigma[:, None, None]).astype(np.float32))
        eps = Tensor(rng.standard_normal(
            (cfg.model.latent_channels, grid, grid)).astype(np.float32))
        t = draw_time(rng, cfg.flow.time_sampling)

        with Tape():
            prompt = bundle.prompter.prompt(ctx, caption, mode)
            cond_tokens = bundle.extractor(z_lq)
            z_t = interpolate(x0, eps, t)
            v = dit_forward(bundle.dit, z_t, t, prompt,
                            lq_injection=cond_tokens)
            loss = cfm_loss(v, x0, eps)
            backward(loss)
        val = _finite_or_abort(float(loss.data), "training loss", step)
        for name, (params, _) in groups.items():
            adam_step(params, collect_grads(params), states[name])
        for params, _ in groups.values():
            zero_grads(params)
        if step % sched.log_every == 0:
            rows.append((step, f"{val:.6f}"))

    frozen_after = (checksum(frozen), bundle.prompter.frozen_checksum())
    if frozen_after != frozen_before:
        raise RuntimeError("frozen parameter group changed during training")
    _set_trainable(frozen, True)

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)

    ckpt_path = os.path.join(cfg.paths.out_dir, "dpir.ckpt")
    save_checkpoint(ckpt_path, Checkpoint(
        serialize_config(cfg), sched.dpir_steps, bundle.all_tensors(),
        {name: OptimSnapshot.from_state(states[name]) for name in states}))
    losses = [float(r[1]) for r in rows[1:]]
    return TrainResult(ckpt_path, log_path, {
        "first_losses": losses[:50], "last_losses": losses[-50:],
        "frozen_checksum": frozen_after})
