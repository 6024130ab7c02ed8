"""Global-local visual + text dual prompting.

Two small frozen vision transformers embed the patch under restoration
(``x_local``) and its surrounding context patches (``x_global``); trainable
MLPs project those features to the backbone's prompt width, and a frozen
embedding table stands in for a text encoder.  The assembled prompt is the
concatenation text tokens | global visual tokens | local visual tokens,
plus a pooled class-token embedding that modulates every backbone block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .degradation import resize
from .layers import (MLP, Linear, checksum, merge_heads, patchify,
                     sincos_2d, split_heads)
from .numerics import (AdamState, Tensor, adam_step, add, collect_grads,
                       concat, layer_norm, matmul, mean_, mul, narrow,
                       reshape, scaled_dot_attention, silu, sub, zero_grads)
from .numerics.tensor import Tape, backward, as_tensor

__all__ = ["Rect", "PatchContext", "DualPrompt", "VisualEncoder",
           "TextTokenTable", "PromptProjector", "Prompter", "PROMPT_MODES",
           "crop_global_context", "encode_local", "encode_global",
           "assemble_dual_prompt", "pretrain_encoder"]

PROMPT_MODES = ("dual", "text_only", "visual_only", "local_only")


@dataclass(frozen=True)
class Rect:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"degenerate rect {self}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"negative rect origin {self}")


@dataclass
class PatchContext:
    """A local pixel patch, its context neighborhood, and where it came from.

    All patches are resized copies at the visual encoders' input resolution;
    ``x_global`` may be just ``[x_local]`` when the source image cannot host
    any distinct neighbor.
    """

    x_local: np.ndarray
    x_global: list[np.ndarray] = field(default_factory=list)
    local_rect: Rect | None = None


@dataclass
class DualPrompt:
    tokens: Tensor
    pooled: Tensor
    mode: str = "dual"

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"prompt tokens must be 2-d, got {self.tokens.shape}")
        if self.pooled.ndim != 1:
            raise ValueError(f"pooled embedding must be 1-d, got {self.pooled.shape}")
        if self.mode not in PROMPT_MODES:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if not np.all(np.isfinite(self.tokens.data)) or not np.all(np.isfinite(self.pooled.data)):
            raise ValueError("non-finite prompt values")


class VisualEncoder:
    """Small pre-LN vision transformer exposing class token and hidden states.

    Frozen by default: parameters are created with requires_grad False and
    the forward pass stays differentiable w.r.t. the *input* only, which is
    what the perceptual loss needs.
    """

    def __init__(self, seed: int, dim: int = 32, *, input_res: int = 16,
                 patch: int = 4, blocks: int = 2, heads: int = 2,
                 trainable: bool = False):
        if input_res % patch:
            raise ValueError(f"input resolution {input_res} not divisible by patch {patch}")
        if dim % heads or dim % 4:
            raise ValueError(f"encoder dim {dim} must divide heads {heads} and 4")
        rng = np.random.default_rng([seed, 0x5EE])
        std = 1.0 / np.sqrt(dim)
        t = trainable
        self.dim, self.input_res, self.patch, self.heads = dim, input_res, patch, heads
        self.patch_proj = Linear(rng, 3 * patch * patch, dim, std=std, trainable=t)
        self.cls = Tensor(rng.standard_normal(dim, dtype=np.float32) * np.float32(std),
                          requires_grad=t)
        self.blocks = []
        for _ in range(blocks):
            self.blocks.append({
                "ln1_g": Tensor(np.ones(dim, np.float32), requires_grad=t),
                "ln1_b": Tensor(np.zeros(dim, np.float32), requires_grad=t),
                "qkv": Linear(rng, dim, 3 * dim, std=std, trainable=t),
                "out": Linear(rng, dim, dim, std=std, trainable=t),
                "ln2_g": Tensor(np.ones(dim, np.float32), requires_grad=t),
                "ln2_b": Tensor(np.zeros(dim, np.float32), requires_grad=t),
                "fc1": Linear(rng, dim, 2 * dim, std=std, trainable=t),
                "fc2": Linear(rng, 2 * dim, dim, std=std, trainable=t),
            })
        self.ln_f_g = Tensor(np.ones(dim, np.float32), requires_grad=t)
        self.ln_f_b = Tensor(np.zeros(dim, np.float32), requires_grad=t)

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.patch_proj.w": self.patch_proj.w,
               f"{prefix}.patch_proj.b": self.patch_proj.b,
               f"{prefix}.cls": self.cls,
               f"{prefix}.ln_f.g": self.ln_f_g, f"{prefix}.ln_f.b": self.ln_f_b}
        for i, blk in enumerate(self.blocks):
            for key, val in blk.items():
                if isinstance(val, Linear):
                    out.update(val.params(f"{prefix}.blk{i}.{key}"))
                else:
                    out[f"{prefix}.blk{i}.{key}"] = val
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.params("e").values():
            p.requires_grad = flag

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        """(3, H, W) pixels -> (class token (dim,), hidden states (L, dim))."""
        x = as_tensor(x)
        if x.ndim != 3 or x.shape[0] != 3:
            raise ValueError(f"expected a (3, H, W) image, got shape {x.shape}")
        _, h, w = x.shape
        if h % self.patch or w % self.patch:
            raise ValueError(f"extents {(h, w)} not divisible by patch {self.patch}")
        gh, gw = h // self.patch, w // self.patch
        tok = self.patch_proj(patchify(x, self.patch))
        tok = add(tok, Tensor(sincos_2d(gh, gw, self.dim)))
        seq = concat([reshape(self.cls, (1, self.dim)), tok], axis=0)
        for blk in self.blocks:
            hn = layer_norm(seq, gain=blk["ln1_g"], bias=blk["ln1_b"])
            qkv = blk["qkv"](hn)
            q = narrow(qkv, 1, 0, self.dim)
            k = narrow(qkv, 1, self.dim, self.dim)
            v = narrow(qkv, 1, 2 * self.dim, self.dim)
            att = scaled_dot_attention(split_heads(q, self.heads),
                                       split_heads(k, self.heads),
                                       split_heads(v, self.heads))
            seq = add(seq, blk["out"](merge_heads(att)))
            hn = layer_norm(seq, gain=blk["ln2_g"], bias=blk["ln2_b"])
            seq = add(seq, blk["fc2"](silu(blk["fc1"](hn))))
        seq = layer_norm(seq, gain=self.ln_f_g, bias=self.ln_f_b)
        cls = reshape(narrow(seq, 0, 0, 1), (self.dim,))
        hidden = narrow(seq, 0, 1, gh * gw)
        return cls, hidden

    def checksum(self) -> int:
        return checksum(self.params("enc"))


class TextTokenTable:
    """Frozen caption-token embedding table.

    Lowercased words (punctuation stripped) map to fixed random rows; words
    outside the vocabulary share an <unk> row.  Same caption, same tokens.
    """

    def __init__(self, vocab, dim: int, *, seed: int = 0, max_tokens: int = 8):
        self.dim = dim
        self.max_tokens = max_tokens
        words = sorted(set(w.lower() for w in vocab))
        self.index = {w: i + 1 for i, w in enumerate(words)}
        rng = np.random.default_rng([seed, 0x7E87])
        rows = rng.standard_normal((len(words) + 1, dim), dtype=np.float32)
        self.rows = rows * np.float32(1.0 / np.sqrt(dim))

    def tokenize(self, caption: str) -> list[int]:
        cleaned = caption.lower()
        for ch in ".,!?;:\"'()":
            cleaned = cleaned.replace(ch, " ")
        return [self.index.get(w, 0) for w in cleaned.split()[: self.max_tokens]]

    def encode(self, caption: str) -> Tensor:
        """Caption -> (L, dim) frozen embeddings; L may be 0."""
        ids = self.tokenize(caption)
        return Tensor(self.rows[ids] if ids else np.zeros((0, self.dim), np.float32))

    def mean_embedding(self, caption: str) -> Tensor:
        ids = self.tokenize(caption)
        if not ids:
            return Tensor(np.zeros(self.dim, np.float32))
        return Tensor(self.rows[ids].mean(axis=0).astype(np.float32))

    def checksum(self) -> int:
        import zlib
        return zlib.crc32(self.rows.tobytes())


class PromptProjector:
    """Trainable projections from encoder widths to the prompt widths."""

    def __init__(self, seed: int, enc1_dim: int, enc2_dim: int, prompt_dim: int,
                 pooled_dim: int, *, hidden: int = 64):
        rng = np.random.default_rng([seed, 0x980])
        self.prompt_dim = prompt_dim
        self.pooled_dim = pooled_dim
        self.token_mlp = MLP(rng, enc1_dim, hidden, prompt_dim)
        self.pooled_mlp = MLP(rng, enc1_dim + enc2_dim, hidden, pooled_dim)
        self.text_pool = Linear(rng, prompt_dim, pooled_dim)

    def params(self, prefix: str = "prompt") -> dict[str, Tensor]:
        return {**self.token_mlp.params(f"{prefix}.token_mlp"),
                **self.pooled_mlp.params(f"{prefix}.pooled_mlp"),
                **self.text_pool.params(f"{prefix}.text_pool")}


def _clamp(v: int, lo: int, hi: int) -> int:
    return max(lo, min(v, hi))


def _resized(crop: np.ndarray, res: int) -> np.ndarray:
    if crop.shape[1:] == (res, res):
        return crop.astype(np.float32, copy=True)
    return resize(crop.astype(np.float32), res, res, "bilinear")


def crop_global_context(image: np.ndarray, local_rect: Rect, grid: int = 3,
                        encoder_res: int = 16) -> PatchContext:
    """Cut the grid x grid neighborhood of equally sized patches around a rect.

    Out-of-range neighbors are clamped to the border (duplicates allowed);
    when no clamped neighbor is distinct from the local rect, the context
    degenerates to ``[x_local]``.
    """
    if grid < 1 or grid % 2 == 0:
        raise ValueError(f"grid must be odd and positive, got {grid}")
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    rect = local_rect
    if rect.top + rect.height > h or rect.left + rect.width > w:
        raise ValueError(f"rect {rect} outside image extents {(h, w)}")
    reach = grid // 2
    rects = []
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            top = _clamp(rect.top + dy * rect.height, 0, h - rect.height)
            left = _clamp(rect.left + dx * rect.width, 0, w - rect.width)
            rects.append((top, left))
    local = image[:, rect.top:rect.top + rect.height, rect.left:rect.left + rect.width]
    x_local = _resized(local, encoder_res)
    if all(r == (rect.top, rect.left) for r in rects):
        return PatchContext(x_local, [x_local.copy()], rect)
    x_global = []
    for top, left in rects:
        crop = image[:, top:top + rect.height, left:left + rect.width]
        x_global.append(_resized(crop, encoder_res))
    return PatchContext(x_local, x_global, rect)


def encode_local(enc1: VisualEncoder, enc2: VisualEncoder, projector: PromptProjector,
                 x_local) -> tuple[Tensor, Tensor]:
    """Local patch -> (pooled embedding, local visual prompt tokens)."""
    x = as_tensor(x_local)
    expect = (3, enc1.input_res, enc1.input_res)
    if x.shape != expect:
        raise ValueError(f"local patch shape {x.shape} != encoder resolution {expect}")
    cls1, hidden1 = enc1(x)
    cls2, _ = enc2(x)
    c_pool = projector.pooled_mlp(concat([cls1, cls2], axis=0))
    c_vis_local = projector.token_mlp(hidden1)
    return c_pool, c_vis_local


def encode_global(enc1: VisualEncoder, projector: PromptProjector,
                  x_global: list) -> Tensor:
    """Context patches -> concatenated prompt tokens in list order."""
    if not x_global:
        raise ValueError("empty global context list")
    parts = []
    for patch in x_global:
        x = as_tensor(patch)
        expect = (3, enc1.input_res, enc1.input_res)
        if x.shape != expect:
            raise ValueError(f"context patch shape {x.shape} != encoder resolution {expect}")
        _, hidden = enc1(x)
        parts.append(projector.token_mlp(hidden))
    return concat(parts, axis=0) if len(parts) > 1 else parts[0]


def assemble_dual_prompt(c_pool: Tensor, c_vis_local: Tensor, c_vis_global: Tensor | None,
                         caption: str, table: TextTokenTable,
                         projector: PromptProjector, mode: str = "dual") -> DualPrompt:
    """Fixed ordering: text tokens, then global visual, then local visual."""
    if mode not in PROMPT_MODES:
        raise ValueError(f"unknown prompt mode {mode!r}")
    if table.dim != projector.prompt_dim:
        raise ValueError(f"text table dim {table.dim} != prompt dim {projector.prompt_dim}")
    text = table.encode(caption)
    if mode == "text_only":
        pooled = projector.text_pool(table.mean_embedding(caption))
        return DualPrompt(text, pooled, mode)
    for name, part in (("local", c_vis_local), ("global", c_vis_global)):
        if part is not None and part.shape[-1] != projector.prompt_dim:
            raise ValueError(f"{name} token width {part.shape[-1]} != "
                             f"prompt dim {projector.prompt_dim}")
    if mode == "local_only":
        blocks = [text, c_vis_local]
    elif mode == "visual_only":
        if c_vis_global is None:
            raise ValueError("visual_only mode requires global tokens")
        blocks = [c_vis_global, c_vis_local]
    else:
        if c_vis_global is None:
            raise ValueError("dual mode requires global tokens")
        blocks = [text, c_vis_global, c_vis_local]
    return DualPrompt(concat(blocks, axis=0), c_pool, mode)


class Prompter:
    """Bundles the frozen encoders, text table, and trainable projections."""

    def __init__(self, enc1: VisualEncoder, enc2: VisualEncoder,
                 table: TextTokenTable, projector: PromptProjector, *, grid: int = 3):
        if enc1.input_res != enc2.input_res:
            raise ValueError("visual encoders must share an input resolution")
        self.enc1, self.enc2 = enc1, enc2
        self.table, self.projector = table, projector
        self.grid = grid

    def context(self, image: np.ndarray, rect: Rect) -> PatchContext:
        return crop_global_context(image, rect, self.grid, self.enc1.input_res)

    def single_patch_context(self, patch: np.ndarray) -> PatchContext:
        x = _resized(patch, self.enc1.input_res)
        return PatchContext(x, [x.copy()], None)

    def prompt(self, ctx: PatchContext, caption: str, mode: str = "dual") -> DualPrompt:
        if mode == "text_only":
            return assemble_dual_prompt(None, None, None, caption,
                                        self.table, self.projector, mode)
        c_pool, c_local = encode_local(self.enc1, self.enc2, self.projector, ctx.x_local)
        c_global = None
        if mode in ("dual", "visual_only"):
            c_global = encode_global(self.enc1, self.projector, ctx.x_global)
        return assemble_dual_prompt(c_pool, c_local, c_global, caption,
                                    self.table, self.projector, mode)

    def trainable_params(self, prefix: str = "prompt") -> dict[str, Tensor]:
        return self.projector.params(prefix)

    def frozen_checksum(self) -> int:
        return (self.enc1.checksum() ^ (self.enc2.checksum() << 1)
                ^ (self.table.checksum() << 2)) & 0xFFFFFFFF


def pretrain_encoder(enc: VisualEncoder, images: list, steps: int, *,
                     lr: float = 1e-3, seed: int = 0) -> float:
    """Short self-supervised warmup: reconstruct raw patches from hidden states.

    Trains the encoder with a throwaway linear head, then re-freezes it.
    Returns the final reconstruction loss (0.0 when steps == 0).
    """
    if steps <= 0:
        return 0.0
    rng = np.random.default_rng([seed, 0x93E])
    head = Linear(rng, enc.dim, 3 * enc.patch * enc.patch, std=0.02)
    enc.set_trainable(True)
    params = {**enc.params("enc"), **head.params("head")}
    state = AdamState(params, lr=lr)
    res = enc.input_res
    last = 0.0
    for step in range(steps):
        img = images[int(rng.integers(len(images)))]
        _, h, w = img.shape
        top = int(rng.integers(h - res + 1))
        left = int(rng.integers(w - res + 1))
        crop = img[:, top:top + res, left:left + res].astype(np.float32)
        with Tape():
            x = Tensor(crop)
            _, hidden = enc(x)
            recon = head(hidden)
            target = Tensor(patchify(Tensor(crop), enc.patch).data)
            diff = sub(recon, target)
            loss = mean_(mul(diff, diff))
            backward(loss)
        adam_step(params, collect_grads(params), state)
        zero_grads(params)
        last = float(loss.data)
    enc.set_trainable(False)
    return last
