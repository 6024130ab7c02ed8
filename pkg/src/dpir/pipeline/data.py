"""Procedural corpora, image IO, and dataset manifests.

Two deterministic toy corpora cover the training regimes:

* ``shapes16`` — sixteen 64x64 images, four shapes times four colors on
  textured gradient backgrounds, captioned "<color> <shape>".
* ``context192`` — six 192x192 images of fine periodic patterns whose color
  varies smoothly across the canvas, so a local crop only reveals its
  absolute palette through the surrounding context.

Images travel as float32 (3, H, W) arrays in [0, 1] and are stored as PNG or
binary PPM (P6, maxval 255); both formats round-trip the uint8 payload
bit-exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import DegradationConfig
from ..degradation import degrade, format_record

__all__ = ["to_uint8", "from_uint8", "save_image", "load_image",
           "build_shapes_corpus", "build_context_corpus", "Corpus",
           "ManifestRow", "build_manifest", "read_manifest", "list_images"]


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float32) / np.float32(255.0)


def _save_ppm(path, hwc: np.ndarray) -> None:
    h, w, _ = hwc.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(hwc.tobytes())


def _load_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"unsupported PPM header in {path}: {fields}")
    w, h = int(fields[1]), int(fields[2])
    raw = np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8)
    if raw.size != 3 * w * h:
        raise ValueError(f"truncated PPM payload in {path}")
    return raw.reshape(h, w, 3)


def save_image(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as PNG or PPM by extension."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    hwc = np.ascontiguousarray(to_uint8(img).transpose(1, 2, 0))
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        _save_ppm(path, hwc)
    elif ext == ".png":
        Image.fromarray(hwc, mode="RGB").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image extension {ext!r} (png/ppm)")


def load_image(path) -> np.ndarray:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ppm":
        hwc = _load_ppm(path)
    elif ext == ".png":
        with Image.open(path) as im:
            hwc = np.asarray(im.convert("RGB"), dtype=np.uint8)
    else:
        raise ValueError(f"unsupported image extension {ext!r} (png/ppm)")
    return from_uint8(hwc.transpose(2, 0, 1))


def list_images(directory) -> list[str]:
    names = [n for n in sorted(os.listdir(directory))
             if os.path.splitext(n)[1].lower() in (".png", ".ppm")]
    if not names:
        raise FileNotFoundError(f"no PNG/PPM images in {directory}")
    return names


# corpus synthesis

_COLORS = {"red": (0.85, 0.16, 0.14), "green": (0.18, 0.75, 0.22),
           "blue": (0.16, 0.30, 0.88), "yellow": (0.88, 0.82, 0.12)}


def _soft(d: np.ndarray, k: float = 70.0) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-k * d))


def _shape_mask(kind: str, size: int) -> np.ndarray:
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    cy, cx = yy - 0.5, xx - 0.5
    if kind == "circle":
        d = 0.30 - np.sqrt(cy * cy + cx * cx)
    elif kind == "square":
        d = 0.27 - np.maximum(np.abs(cy), np.abs(cx))
    elif kind == "triangle":
        d = np.minimum((yy - 0.22) * 0.58 - np.abs(cx), 0.80 - yy)
    elif kind == "cross":
        arm_v = np.minimum(0.11 - np.abs(cx), 0.33 - np.abs(cy))
        arm_h = np.minimum(0.11 - np.abs(cy), 0.33 - np.abs(cx))
        d = np.maximum(arm_v, arm_h)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return _soft(d).astype(np.float32)


def _textured_background(rng: np.random.Generator, size: int) -> np.ndarray:
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    fy, fx = rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.05 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    base = 0.32 + 0.22 * ramp + texture
    tint = rng.uniform(-0.04, 0.04, size=3)
    return np.stack([base + tint[c] for c in range(3)]).astype(np.float32)


def build_shapes_corpus(out_dir, seed: int = 0, size: int = 64) -> list[str]:
    """Sixteen captioned shape images; returns the sorted file names."""
    os.makedirs(out_dir, exist_ok=True)
    names, captions = [], {}
    for ci, color in enumerate(sorted(_COLORS)):
        for si, shape in enumerate(sorted(("circle", "square", "triangle",
                                           "cross"))):
            rng = np.random.default_rng([seed, 0xDA7A, ci * 8 + si])
            img = _textured_background(rng, size)
            mask = _shape_mask(shape, size)
            fill = np.asarray(_COLORS[color], np.float32).reshape(3, 1, 1)
            img = img * (1.0 - mask) + fill * mask
            name = f"{color}_{shape}.png"
            save_image(os.path.join(out_dir, name), np.clip(img, 0.0, 1.0))
            names.append(name)
            captions[name] = f"{color} {shape}"
    _write_captions(out_dir, names, captions)
    return sorted(names)


def _pattern(kind: str, size: int) -> np.ndarray:
    px = np.arange(size, dtype=np.float64)
    yy, xx = np.meshgrid(px, px, indexing="ij")
    # periods sit well above the autoencoder's downsample factor so the
    # patterns survive the latent bottleneck
    if kind == "stripes":
        v = np.sin(2 * np.pi * yy / 24.0)
    elif kind == "columns":
        v = np.sin(2 * np.pi * xx / 24.0)
    elif kind == "checker":
        v = np.sin(2 * np.pi * yy / 24.0) * np.sin(2 * np.pi * xx / 24.0)
    elif kind == "dots":
        v = np.cos(2 * np.pi * yy / 28.0) * np.cos(2 * np.pi * xx / 28.0)
        v = np.tanh(3.0 * v)
    elif kind == "rings":
        r = np.sqrt((yy - size / 2) ** 2 + (xx - size / 2) ** 2)
        v = np.sin(2 * np.pi * r / 26.0)
    elif kind == "diagonal":
        v = np.sin(2 * np.pi * (xx + yy) / 32.0)
    else:
        raise ValueError(f"unknown pattern kind {kind!r}")
    return (0.5 + 0.42 * v).astype(np.float32)


_CONTEXT_SPECS = (
    ("stripes", "red stripes", "red"),
    ("columns", "blue stripes", "blue"),
    ("checker", "green checker", "green"),
    ("dots", "yellow dots", "yellow"),
    ("rings", "red rings", "red"),
    ("diagonal", "blue texture", "blue"),
)


def build_context_corpus(out_dir, seed: int = 0, size: int = 192) -> list[str]:
    """Six fine-pattern images whose palette drifts across the canvas.

    The drift is the global cue: a 64x64 crop carries the pattern but not
    its absolute position, so context determines the right colors.
    """
    os.makedirs(out_dir, exist_ok=True)
    t = (np.arange(size) + 0.5) / size
    gy, gx = np.meshgrid(t, t, indexing="ij")
    names, captions = [], {}
    for idx, (kind, caption, land_color) in enumerate(_CONTEXT_SPECS):
        rng = np.random.default_rng([seed, 0xC7E7, idx])
        v = _pattern(kind, size)
        r = v * (0.35 + 0.60 * gx)
        g = v * (0.35 + 0.60 * (1.0 - gx))
        b = v * (0.30 + 0.65 * gy)
        img = np.stack([r, g, b])
        cy, cx = rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
        yy, xx = np.meshgrid(t - cy, t - cx, indexing="ij")
        disk = _soft(0.07 - np.sqrt(yy * yy + xx * xx), 120.0)
        fill = np.asarray(_COLORS[land_color], np.float32).reshape(3, 1, 1)
        img = img * (1.0 - disk) + fill * disk
        name = f"{idx}_{kind}.png"
        save_image(os.path.join(out_dir, name), np.clip(img, 0.0, 1.0))
        names.append(name)
        captions[name] = caption
    _write_captions(out_dir, names, captions)
    return sorted(names)


def _write_captions(out_dir, names: list[str], captions: dict[str, str]) -> None:
    with open(os.path.join(out_dir, "captions.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["name", "caption"])
        for name in sorted(names):
            w.writerow([name, captions[name]])


def _read_captions(directory) -> dict[str, str]:
    path = os.path.join(directory, "captions.csv")
    if not os.path.exists(path):
        return {}
    with open(path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return {name: caption for name, caption in rows[1:]}


# corpus access and manifests

class Corpus:
    """In-memory image list with captions, loaded once and reused."""

    def __init__(self, images: list[np.ndarray], captions: list[str],
                 names: list[str]):
        if not images:
            raise ValueError("empty corpus")
        if not (len(images) == len(captions) == len(names)):
            raise ValueError("corpus fields disagree in length")
        self.images = images
        self.captions = captions
        self.names = names

    @classmethod
    def from_dir(cls, hq_dir) -> "Corpus":
        names = list_images(hq_dir)
        captions = _read_captions(hq_dir)
        images = [load_image(os.path.join(hq_dir, n)) for n in names]
        return cls(images, [captions.get(n, "") for n in names], names)

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, indices) -> "Corpus":
        idx = list(indices)
        return Corpus([self.images[i] for i in idx],
                      [self.captions[i] for i in idx],
                      [self.names[i] for i in idx])

    def sample_patch(self, rng: np.random.Generator, size: int):
        """Random image and patch rect: (patch, full image, top, left, caption)."""
        idx = int(rng.integers(len(self.images)))
        img = self.images[idx]
        _, h, w = img.shape
        if h < size or w < size:
            raise ValueError(f"image {self.names[idx]} smaller than "
                             f"patch size {size}")
        top = int(rng.integers(h - size + 1))
        left = int(rng.integers(w - size + 1))
        patch = img[:, top:top + size, left:left + size]
        return patch, img, top, left, self.captions[idx]


@dataclass
class ManifestRow:
    hq: str
    lq: str
    caption: str
    recipe: str


def build_manifest(hq_dir, manifest_path, deg: DegradationConfig,
                   seed: int = 0) -> list[ManifestRow]:
    """Degrade every HQ image once and record the pairing with provenance.

    LQ images land in an ``lq`` directory next to the manifest; paths in the
    manifest are relative to the manifest's directory.
    """
    manifest_dir = os.path.dirname(os.path.abspath(manifest_path))
    lq_dir = os.path.join(manifest_dir, "lq")
    os.makedirs(lq_dir, exist_ok=True)
    captions = _read_captions(hq_dir)
    rows = []
    for idx, name in enumerate(list_images(hq_dir)):
        img = load_image(os.path.join(hq_dir, name))
        draw = int(np.random.SeedSequence([seed, 0x10, idx]).generate_state(1)[0])
        lq, record = degrade(img, deg.recipe(draw))
        save_image(os.path.join(lq_dir, name), lq)
        rows.append(ManifestRow(
            hq=os.path.relpath(os.path.join(hq_dir, name), manifest_dir),
            lq=os.path.join("lq", name),
            caption=captions.get(name, ""),
            recipe=format_record(record)))
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["hq", "lq", "caption", "recipe"])
        for r in rows:
            w.writerow([r.hq, r.lq, r.caption, r.recipe])
    return rows


def read_manifest(manifest_path) -> list[ManifestRow]:
    """Rows with hq/lq paths resolved against the manifest directory."""
    manifest_dir = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["hq", "lq", "caption", "recipe"]:
        raise ValueError(f"{manifest_path} is not a dataset manifest")
    out = []
    for hq, lq, caption, recipe in rows[1:]:
        out.append(ManifestRow(os.path.join(manifest_dir, hq),
                               os.path.join(manifest_dir, lq), caption, recipe))
    return out
