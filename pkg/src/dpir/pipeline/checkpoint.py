"""Binary checkpoints: named f32 tensors, optimizer state, embedded config.

Layout (all integers little-endian):

    magic "DPIRCKPT" | version u32 | global step u64
    config text (u32 length + UTF-8 bytes)
    tensor table   (u32 count, entries sorted by name)
    optimizer table (u32 count of groups, sorted by name)

A tensor entry is ``u16 name length, name, u8 ndim, u32 dims..., f32 payload``.
An optimizer group stores the Adam hyperparameters, its step counter, and the
first/second-moment buffers as two tensor payloads per parameter. Everything
is parsed fully before anything is returned, so a corrupt file never leaves
partially assigned state behind.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from ..numerics import AdamState, Tensor

__all__ = ["Checkpoint", "OptimSnapshot", "save_checkpoint", "load_checkpoint",
           "snapshot_params", "assign_params", "MAGIC", "VERSION"]

MAGIC = b"DPIRCKPT"
VERSION = 1


@dataclass
class OptimSnapshot:
    """Serializable view of one Adam parameter group."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step_count: int
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_state(cls, state: AdamState) -> "OptimSnapshot":
        return cls(state.lr, state.beta1, state.beta2, state.eps,
                   state.weight_decay, state.step_count,
                   {k: a.copy() for k, a in state.m.items()},
                   {k: a.copy() for k, a in state.v.items()})

    def to_state(self, params: dict[str, Tensor]) -> AdamState:
        if set(params) != set(self.m):
            missing = sorted(set(params) ^ set(self.m))
            raise ValueError(f"optimizer snapshot does not match parameter "
                             f"group: {missing}")
        state = AdamState(params, lr=self.lr, betas=(self.beta1, self.beta2),
                          eps=self.eps, weight_decay=self.weight_decay)
        state.step_count = self.step_count
        for k in params:
            state.m[k] = self.m[k].astype(np.float32).copy()
            state.v[k] = self.v[k].astype(np.float32).copy()
        return state


@dataclass
class Checkpoint:
    config_text: str
    step: int
    tensors: dict[str, np.ndarray]
    optim: dict[str, OptimSnapshot] = field(default_factory=dict)

    def select(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors whose name starts with ``prefix`` (partial load support)."""
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}


def snapshot_params(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def assign_params(params: dict[str, Tensor], tensors: dict[str, np.ndarray],
                  prefix: str = "") -> int:
    """Copy stored tensors into matching parameters; returns the count.

    Only parameters whose name starts with ``prefix`` are touched, and each
    must be present with the right shape.
    """
    n = 0
    for name, p in params.items():
        if not name.startswith(prefix):
            continue
        if name not in tensors:
            raise KeyError(f"checkpoint has no tensor named '{name}'")
        src = tensors[name]
        if tuple(src.shape) != tuple(p.shape):
            raise ValueError(f"tensor '{name}' shape {src.shape} does not "
                             f"match parameter shape {p.shape}")
        p.data[...] = src.astype(np.float32, copy=False)
        n += 1
    return n


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError(f"name too long: {name[:40]}...")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(a: np.ndarray) -> bytes:
    # asarray, not ascontiguousarray: the latter promotes 0-d to (1,)
    a = np.asarray(a, dtype="<f4")
    head = struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def _pack_table(table: dict[str, np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(table))]
    for name in sorted(table):
        parts.append(_pack_name(name))
        parts.append(_pack_array(table[name]))
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", ckpt.step)]
    cfg = ckpt.config_text.encode("utf-8")
    parts.append(struct.pack("<I", len(cfg)))
    parts.append(cfg)
    parts.append(_pack_table(ckpt.tensors))
    parts.append(struct.pack("<I", len(ckpt.optim)))
    for gname in sorted(ckpt.optim):
        snap = ckpt.optim[gname]
        parts.append(_pack_name(gname))
        parts.append(struct.pack("<5d", snap.lr, snap.beta1, snap.beta2,
                                 snap.eps, snap.weight_decay))
        parts.append(struct.pack("<Q", snap.step_count))
        parts.append(_pack_table(snap.m))
        parts.append(_pack_table(snap.v))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"truncated checkpoint: needed {n} bytes at "
                             f"offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def array(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        shape = self.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            key = self.name()
            out[key] = self.array()
        return out


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    cur = _Cursor(buf)
    magic = cur.take(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
    (version,) = cur.unpack("<I")
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version} "
                         f"(this build reads version {VERSION})")
    (step,) = cur.unpack("<Q")
    (cfg_len,) = cur.unpack("<I")
    config_text = cur.take(cfg_len).decode("utf-8")
    tensors = cur.table()
    (ngroups,) = cur.unpack("<I")
    optim = {}
    for _ in range(ngroups):
        gname = cur.name()
        lr, b1, b2, eps, wd = cur.unpack("<5d")
        (steps,) = cur.unpack("<Q")
        m = cur.table()
        v = cur.table()
        optim[gname] = OptimSnapshot(lr, b1, b2, eps, wd, int(steps), m, v)
    if cur.pos != len(buf):
        raise ValueError(f"checkpoint has {len(buf) - cur.pos} trailing bytes")
    return Checkpoint(config_text, int(step), tensors, optim)
