"""Adam with decoupled weight decay, operating on named parameter dicts.

State lives in plain float32 numpy buffers so checkpoints can round-trip it
bitwise. Updates are applied in place to ``param.data``.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

__all__ = ["AdamState", "adam_step", "zero_grads", "collect_grads"]


class AdamState:
    """First/second moment buffers plus a step counter for one param group."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        for name, p in params.items():
            if not p.requires_grad:
                raise ValueError(f"frozen parameter '{name}' registered with an optimizer")
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update over a full parameter group.

    Every registered parameter must appear in both dicts; a non-finite
    gradient aborts the run before any parameter is touched.
    """
    if set(params) != set(state.m):
        missing = set(state.m) ^ set(params)
        raise ValueError(f"parameter group mismatch with optimizer state: {sorted(missing)}")
    for name in params:
        g = grads.get(name)
        if g is None:
            raise ValueError(f"missing gradient for parameter '{name}'")
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter '{name}'")

    state.step_count += 1
    t = state.step_count
    b1, b2 = np.float32(state.beta1), np.float32(state.beta2)
    bc1 = np.float32(1.0 - state.beta1 ** t)
    bc2 = np.float32(1.0 - state.beta2 ** t)
    lr = np.float32(state.lr)
    eps = np.float32(state.eps)
    wd = np.float32(state.weight_decay)

    for name, p in params.items():
        if not p.requires_grad:
            raise RuntimeError(f"gradient applied to frozen parameter '{name}'")
        g = grads[name].astype(np.float32, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (np.float32(1) - b1) * g
        v *= b2
        v += (np.float32(1) - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if state.weight_decay:
            update = update + wd * p.data
        p.data -= lr * update


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def collect_grads(params: dict[str, Tensor], scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gather ``.grad`` buffers (zeros where absent), optionally rescaled."""
    s = np.float32(scale)
    out = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape, np.float32)
        out[name] = g * s if scale != 1.0 else g
    return out
