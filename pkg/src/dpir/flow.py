"""Rectified-flow schedule, training objective, and the Euler sampler.

The forward process is the straight-line interpolation z_t = (1-t) x0 + t eps
with t in [0, 1]; the network regresses the constant velocity eps - x0, and
sampling integrates dz = -v dt from t=1 to t=0 with uniform Euler steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, as_tensor, mean_, mul, sub

__all__ = ["FlowSchedule", "FlowState", "interpolate", "cfm_target", "cfm_loss",
           "euler_sample", "draw_time"]


@dataclass(frozen=True)
class FlowSchedule:
    """Interpolation coefficients; only the rectified (linear) path is defined."""

    kind: str = "rectified"

    def __post_init__(self):
        if self.kind != "rectified":
            raise ValueError(f"unknown flow schedule kind '{self.kind}'")

    def a(self, t: float) -> float:
        """Data coefficient: 1 at t=0, 0 at t=1."""
        return 1.0 - t

    def b(self, t: float) -> float:
        """Noise coefficient: 0 at t=0, 1 at t=1."""
        return float(t)


@dataclass
class FlowState:
    """A latent on the interpolation path together with its time."""

    z_t: Tensor
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.t}")


def _check_time(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time must lie in [0, 1], got {t}")
    return t


def interpolate(x0, eps, t: float, schedule: FlowSchedule = FlowSchedule()) -> Tensor:
    """z_t = a(t) x0 + b(t) eps with matching shapes."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    t = _check_time(t)
    if x0.shape != eps.shape:
        raise ValueError(f"interpolate shape mismatch: data {x0.shape} vs noise {eps.shape}")
    return mul(x0, schedule.a(t)) + mul(eps, schedule.b(t))


def cfm_target(x0, eps) -> Tensor:
    """Regression target eps - x0 (independent of t on the rectified path)."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"cfm_target shape mismatch: data {x0.shape} vs noise {eps.shape}")
    return sub(eps, x0)


def cfm_loss(v_pred, x0, eps) -> Tensor:
    """Mean squared error between predicted and target velocity, elementwise mean."""
    v_pred = as_tensor(v_pred)
    target = cfm_target(x0, eps)
    if v_pred.shape != target.shape:
        raise ValueError(f"cfm_loss shape mismatch: prediction {v_pred.shape} "
                         f"vs target {target.shape}")
    diff = sub(v_pred, target)
    return mean_(mul(diff, diff))


def euler_sample(velocity_fn: Callable[[Tensor, float, object], Tensor], z1: Tensor,
                 steps: int, conditioning=None) -> Tensor:
    """Integrate from t=1 to t=0 with uniform steps of 1/steps.

    ``conditioning`` is handed to ``velocity_fn`` unchanged at every step.
    A non-finite velocity aborts with the offending step index.
    """
    if steps < 1:
        raise ValueError(f"euler_sample needs steps >= 1, got {steps}")
    z = as_tensor(z1)
    dt = 1.0 / steps
    for i in range(steps):
        t = (steps - i) / steps
        v = velocity_fn(z, t, conditioning)
        if v.shape != z.shape:
            raise ValueError(f"velocity shape {v.shape} does not match state {z.shape}")
        if not np.all(np.isfinite(v.data)):
            raise RuntimeError(f"non-finite velocity at sampling step {i} (t={t:.4f})")
        z = sub(z, mul(v, dt))
    return z


def draw_time(rng: np.random.Generator, kind: str = "uniform") -> float:
    """Training-time t sampler."""
    if kind == "uniform":
        return float(rng.uniform(0.0, 1.0))
    if kind == "logit_normal":
        return float(1.0 / (1.0 + np.exp(-rng.standard_normal())))
    raise ValueError(f"unknown time-sampling kind '{kind}'")
