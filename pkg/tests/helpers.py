"""Shared test oracles.

Finite differences run the float32 library forward at float32-quantized
points but form the quotient in float64 with the effective step recovered
from the quantized endpoints; that is the only float64 math in the suite.
"""

from __future__ import annotations

import numpy as np

from dpir.numerics import Tape, Tensor, backward


def rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max absolute difference over the larger gradient magnitude."""
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def numerical_grad(forward, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``forward()`` w.r.t. every element of ``x``.

    ``forward`` must read ``x`` by reference (it is perturbed in place and
    restored). Returns a float64 array shaped like ``x``.
    """
    grad = np.zeros(x.shape, np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        xp = np.float32(float(orig) + h)
        xm = np.float32(float(orig) - h)
        flat[i] = xp
        fp = float(forward())
        flat[i] = xm
        fm = float(forward())
        flat[i] = orig
        gflat[i] = (fp - fm) / (float(xp) - float(xm))
    return grad


def check_grads(build_loss, wrt: dict[str, Tensor], h: float = 1e-3,
                tol: float = 1e-3) -> dict[str, float]:
    """Compare tape gradients of ``build_loss()`` against central differences.

    ``build_loss`` is re-invoked for every probe, so it must be a pure
    function of the tensors in ``wrt``. Returns the per-tensor relative
    errors after asserting each is below ``tol``.
    """
    for t in wrt.values():
        t.grad = None
    with Tape():
        loss = build_loss()
        backward(loss)

    errs = {}
    for name, t in wrt.items():
        assert t.grad is not None, f"no gradient reached '{name}'"
        num = numerical_grad(lambda: build_loss().data, t.data, h=h)
        errs[name] = rel_err(t.grad, num)
        assert errs[name] < tol, f"gradient mismatch for '{name}': rel err {errs[name]:.3e}"
    return errs


def conv2d_reference(x: np.ndarray, k: np.ndarray, stride: int = 1,
                     padding: int = 0) -> np.ndarray:
    """Scalar-loop cross-correlation oracle, float64, (C,H,W) x (O,C,kh,kw)."""
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * padding, w + 2 * padding), np.float64)
    xp[:, padding:padding + h, padding:padding + w] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((o, ho, wo), np.float64)
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += float(xp[ic, i * stride + a, j * stride + b]) * float(k[oc, ic, a, b])
                out[oc, i, j] = acc
    return out
