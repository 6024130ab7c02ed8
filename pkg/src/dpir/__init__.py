"""Desk-scale degradation-robust image restoration.

A rectified-flow transformer over autoencoder latents, conditioned on the
degraded input through a cross-normalized feature injection branch and a
global-local visual/text prompt. Everything runs on the float32 numpy tensor
core in :mod:`dpir.numerics`; training, inference, and evaluation are exactly
reproducible from (config, seed).
"""

__version__ = "0.1.0"
