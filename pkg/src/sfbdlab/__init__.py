"""Desk-scale lab for denoiser-based generative training on noise-corrupted
samples, plus the classical deconvolving kernel density estimator and
numerical diagnostics."""

__version__ = "0.1.0"
