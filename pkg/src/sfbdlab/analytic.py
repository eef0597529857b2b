"""Closed-form Gaussian references: posterior-mean denoisers, scores, divergences.

These are the independent oracles the numerical machinery is checked against.
Everything here is exact up to linear algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .schedule_sde import NoiseSchedule


@dataclass(frozen=True)
class GaussianSpec:
    """A d-dimensional Gaussian N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.shape[0], mean.shape[0]):
            raise ValueError(f"cov shape {cov.shape} does not match mean {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def iso(cls, mean, var: float, d: int = 1) -> "GaussianSpec":
        mean = np.broadcast_to(np.atleast_1d(np.asarray(mean, dtype=np.float64)), (d,))
        return cls(mean=mean.copy(), cov=var * np.eye(d))

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        L = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.d)) @ L.T

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x - self.mean
        sol = np.linalg.solve(self.cov, diff.T).T
        quad = np.einsum("ij,ij->i", diff, sol)
        det = np.linalg.det(self.cov)
        return np.exp(-0.5 * quad) / np.sqrt((2 * np.pi) ** self.d * det)

    def cf(self, u) -> np.ndarray:
        """Characteristic function E[exp(i u^T x)] = exp(i u^T mu - u^T S u / 2)."""
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        quad = np.einsum("ij,ij->i", u, u @ self.cov)
        return np.exp(1j * (u @ self.mean) - 0.5 * quad)

    def ppf(self, q: float) -> float:
        if self.d != 1:
            raise ValueError("ppf only available for d = 1")
        return float(norm.ppf(q, loc=self.mean[0], scale=np.sqrt(self.cov[0, 0])))

    def convolve_iso(self, sigma: float) -> "GaussianSpec":
        """The law of x + eps with eps ~ N(0, sigma^2 I)."""
        return GaussianSpec(mean=self.mean, cov=self.cov + sigma ** 2 * np.eye(self.d))


def gaussian_kl(p: GaussianSpec, q: GaussianSpec) -> float:
    """KL(p || q) between Gaussians, in nats."""
    if p.d != q.d:
        raise ValueError("dimension mismatch")
    d = p.d
    sol_cov = np.linalg.solve(q.cov, p.cov)
    diff = q.mean - p.mean
    maha = float(diff @ np.linalg.solve(q.cov, diff))
    _, logdet_q = np.linalg.slogdet(q.cov)
    _, logdet_p = np.linalg.slogdet(p.cov)
    return 0.5 * (np.trace(sol_cov) + maha - d + logdet_q - logdet_p)


def gaussian_l2_ise(p: GaussianSpec, q: GaussianSpec) -> float:
    """Integral of (p - q)^2 over R^d, via the pairwise-density identity
    int N(x; a, A) N(x; b, B) dx = N(a - b; 0, A + B)."""

    def cross(a: GaussianSpec, b: GaussianSpec) -> float:
        s = GaussianSpec(mean=a.mean - b.mean, cov=a.cov + b.cov)
        return float(s.pdf(np.zeros((1, a.d)))[0])

    return cross(p, p) + cross(q, q) - 2.0 * cross(p, q)


class GaussianDenoiser:
    """Exact posterior-mean denoiser for Gaussian data under the forward kernel.

    D(x, t) = mu + Sigma (Sigma + sigma_t^2 I)^{-1} (x - mu), the minimizer of
    the reconstruction objective, with D(x, 0) = x.
    """

    def __init__(self, spec: GaussianSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule

    def denoise(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = np.asarray(self.schedule.sigma_at(t), dtype=np.float64)
        sig = np.broadcast_to(sig, (x.shape[0],))
        out = np.empty_like(x)
        diff = x - self.spec.mean
        for s2 in np.unique(sig ** 2):
            mask = sig ** 2 == s2
            gain = np.linalg.solve(self.spec.cov + s2 * np.eye(self.spec.d), self.spec.cov).T
            out[mask] = self.spec.mean + diff[mask] @ gain.T
        return out

    def score(self, x, t) -> np.ndarray:
        """Gradient of log of the time-t marginal N(mu, Sigma + sigma_t^2 I)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = float(self.schedule.sigma_at(t))
        cov_t = self.spec.cov + sig ** 2 * np.eye(self.spec.d)
        return -np.linalg.solve(cov_t, (x - self.spec.mean).T).T


class ConstantDenoiser:
    """D(x, t) = c for every x, t > 0; D(x, 0) = x.

    The loss-optimal denoiser when the data distribution is the point mass at
    ``c`` (for t > 0; at t = 0 the identity convention is kept).
    """

    def __init__(self, c, schedule: NoiseSchedule):
        self.c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        self.schedule = schedule

    def denoise(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sig = np.broadcast_to(np.asarray(self.schedule.sigma_at(t)), (x.shape[0],))
        out = np.broadcast_to(self.c, x.shape).copy()
        out[sig == 0.0] = x[sig == 0.0]
        return out


class IdentityDenoiser:
    """D(x, t) = x; induces zero model score."""

    def __init__(self, schedule: NoiseSchedule):
        self.schedule = schedule

    def denoise(self, x, t) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=np.float64)).copy()
