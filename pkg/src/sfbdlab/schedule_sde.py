"""Noise schedules, the forward transition kernel, and dataset corruption.

The forward process is the driftless SDE dx_t = g(t) dw_t whose conditional
law at time t is N(x_0, sigma_t^2 I) with g(t)^2 = d(sigma_t^2)/dt.  The one
schedule family implemented is variance-exploding with sigma_t = t, so time
and noise level coincide and g(t) = sqrt(2 t).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data_io import Dataset, rng_stream

VE_LINEAR = "variance-exploding-linear"


@dataclass(frozen=True)
class NoiseSchedule:
    """The map t -> sigma_t on [0, T].

    For the ``variance-exploding-linear`` kind, sigma_t = t exactly; that
    forces sigma_min = 0 and sigma_max = T.
    """

    kind: str = VE_LINEAR
    sigma_min: float = 0.0
    sigma_max: float = 80.0
    T: float = 80.0

    def __post_init__(self):
        if self.kind != VE_LINEAR:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.sigma_min != 0.0:
            raise ValueError("sigma_t = t requires sigma_min = 0")
        if self.sigma_max <= 0 or self.T <= 0:
            raise ValueError("sigma_max and T must be positive")
        if abs(self.sigma_max - self.T) > 1e-12 * max(1.0, self.T):
            raise ValueError("sigma_t = t requires sigma_max == T")

    def sigma_at(self, t):
        """sigma_t; strictly increasing on [0, T]."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"t outside [0, {self.T}]")
        return t if t.ndim else float(t)

    def g_squared(self, t):
        """g(t)^2 = d(sigma_t^2)/dt = 2 t."""
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > self.T * (1 + 1e-12)):
            raise ValueError(f"t outside [0, {self.T}]")
        out = 2.0 * t
        return out if out.ndim else float(out)

    def g(self, t):
        return np.sqrt(self.g_squared(t))


@dataclass(frozen=True)
class CorruptionSpec:
    """Corruption time zeta and its noise scale sigma_zeta = sigma_{zeta}."""

    zeta: float
    sigma_zeta: float

    def __post_init__(self):
        if self.zeta <= 0:
            raise ValueError("zeta must be positive")
        if self.sigma_zeta < 0:
            raise ValueError("sigma_zeta must be nonnegative")

    @classmethod
    def from_schedule(cls, schedule: NoiseSchedule, zeta: float) -> "CorruptionSpec":
        if not (0 < zeta < schedule.T):
            raise ValueError(f"zeta must lie in (0, T={schedule.T})")
        return cls(zeta=zeta, sigma_zeta=float(schedule.sigma_at(zeta)))

    def validate_against(self, schedule: NoiseSchedule) -> None:
        if not (self.zeta < schedule.T):
            raise ValueError(f"zeta={self.zeta} must be < T={schedule.T}")
        sig = float(schedule.sigma_at(self.zeta))
        if abs(self.sigma_zeta - sig) > 1e-12 * max(1.0, abs(sig)):
            raise ValueError(
                f"sigma_zeta={self.sigma_zeta} does not match schedule sigma({self.zeta})={sig}")


def forward_sample(x0: np.ndarray, schedule: NoiseSchedule, t: float, noise: np.ndarray) -> np.ndarray:
    """One draw from the forward kernel: x0 + sigma_t * noise.

    ``noise`` is a caller-supplied standard-normal draw of the same shape as
    ``x0``; keeping the randomness outside makes the map deterministic.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    return x0 + schedule.sigma_at(t) * noise


def corrupt_dataset(clean: Dataset, spec: CorruptionSpec, seed: int) -> Dataset:
    """Add N(0, sigma_zeta^2 I) noise to every point of a clean dataset.

    Per-sample noise comes from the stream (seed, "corrupt", i), so the output
    does not depend on iteration order or chunking.
    """
    if clean.tag != "clean":
        raise ValueError(f"corrupt_dataset needs a clean dataset, got tag {clean.tag!r}")
    noise = np.empty_like(clean.points)
    for i in range(clean.n):
        noise[i] = rng_stream(seed, "corrupt", i).standard_normal(clean.d)
    pts = clean.points + spec.sigma_zeta * noise
    origin = f"{clean.origin}+gauss-noise(sigma={spec.sigma_zeta:g})"
    return clean.with_points(pts, tag="noisy", origin=origin, extra_seeds=(seed,))
