"""Training objectives: the reconstruction (denoising) loss and the
consistency loss, with Monte-Carlo noise-level sampling and parameter
gradients.

The default weighting w(t) = 1/sigma_t^2 together with the residual denoiser
parameterization makes the per-noise-level gradient magnitude uniform; the
unit weighting exists for diagnostics that compare raw gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data_io import Dataset, rng_stream
from .sampler import T_FLOOR, SolverConfig, solve_backward

LOG_UNIFORM = "log-uniform"
WEIGHT_INV_SIGMA2 = "inverse-sigma2"
WEIGHT_UNIT = "unit"


@dataclass(frozen=True)
class TimeSampler:
    """Noise-level sampler for the training objectives.

    log-uniform: log sigma_t of the draws is uniform on
    [log sigma_{t_min}, log sigma_{t_max}].
    """

    t_min: float = 2e-3
    t_max: float = 80.0
    kind: str = LOG_UNIFORM

    def __post_init__(self):
        if self.kind != LOG_UNIFORM:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if not (0.0 < self.t_min < self.t_max):
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.exp(rng.uniform(np.log(self.t_min), np.log(self.t_max), size=size))


@dataclass(frozen=True)
class LossValue:
    value: float
    grad: np.ndarray | None


@dataclass(frozen=True)
class ConsistencyLossValue:
    value: float
    grad: np.ndarray | None
    value_stderr: float
    mc_floor: float | None  # mean over samples of inner-draw variance / m; None for m = 1
    x_s: np.ndarray         # the chain's samples at level s, (n, d)
    inner_values: np.ndarray  # denoiser outputs at level r per draw, (m, n, d)


def _weights(t: np.ndarray, schedule, weight: str) -> np.ndarray:
    if weight == WEIGHT_UNIT:
        return np.ones_like(t)
    if weight == WEIGHT_INV_SIGMA2:
        sig = np.asarray(schedule.sigma_at(t))
        return 1.0 / sig ** 2
    raise ValueError(f"unknown weight {weight!r}")


def denoising_loss_pairs(net, x0: np.ndarray, x_t: np.ndarray, t, *,
                         weight: str = WEIGHT_INV_SIGMA2) -> LossValue:
    """Weighted mean squared reconstruction error on explicit (x0, x_t, t)
    triples: mean_i w(t_i) ||D(x_t_i, t_i) - x0_i||^2."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x0.shape != x_t.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs x_t {x_t.shape}")
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    w = _weights(t, net.schedule, weight)
    if hasattr(net, "denoise_vjp"):
        d_val, vjp = net.denoise_vjp(x_t, t)
    else:
        d_val, vjp = net.denoise(x_t, t), None
    resid = d_val - x0
    value = float(np.mean(w * np.sum(resid * resid, axis=1)))
    grad = vjp((2.0 / n) * w[:, None] * resid) if vjp is not None else None
    return LossValue(value=value, grad=grad)


def denoising_loss(net, batch: Dataset, sampler: TimeSampler, seed: int, *,
                   fixed_t: float | None = None,
                   weight: str = WEIGHT_INV_SIGMA2) -> LossValue:
    """Monte-Carlo reconstruction objective over a clean or denoised batch.

    Draws one (t, noise) pair per batch point from the stream
    (seed, "denoising-loss"); ``fixed_t`` pins every draw to one level.
    """
    if batch.tag not in ("clean", "denoised"):
        raise ValueError(f"denoising_loss needs a clean or denoised batch, got {batch.tag!r}")
    if batch.n == 0:
        raise ValueError("empty batch")
    rng = rng_stream(seed, "denoising-loss")
    if fixed_t is None:
        t = sampler.sample(rng, batch.n)
    else:
        t = np.full(batch.n, float(fixed_t))
    eps = rng.standard_normal(batch.points.shape)
    sig = np.asarray(net.schedule.sigma_at(t))
    x_t = batch.points + sig[:, None] * eps
    return denoising_loss_pairs(net, batch.points, x_t, t, weight=weight)


def consistency_loss(net, noisy: Dataset, r: float, s: float, solver_cfg: SolverConfig,
                     seed: int, *, m: int = 4, batch_size: int | None = None) -> ConsistencyLossValue:
    """Penalty for E[x0 | x_s] differing from the mean of E[x0 | x_r] over
    backward draws x_r ~ p(x_r | x_s).

    The chain: noisy points (at the solver's t_start) are integrated backward
    to level s, then m independent backward draws continue from s to r.  The
    sampled trajectories are treated as constants; gradients flow through the
    denoiser evaluations at levels s and r only.  At r = 0 the identity
    property of the denoiser makes the inner evaluations parameter-free, and
    the loss coincides with the reconstruction objective at t = s on the
    chain's own draws, up to an additive constant (the inner-draw spread).
    """
    if not (0.0 <= r < s):
        raise ValueError(f"need 0 <= r < s, got r={r}, s={s}")
    if s > net.schedule.T:
        raise ValueError(f"s={s} exceeds the schedule horizon T={net.schedule.T}")
    if s < T_FLOOR:
        raise ValueError(f"s={s} is below the integration floor {T_FLOOR}")
    if noisy.tag != "noisy":
        raise ValueError(f"consistency_loss needs a noisy dataset, got tag {noisy.tag!r}")
    tau = solver_cfg.t_start
    if tau < s * (1 - 1e-12):
        raise ValueError(f"noisy samples live at tau={tau} < s={s}")
    if m < 1:
        raise ValueError("m must be >= 1")

    rng = rng_stream(seed, "consistency-batch")
    pts = noisy.points
    if batch_size is not None and batch_size < noisy.n:
        pts = pts[rng.choice(noisy.n, size=batch_size, replace=False)]
    n, d = pts.shape
    if n == 0:
        raise ValueError("empty batch")

    seed_chain = int(rng_stream(seed, "consistency-chain").integers(2 ** 63))
    if tau > s * (1 + 1e-12):
        x_s = solve_backward(net, pts, replace(solver_cfg, t_start=tau, t_end=s), seed_chain)
    else:
        x_s = pts.copy()

    inner_cfg = replace(solver_cfg, t_start=s, t_end=r)
    inner_values = np.empty((m, n, d))
    inner_vjps = []
    for j in range(m):
        seed_j = int(rng_stream(seed, "consistency-inner", j).integers(2 ** 63))
        x_r = solve_backward(net, x_s, inner_cfg, seed_j)
        if hasattr(net, "denoise_vjp"):
            val, vjp = net.denoise_vjp(x_r, max(r, 0.0))
        else:
            val, vjp = net.denoise(x_r, max(r, 0.0)), None
        inner_values[j] = val
        inner_vjps.append(vjp)

    if hasattr(net, "denoise_vjp"):
        d_s, vjp_s = net.denoise_vjp(x_s, s)
    else:
        d_s, vjp_s = net.denoise(x_s, s), None

    inner_mean = inner_values.mean(axis=0)
    diff = d_s - inner_mean
    per_sample = np.sum(diff * diff, axis=1)
    value = float(per_sample.mean())
    stderr = float(per_sample.std(ddof=1) / np.sqrt(n)) if n > 1 else float("nan")

    grad = None
    if vjp_s is not None:
        grad = vjp_s((2.0 / n) * diff)
        cot_inner = -(2.0 / (n * m)) * diff
        for vjp in inner_vjps:
            grad = grad + vjp(cot_inner)

    mc_floor = None
    if m >= 2:
        spread = np.sum((inner_values - inner_mean) ** 2, axis=(0, 2)) / (m - 1)
        mc_floor = float(spread.mean() / m)

    return ConsistencyLossValue(value=value, grad=grad, value_stderr=stderr,
                                mc_floor=mc_floor, x_s=x_s, inner_values=inner_values)
