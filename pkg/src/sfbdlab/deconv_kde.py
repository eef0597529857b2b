"""The 1-D deconvolving kernel density estimator, integrated-squared-error
measurement, and the sample-size rate experiment.

The estimator is p_hat(x) = (1/(n lam)) sum_j K_lam((x - y_j)/lam) with
K_lam(u) = (1/2pi) int exp(-i t u) phi_K(t) / phi_h(t/lam) dt, where phi_K is
the kernel characteristic function (compactly supported on [-B, B], B < 1)
and phi_h(s) = exp(-sigma_zeta^2 s^2 / 2) the Gaussian error CF.  Production
evaluation goes through the algebraically identical empirical-CF form

    p_hat(x) = (1/2pi) int exp(-i s x) phi_K(lam s) ecf(s) / phi_h(s) ds,

which costs O((n + grid) * quad) instead of O(n * grid * quad); the direct
kernel-sum route is kept for cross-checking.  Deconvolving kernels are not
nonnegative; negative density values are retained (clipping is opt-in).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

POLY_CUBED = "polynomial-cubed"
LOG_RULE = "log-n"      # lam(n) = sigma_zeta / sqrt(log n)
FIXED_RULE = "fixed"

_EXP_LIMIT = 700.0  # exp overflow guard for the inverse error CF


@dataclass(frozen=True)
class DeconvKernelSpec:
    """Kernel CF shape/support, bandwidth rule, and quadrature resolution.

    ``cf_support`` must stay below 1 so the inverse error CF grows slower
    than n along the log-rule bandwidth.
    """

    cf_support: float = 0.9
    cf_shape: str = POLY_CUBED
    bandwidth_rule: str = LOG_RULE
    fixed_bandwidth: float | None = None
    quad_points: int = 4097

    def __post_init__(self):
        if not (0.0 < self.cf_support < 1.0):
            raise ValueError(f"cf_support must lie in (0, 1), got {self.cf_support}")
        if self.cf_shape != POLY_CUBED:
            raise ValueError(f"unknown cf_shape {self.cf_shape!r}")
        if self.bandwidth_rule not in (LOG_RULE, FIXED_RULE):
            raise ValueError(f"unknown bandwidth rule {self.bandwidth_rule!r}")
        if self.bandwidth_rule == FIXED_RULE and (self.fixed_bandwidth is None
                                                  or self.fixed_bandwidth <= 0):
            raise ValueError("fixed rule requires a positive fixed_bandwidth")
        if self.quad_points < 3 or self.quad_points % 2 == 0:
            raise ValueError("quad_points must be odd and >= 3 (Simpson rule)")


@dataclass(frozen=True)
class DeconvEstimate:
    grid: np.ndarray
    density: np.ndarray     # may be negative pointwise
    bandwidth: float
    n: int

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        v = np.asarray(self.density, dtype=np.float64)
        if g.ndim != 1 or g.shape != v.shape:
            raise ValueError("grid and density must be matching 1-d vectors")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "density", v)

    def clipped(self) -> "DeconvEstimate":
        """Nonnegative variant (post-processing only; off the default path)."""
        return DeconvEstimate(self.grid, np.maximum(self.density, 0.0), self.bandwidth, self.n)


def kernel_cf(t, spec: DeconvKernelSpec) -> np.ndarray:
    """phi_K(t) = (1 - (t/B)^2)^3 on [-B, B], zero outside."""
    u = np.asarray(t, dtype=np.float64) / spec.cf_support
    return np.where(np.abs(u) <= 1.0, (1.0 - np.clip(u, -1.0, 1.0) ** 2) ** 3, 0.0)


def kernel_second_moment(spec: DeconvKernelSpec) -> float:
    """mu_2 = int u^2 K(u) du = -phi_K''(0) = 6 / B^2."""
    return 6.0 / spec.cf_support ** 2


def kernel_roughness(spec: DeconvKernelSpec) -> float:
    """R(K) = int K(u)^2 du = (1/2pi) int phi_K(t)^2 dt, by Simpson."""
    t, w = _simpson_nodes(spec)
    return float(np.sum(w * kernel_cf(t, spec) ** 2) / (2.0 * np.pi))


def bandwidth(n: int, sigma_zeta: float, spec: DeconvKernelSpec) -> float:
    """The estimator bandwidth: sigma_zeta / sqrt(log n) under the log rule."""
    if spec.bandwidth_rule == FIXED_RULE:
        return float(spec.fixed_bandwidth)
    if n < 3:
        raise ValueError(f"log-rule bandwidth needs n >= 3, got {n}")
    if sigma_zeta <= 0:
        raise ValueError("log-rule bandwidth needs sigma_zeta > 0; use the fixed rule")
    return float(sigma_zeta / np.sqrt(np.log(n)))


def _simpson_nodes(spec: DeconvKernelSpec) -> tuple[np.ndarray, np.ndarray]:
    b = spec.cf_support
    t = np.linspace(-b, b, spec.quad_points)
    w = np.ones(spec.quad_points)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (t[1] - t[0]) / 3.0
    return t, w


def _check_amplification(sigma_zeta: float, lam: float, spec: DeconvKernelSpec) -> None:
    peak = 0.5 * (sigma_zeta * spec.cf_support / lam) ** 2
    if peak > _EXP_LIMIT:
        raise FloatingPointError(
            f"inverse error CF overflows (exponent {peak:.1f}); "
            f"use a larger bandwidth than {lam:g} for sigma_zeta={sigma_zeta:g}")


def deconv_kernel_values(u, sigma_zeta: float, lam: float, spec: DeconvKernelSpec) -> np.ndarray:
    """K_lam(u) = (1/2pi) int phi_K(t) exp(sigma_zeta^2 t^2 / (2 lam^2)) cos(t u) dt."""
    _check_amplification(sigma_zeta, lam, spec)
    u = np.asarray(u, dtype=np.float64)
    t, w = _simpson_nodes(spec)
    integrand = kernel_cf(t, spec) * np.exp(0.5 * (sigma_zeta * t / lam) ** 2)
    vals = np.cos(np.multiply.outer(u, t)) @ (w * integrand)
    return vals / (2.0 * np.pi)


def deconv_estimate(noisy_samples, sigma_zeta: float, spec: DeconvKernelSpec,
                    grid) -> DeconvEstimate:
    """Deconvolving kernel density estimate on a grid (empirical-CF route)."""
    y = np.asarray(noisy_samples, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("empty sample")
    if sigma_zeta < 0:
        raise ValueError("sigma_zeta must be nonnegative")
    grid = np.asarray(grid, dtype=np.float64)
    lam = bandwidth(y.size, sigma_zeta, spec)
    _check_amplification(sigma_zeta, lam, spec)
    t, w = _simpson_nodes(spec)
    s = t / lam
    ecf = np.zeros(s.size, dtype=complex)
    for i0 in range(0, y.size, 40000):
        chunk = y[i0:i0 + 40000]
        ecf += np.exp(1j * np.multiply.outer(chunk, s)).sum(axis=0)
    ecf /= y.size
    ratio = kernel_cf(t, spec) * np.exp(0.5 * (sigma_zeta * s) ** 2) * ecf
    dens = (np.exp(-1j * np.multiply.outer(grid, s)) @ (w * ratio)).real / (2.0 * np.pi * lam)
    if not np.all(np.isfinite(dens)):
        raise FloatingPointError(
            f"non-finite kernel values; use a larger bandwidth than {lam:g}")
    return DeconvEstimate(grid=grid, density=dens, bandwidth=lam, n=y.size)


def deconv_estimate_direct(noisy_samples, sigma_zeta: float, spec: DeconvKernelSpec,
                           grid) -> DeconvEstimate:
    """Kernel-sum route, O(n * grid * quad); the cross-check for the CF route."""
    y = np.asarray(noisy_samples, dtype=np.float64).ravel()
    if y.size == 0:
        raise ValueError("empty sample")
    grid = np.asarray(grid, dtype=np.float64)
    lam = bandwidth(y.size, sigma_zeta, spec)
    u = (grid[:, None] - y[None, :]) / lam
    vals = deconv_kernel_values(u.ravel(), sigma_zeta, lam, spec).reshape(u.shape)
    dens = vals.mean(axis=1) / lam
    return DeconvEstimate(grid=grid, density=dens, bandwidth=lam, n=y.size)


def ise(estimate: DeconvEstimate, truth) -> float:
    """Integrated squared error against an analytic density by trapezoid
    quadrature; the grid must cover the truth's central 1 - 1e-6 mass."""
    lo, hi = truth.ppf(0.5e-6), truth.ppf(1.0 - 0.5e-6)
    if estimate.grid[0] > lo or estimate.grid[-1] < hi:
        raise ValueError(
            f"grid [{estimate.grid[0]:g}, {estimate.grid[-1]:g}] does not cover "
            f"the truth's quantile range [{lo:g}, {hi:g}]")
    diff = estimate.density - truth.pdf(estimate.grid[:, None])
    return float(np.trapezoid(diff * diff, estimate.grid))


@dataclass(frozen=True)
class MiseEstimate:
    n: int
    mean: float
    stderr: float
    bandwidth: float
    replicates: int


def mise_mc(truth, sigma_zeta: float, n: int, spec: DeconvKernelSpec, grid,
            replicates: int, seed: int) -> MiseEstimate:
    """Mean integrated squared error over independent sample draws."""
    from .data_io import rng_stream
    vals = np.empty(replicates)
    lam = None
    for r in range(replicates):
        rng = rng_stream(seed, "mise-replicate", r)
        x = truth.sample(n, rng)[:, 0]
        y = x + sigma_zeta * rng.standard_normal(n) if sigma_zeta > 0 else x
        est = deconv_estimate(y, sigma_zeta, spec, grid)
        lam = est.bandwidth
        vals[r] = ise(est, truth)
    return MiseEstimate(n=n, mean=float(vals.mean()),
                        stderr=float(vals.std(ddof=1) / np.sqrt(replicates)),
                        bandwidth=float(lam), replicates=replicates)


@dataclass(frozen=True)
class RateSweep:
    sigma_zeta: float
    rows: tuple[MiseEstimate, ...]
    log_exponent: float     # b in MISE ~ a (log n)^(-b)
    poly_exponent: float    # c in MISE ~ a n^(-c)


def reference_bandwidth(truth_std: float, n: int, spec: DeconvKernelSpec) -> float:
    """Error-free oracle rule h = sigma (8 sqrt(pi) R(K) / (3 mu_2^2))^(1/5) n^(-1/5),
    the MISE-optimal choice for a Gaussian truth."""
    c = (8.0 * np.sqrt(np.pi) * kernel_roughness(spec) / (3.0 * kernel_second_moment(spec) ** 2)) ** 0.2
    return float(truth_std * c * n ** (-0.2))


def rate_sweep(truth, sigma_zeta: float, n_list, replicates: int,
               spec: DeconvKernelSpec, grid, seed: int = 0) -> RateSweep:
    """MISE as a function of the sample size, with fitted decay exponents.

    For sigma_zeta = 0 (the error-free comparison run) the bandwidth switches
    to the oracle n^(-1/5) rule, since the log rule is undefined there.
    """
    n_list = [int(n) for n in n_list]
    if len(n_list) < 3 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ValueError("n_list must be increasing with at least 3 entries")
    truth_std = 0.5 * (truth.ppf(0.8413447460685429) - truth.ppf(0.15865525393145705))
    rows = []
    for n in n_list:
        spec_n = spec
        if sigma_zeta == 0.0:
            spec_n = replace(spec, bandwidth_rule=FIXED_RULE,
                             fixed_bandwidth=reference_bandwidth(truth_std, n, spec))
        rows.append(mise_mc(truth, sigma_zeta, n, spec_n, grid, replicates, seed))
    ns = np.array(n_list, dtype=np.float64)
    means = np.array([r.mean for r in rows])
    log_b = -np.polyfit(np.log(np.log(ns)), np.log(means), 1)[0]
    poly_c = -np.polyfit(np.log(ns), np.log(means), 1)[0]
    return RateSweep(sigma_zeta=sigma_zeta, rows=tuple(rows),
                     log_exponent=float(log_b), poly_exponent=float(poly_c))


def write_rate_csv(sweep: RateSweep, path) -> None:
    """Columns: n, mise_mean, mise_stderr, bandwidth."""
    import csv
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["n", "mise_mean", "mise_stderr", "bandwidth"])
        for r in sweep.rows:
            writer.writerow([r.n, repr(r.mean), repr(r.stderr), repr(r.bandwidth)])
