"""Distribution-distance estimators and numerical checks of the theory.

Covers: empirical characteristic functions, the CF-identifiability bound
(|CF gap| against the KL of the noise-convolved pair), k-NN KL estimation,
Gaussian-kernel MMD, moment-fit KL, the consistency/reconstruction gradient
equivalence, and the closed-form Gaussian recursion for the alternating
denoise-retrain procedure together with its CF-gap bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .analytic import GaussianDenoiser, GaussianSpec, gaussian_kl
from .data_io import Dataset, rng_stream
from .losses import WEIGHT_UNIT, consistency_loss, denoising_loss_pairs
from .sampler import SolverConfig


def _points(samples) -> np.ndarray:
    if isinstance(samples, Dataset):
        return samples.points
    return np.atleast_2d(np.asarray(samples, dtype=np.float64))


# ---------------------------------------------------------------------------
# characteristic functions


@dataclass(frozen=True)
class CfProbe:
    u: np.ndarray          # (k, d) probe frequencies
    values: np.ndarray     # (k,) complex empirical CF values
    stderr: float          # universal 1/sqrt(n) bound on the standard error


def empirical_cf(samples, u_list) -> CfProbe:
    """Empirical characteristic function (1/n) sum_j exp(i u . x_j)."""
    x = _points(samples)
    if x.shape[0] == 0:
        raise ValueError("empty sample")
    u = np.atleast_2d(np.asarray(u_list, dtype=np.float64))
    values = np.exp(1j * x @ u.T).mean(axis=0)
    return CfProbe(u=u, values=values, stderr=1.0 / np.sqrt(x.shape[0]))


# ---------------------------------------------------------------------------
# the identifiability bound: |CF_p(u) - CF_q(u)| under noise-convolved KL


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    rhs: float
    holds: bool
    slack: float


def cf_kl_bound_report(p: GaussianSpec, q: GaussianSpec, sigma_zeta: float, u,
                       tol: float = 1e-9) -> BoundReport:
    """Closed-form check of
    |CF_p(u) - CF_q(u)| <= exp(sigma_zeta^2 |u|^2 / 2) sqrt(2 KL(p*h || q*h))
    for Gaussian p, q and h = N(0, sigma_zeta^2 I)."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    lhs = float(np.abs(p.cf(u[None, :]) - q.cf(u[None, :]))[0])
    kl = gaussian_kl(p.convolve_iso(sigma_zeta), q.convolve_iso(sigma_zeta))
    rhs = float(np.exp(0.5 * sigma_zeta ** 2 * u @ u) * np.sqrt(2.0 * max(kl, 0.0)))
    return BoundReport(lhs=lhs, rhs=rhs, holds=lhs <= rhs + tol, slack=rhs - lhs)


def cf_kl_bound_grid(seed: int = 0, n_cases: int = 100,
                     sigmas=(0.1, 0.2, 0.59), tol: float = 1e-9) -> list[BoundReport]:
    """Randomized grid of 1-D Gaussian pairs: means in [-2, 2], variances in
    [0.5, 2], probe frequencies in [-3, 3]."""
    rng = rng_stream(seed, "cf-bound-grid")
    reports = []
    for _ in range(n_cases):
        p = GaussianSpec.iso(rng.uniform(-2, 2), rng.uniform(0.5, 2.0))
        q = GaussianSpec.iso(rng.uniform(-2, 2), rng.uniform(0.5, 2.0))
        sigma = float(rng.choice(sigmas))
        u = rng.uniform(-3.0, 3.0)
        reports.append(cf_kl_bound_report(p, q, sigma, u, tol=tol))
    return reports


# ---------------------------------------------------------------------------
# divergence estimators


@dataclass(frozen=True)
class KnnKlEstimate:
    value: float
    ci_low: float
    ci_high: float


def kl_knn(samples_p, samples_q, k: int = 5, n_boot: int = 200,
           seed: int = 0) -> KnnKlEstimate:
    """k-nearest-neighbor KL(p || q) estimate with a bootstrap CI.

    Distances are floored at 1e-12 to survive duplicate points.  With
    ``n_boot=0`` the CI is skipped (NaN bounds).
    """
    xp, xq = _points(samples_p), _points(samples_q)
    if xp.shape[1] != xq.shape[1]:
        raise ValueError("dimension mismatch")
    if xp.shape[0] <= k or xq.shape[0] <= k:
        raise ValueError(f"need more than k={k} points in both samples")

    def estimate(xp_, xq_):
        n, m = xp_.shape[0], xq_.shape[0]
        d = xp_.shape[1]
        rho = cKDTree(xp_).query(xp_, k=k + 1)[0][:, -1]
        nu = cKDTree(xq_).query(xp_, k=k)[0]
        nu = nu[:, -1] if nu.ndim == 2 else nu
        rho = np.maximum(rho, 1e-12)
        nu = np.maximum(nu, 1e-12)
        return float(d * np.mean(np.log(nu / rho)) + np.log(m / (n - 1)))

    value = estimate(xp, xq)
    if n_boot < 1:
        return KnnKlEstimate(value=value, ci_low=float("nan"), ci_high=float("nan"))
    rng = rng_stream(seed, "kl-knn-bootstrap")
    boots = np.empty(n_boot)
    for b in range(n_boot):
        boots[b] = estimate(xp[rng.integers(0, len(xp), len(xp))],
                            xq[rng.integers(0, len(xq), len(xq))])
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return KnnKlEstimate(value=value, ci_low=float(lo), ci_high=float(hi))


def mmd(samples_p, samples_q, bandwidth: float, unbiased: bool = True) -> float:
    """Squared maximum mean discrepancy with a Gaussian kernel.

    The unbiased form omits diagonal terms and can come out slightly negative;
    it is reported as-is.
    """
    x, y = _points(samples_p), _points(samples_q)
    if x.shape[1] != y.shape[1]:
        raise ValueError("dimension mismatch")
    g = 0.5 / bandwidth ** 2
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(x, y, "sqeuclidean"))
    m_, n_ = len(x), len(y)
    if unbiased:
        np.fill_diagonal(kxx, 0.0)
        np.fill_diagonal(kyy, 0.0)
        return float(kxx.sum() / (m_ * (m_ - 1)) + kyy.sum() / (n_ * (n_ - 1)) - 2.0 * kxy.mean())
    return float(kxx.mean() + kyy.mean() - 2.0 * kxy.mean())


def mmd_with_stderr(samples_p, samples_q, bandwidth: float, n_boot: int = 100,
                    seed: int = 0) -> tuple[float, float]:
    """Unbiased MMD^2 plus a bootstrap standard error (kernel matrices reused)."""
    x, y = _points(samples_p), _points(samples_q)
    g = 0.5 / bandwidth ** 2
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean"))
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean"))
    kxy = np.exp(-g * cdist(x, y, "sqeuclidean"))
    m_, n_ = len(x), len(y)

    def stat(ix, iy):
        a = kxx[np.ix_(ix, ix)].copy()
        b = kyy[np.ix_(iy, iy)].copy()
        c = kxy[np.ix_(ix, iy)]
        np.fill_diagonal(a, 0.0)
        np.fill_diagonal(b, 0.0)
        return a.sum() / (m_ * (m_ - 1)) + b.sum() / (n_ * (n_ - 1)) - 2.0 * c.mean()

    value = stat(np.arange(m_), np.arange(n_))
    rng = rng_stream(seed, "mmd-bootstrap")
    boots = [stat(rng.integers(0, m_, m_), rng.integers(0, n_, n_)) for _ in range(n_boot)]
    return float(value), float(np.std(boots))


def median_heuristic(samples, max_points: int = 500, seed: int = 0) -> float:
    """Median pairwise distance over (a subsample of) the points."""
    x = _points(samples)
    if len(x) > max_points:
        idx = rng_stream(seed, "median-heuristic").choice(len(x), max_points, replace=False)
        x = x[idx]
    dists = cdist(x, x)
    return float(np.median(dists[np.triu_indices(len(x), k=1)]))


@dataclass(frozen=True)
class GaussianFitKl:
    value: float
    ridged: bool


def gaussian_fit_kl(samples, truth: GaussianSpec) -> GaussianFitKl:
    """KL(truth || N(sample mean, sample covariance)).

    A singular fitted covariance is ridged with 1e-9 I and flagged.
    """
    x = _points(samples)
    mu = x.mean(axis=0)
    cov = np.cov(x.T, bias=False).reshape(truth.d, truth.d)
    ridged = False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        cov = cov + 1e-9 * np.eye(truth.d)
        ridged = True
    fitted = GaussianSpec(mean=mu, cov=cov)
    return GaussianFitKl(value=gaussian_kl(truth, fitted), ridged=ridged)


# ---------------------------------------------------------------------------
# consistency / reconstruction gradient equivalence


@dataclass(frozen=True)
class EquivalenceReport:
    cosine: float
    consistency_value: float
    denoising_value: float
    grad_norm_consistency: float
    grad_norm_denoising: float


def consistency_equivalence_report(net, noisy: Dataset, s: float, solver_cfg: SolverConfig,
                                   seed: int, m: int = 4,
                                   batch_size: int | None = None) -> EquivalenceReport:
    """Gradient comparison of the consistency loss at r = 0 with the unit-weight
    reconstruction loss at fixed t = s.

    Both losses are evaluated on the consistency chain's own draws (the inner
    endpoints paired with their level-s ancestors), the coupling under which
    the equivalence is exact: the two estimates differ by the inner-draw
    spread, whose parameter gradient is zero.
    """
    c = consistency_loss(net, noisy, 0.0, s, solver_cfg, seed, m=m, batch_size=batch_size)
    m_, n_, d_ = c.inner_values.shape
    x0 = c.inner_values.reshape(m_ * n_, d_)
    x_t = np.tile(c.x_s, (m_, 1))
    dn = denoising_loss_pairs(net, x0, x_t, s, weight=WEIGHT_UNIT)
    gc, gd = c.grad, dn.grad
    cos = float(gc @ gd / (np.linalg.norm(gc) * np.linalg.norm(gd)))
    return EquivalenceReport(cosine=cos, consistency_value=c.value, denoising_value=dn.value,
                             grad_norm_consistency=float(np.linalg.norm(gc)),
                             grad_norm_denoising=float(np.linalg.norm(gd)))


# ---------------------------------------------------------------------------
# closed-form Gaussian recursion for the alternating procedure


def backward_moments_1d(source: tuple[float, float], start: tuple[float, float],
                        zeta: float) -> tuple[float, float]:
    """Endpoint mean/variance of the backward SDE driven by the score of the
    forward-diffused N(m_q, v_q), started from N(m_s, v_s) at time zeta.

    The drift is affine, so the integrating factor v_q + t^2 gives the exact
    closed form."""
    m_q, v_q = source
    m_s, v_s = start
    shrink = v_q / (v_q + zeta ** 2)
    mean = m_q + shrink * (m_s - m_q)
    var = shrink ** 2 * v_s + v_q ** 2 * (1.0 / v_q - 1.0 / (v_q + zeta ** 2))
    return float(mean), float(var)


def analytic_sfbd_trajectory(truth: tuple[float, float], pretrain_fit: tuple[float, float],
                             zeta: float, iterations: int) -> list[tuple[float, float]]:
    """Moments of the denoised-output law over iterations of the idealized
    alternating procedure (infinite noisy data, loss-optimal updates).

    Iteration k >= 1 solves backward from the true noisy marginal
    N(m*, v* + zeta^2) under the score induced by the previous fit, then the
    update step adopts the resulting Gaussian exactly.
    """
    m_star, v_star = truth
    start = (m_star, v_star + zeta ** 2)
    fits = []
    q = pretrain_fit
    for _ in range(iterations):
        q = backward_moments_1d(q, start, zeta)
        fits.append(q)
    return fits


def pretrain_score_gap_integral(truth: tuple[float, float], pretrain_fit: tuple[float, float],
                                zeta: float, n_quad: int = 64) -> float:
    """(1/2) int_0^zeta g(t)^2 E_{p*_t} || true score - pretrained score ||^2 dt
    for the all-Gaussian configuration, by Gauss-Legendre quadrature.

    Both scores are affine: at level t the truth has variance v* + t^2 and the
    pretrained model m_q, v_q + t^2, so the expectation is closed-form.
    """
    m_star, v_star = truth
    m_q, v_q = pretrain_fit
    nodes, weights = np.polynomial.legendre.leggauss(n_quad)
    t = 0.5 * zeta * (nodes + 1.0)
    w = 0.5 * zeta * weights
    a = v_star + t ** 2
    b = v_q + t ** 2
    coef = 1.0 / b - 1.0 / a
    expect = coef ** 2 * a + ((m_star - m_q) / b) ** 2
    return float(0.5 * np.sum(w * 2.0 * t * expect))


@dataclass(frozen=True)
class CfGapBoundReport:
    u: float
    iterations: int
    min_gap: float
    bound: float
    holds: bool


def min_cf_gap_bound_report(truth: tuple[float, float], pretrain_fit: tuple[float, float],
                            zeta: float, iterations: int, u: float,
                            tol: float = 1e-9) -> CfGapBoundReport:
    """Check min_k |CF_truth(u) - CF_k(u)| <= exp(zeta^2 u^2 / 2) sqrt(2 M0 / K)
    on the closed-form Gaussian trajectory, with M0 the pretrain score-gap
    integral."""
    traj = analytic_sfbd_trajectory(truth, pretrain_fit, zeta, iterations)
    p = GaussianSpec.iso(truth[0], truth[1])
    uvec = np.array([[u]])
    gaps = [float(np.abs(p.cf(uvec) - GaussianSpec.iso(m, v).cf(uvec))[0]) for m, v in traj]
    m0 = pretrain_score_gap_integral(truth, pretrain_fit, zeta)
    bound = float(np.exp(0.5 * zeta ** 2 * u ** 2) * np.sqrt(2.0 * m0 / iterations))
    min_gap = float(min(gaps))
    return CfGapBoundReport(u=u, iterations=iterations, min_gap=min_gap, bound=bound,
                            holds=min_gap <= bound + tol)
