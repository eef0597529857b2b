import numpy as np
import pytest
from scipy.integrate import quad

from sfbdlab.analytic import GaussianDenoiser, GaussianSpec, gaussian_kl
from sfbdlab.data_io import Dataset, rng_stream
from sfbdlab.diagnostics import (analytic_sfbd_trajectory, backward_moments_1d,
                                 cf_kl_bound_grid, cf_kl_bound_report,
                                 consistency_equivalence_report, empirical_cf,
                                 gaussian_fit_kl, kl_knn, median_heuristic,
                                 min_cf_gap_bound_report, mmd, mmd_with_stderr,
                                 pretrain_score_gap_integral)
from sfbdlab.sampler import SolverConfig, solve_backward
from sfbdlab.schedule_sde import NoiseSchedule


# --- empirical characteristic function ---------------------------------------

def test_cf_single_point_and_symmetry():
    probe = empirical_cf(np.zeros((1, 1)), [[0.7]])
    assert probe.values[0] == 1.0 + 0.0j
    a = 1.3
    probe = empirical_cf(np.array([[a], [-a]]), [[0.9]])
    assert probe.values[0] == pytest.approx(np.cos(a * 0.9), abs=1e-15)


def test_cf_gaussian_value_and_bounds():
    n = 10 ** 5
    x = rng_stream(4, "cf").standard_normal((n, 1))
    us = [[0.0], [1.0], [2.5]]
    probe = empirical_cf(x, us)
    assert probe.values[0] == 1.0 + 0.0j  # u = 0 exactly
    assert abs(probe.values[1] - np.exp(-0.5)) <= 3 * probe.stderr
    assert np.all(np.abs(probe.values) <= 1.0 + 3 * probe.stderr)


def test_cf_empty_sample_rejected():
    with pytest.raises(ValueError):
        empirical_cf(np.zeros((0, 1)), [[1.0]])


# --- CF gap / convolved-KL bound ----------------------------------------------

def test_bound_equal_distributions():
    p = GaussianSpec.iso(0.3, 1.2)
    rep = cf_kl_bound_report(p, p, 0.2, 1.0)
    assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.holds


def test_bound_worked_example():
    # p = N(0,1), q = N(1,1), sigma = 0.2, u = 1:
    #   lhs = |e^{-1/2}(1 - e^{i})| = 2 e^{-1/2} sin(1/2)
    #   KL(p*h || q*h) = 1 / (2 * 1.04), rhs = e^{0.02} sqrt(2 KL)
    p, q = GaussianSpec.iso(0.0, 1.0), GaussianSpec.iso(1.0, 1.0)
    rep = cf_kl_bound_report(p, q, 0.2, 1.0)
    assert rep.lhs == pytest.approx(2 * np.exp(-0.5) * np.sin(0.5), abs=1e-12)
    assert rep.lhs == pytest.approx(0.58160, abs=5e-6)
    kl = gaussian_kl(p.convolve_iso(0.2), q.convolve_iso(0.2))
    assert kl == pytest.approx(1 / (2 * 1.04), abs=1e-12)
    assert rep.rhs == pytest.approx(np.exp(0.02) * np.sqrt(2 * kl), abs=1e-12)
    assert rep.rhs == pytest.approx(1.0005, abs=5e-4)
    assert rep.holds


def test_bound_zero_frequency():
    rep = cf_kl_bound_report(GaussianSpec.iso(0.0, 1.0), GaussianSpec.iso(2.0, 0.5), 0.2, 0.0)
    assert rep.lhs == 0.0 and rep.holds


def test_bound_grid_has_no_violations():
    reports = cf_kl_bound_grid(seed=1, n_cases=100)
    assert len(reports) == 100
    assert all(r.holds for r in reports)


# --- divergence estimators -----------------------------------------------------

def test_kl_knn_same_distribution():
    rng = rng_stream(2, "knn-same")
    x = rng.standard_normal((10 ** 4, 1))
    y = rng.standard_normal((10 ** 4, 1))
    est = kl_knn(x, y, k=5, n_boot=100, seed=3)
    assert est.ci_low <= 0.0 <= est.ci_high


def test_kl_knn_against_closed_forms():
    rng = rng_stream(5, "knn-cf")
    x = rng.standard_normal((10 ** 4, 1))
    y_shift = 1.0 + rng.standard_normal((10 ** 4, 1))
    y_wide = 2.0 * rng.standard_normal((10 ** 4, 1))
    # KL(N(0,1) || N(1,1)) = 1/2
    est = kl_knn(x, y_shift, k=5, n_boot=100, seed=4)
    assert est.ci_low <= 0.5 <= est.ci_high
    # KL(N(0,1) || N(0,4)) = (1/4 - 1 + ln 4)/2
    want = 0.5 * (0.25 - 1.0 + np.log(4.0))
    assert want == pytest.approx(0.31815, abs=5e-6)
    est = kl_knn(x, y_wide, k=5, n_boot=100, seed=5)
    assert est.ci_low <= want <= est.ci_high
    # asymmetry: reverse direction has its own closed form (4 - 1 - ln4)/2
    want_rev = 0.5 * (4.0 - 1.0 - np.log(4.0))
    est_rev = kl_knn(y_wide, x, k=5, n_boot=100, seed=6)
    assert est_rev.ci_low <= want_rev <= est_rev.ci_high
    assert abs(est_rev.value - est.value) > 0.2


def test_kl_knn_duplicate_points_survive():
    x = np.zeros((20, 1))
    y = np.zeros((20, 1))
    est = kl_knn(x, y, k=3, n_boot=0)
    assert np.isfinite(est.value)


def test_mmd_identical_and_separated():
    rng = rng_stream(6, "mmd")
    x = rng.standard_normal((400, 1))
    assert mmd(x, x, bandwidth=1.0, unbiased=False) == pytest.approx(0.0, abs=1e-12)
    assert abs(mmd(x, x.copy(), bandwidth=1.0)) <= 0.02
    y = 3.0 + rng.standard_normal((2000, 1))
    x2 = rng.standard_normal((2000, 1))
    assert mmd(x2, y, bandwidth=1.0) > 0.5
    # kernel flattens as bandwidth -> infinity
    assert abs(mmd(x2, y, bandwidth=1e6)) <= 1e-6


def test_mmd_stderr_brackets_value():
    rng = rng_stream(7, "mmd-se")
    x = rng.standard_normal((500, 2))
    y = rng.standard_normal((500, 2))
    val, se = mmd_with_stderr(x, y, bandwidth=1.0, n_boot=50, seed=1)
    assert se > 0
    assert abs(val) <= 4 * se  # same distribution


def test_median_heuristic_scale():
    rng = rng_stream(8, "mh")
    x = rng.standard_normal((800, 2))
    bw = median_heuristic(x)
    # median pairwise distance of a 2-d standard normal is ~ sqrt(2 * median chi2_2)
    assert 1.0 <= bw <= 2.5


def test_gaussian_fit_kl_consistency():
    truth = GaussianSpec.iso(0.0, 1.0)
    x = rng_stream(9, "gfk").standard_normal((10 ** 5, 1))
    res = gaussian_fit_kl(x, truth)
    assert res.value <= 0.001 and not res.ridged
    shifted = 1.0 + rng_stream(10, "gfk2").standard_normal((10 ** 5, 1))
    assert gaussian_fit_kl(shifted, truth).value == pytest.approx(0.5, abs=0.02)


def test_gaussian_fit_kl_degenerate_ridged():
    truth = GaussianSpec.iso(np.zeros(2), 1.0, d=2)
    x = np.array([[0.0, 0.0], [1.0, 1.0]])  # rank-1 sample covariance
    res = gaussian_fit_kl(x, truth)
    assert res.ridged and np.isfinite(res.value)


# --- gradient equivalence -------------------------------------------------------

def test_equivalence_cosine_on_random_config(small_random_net):
    rng = rng_stream(11, "eq")
    pts = rng.standard_normal((128, 1)) + 0.2 * rng.standard_normal((128, 1))
    noisy = Dataset(points=pts, tag="noisy")
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=6)
    rep = consistency_equivalence_report(small_random_net, noisy, s=0.1,
                                         solver_cfg=cfg, seed=12, m=4)
    assert rep.cosine >= 0.9999
    # the value gap is the (nonnegative) inner-draw spread
    assert rep.denoising_value >= rep.consistency_value - 1e-12


# --- closed-form recursion of the alternating procedure --------------------------

def test_backward_moments_fixed_point():
    # driving score = truth score: the map reproduces the data law exactly
    m, v = backward_moments_1d((0.0, 1.0), (0.0, 1.0 + 0.04), zeta=0.2)
    assert m == pytest.approx(0.0, abs=1e-15)
    assert v == pytest.approx(1.0, abs=1e-12)


def test_backward_moments_match_sde_monte_carlo():
    # independent oracle: integrate the same backward SDE numerically with the
    # posterior-mean denoiser of the driving fit
    sched = NoiseSchedule(sigma_max=10.0, T=10.0)
    fit = (0.3, 0.8)
    zeta = 0.2
    want_m, want_v = backward_moments_1d(fit, (0.0, 1.0 + zeta ** 2), zeta)
    den = GaussianDenoiser(GaussianSpec.iso(fit[0], fit[1]), sched)
    rng = rng_stream(12, "bm-mc")
    n = 20000
    x = rng.standard_normal((n, 1)) * np.sqrt(1.0 + zeta ** 2)
    out = solve_backward(den, x, SolverConfig(t_start=zeta, t_end=0.0, steps=64), seed=13)
    assert abs(out.mean() - want_m) <= 4 * np.sqrt(want_v / n)
    assert abs(out.var() - want_v) <= 4 * want_v * np.sqrt(2.0 / n)


def test_trajectory_contracts_toward_truth():
    traj = analytic_sfbd_trajectory((0.0, 1.0), (0.4, 0.6), zeta=0.2, iterations=16)
    gaps = [abs(m) + abs(v - 1.0) for m, v in traj]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 0.05 * gaps[0]


def test_score_gap_integral_matches_adaptive_quadrature():
    truth, fit, zeta = (0.0, 1.0), (0.4, 0.6), 0.2

    def integrand(t):
        a, b = truth[1] + t * t, fit[1] + t * t
        coef = 1.0 / b - 1.0 / a
        expect = coef ** 2 * a + ((truth[0] - fit[0]) / b) ** 2
        return 0.5 * 2.0 * t * expect

    want, _ = quad(integrand, 0.0, zeta)
    got = pretrain_score_gap_integral(truth, fit, zeta)
    assert got == pytest.approx(want, rel=1e-10)


def test_min_cf_gap_bound_holds_and_min_monotone():
    truth, fit, zeta = (0.0, 1.0), (0.4, 0.6), 0.2
    prev = None
    for K in (1, 2, 4, 8, 16):
        for u in (0.5, 1.0, 2.0, 3.0):
            rep = min_cf_gap_bound_report(truth, fit, zeta, K, u)
            assert rep.holds
        rep1 = min_cf_gap_bound_report(truth, fit, zeta, K, 1.0)
        if prev is not None:
            assert rep1.min_gap <= prev + 1e-15  # min over a growing set
        prev = rep1.min_gap
