import numpy as np
import pytest
from scipy.stats import kstest

from sfbdlab.analytic import ConstantDenoiser, GaussianDenoiser, GaussianSpec, IdentityDenoiser
from sfbdlab.data_io import Dataset, rng_stream
from sfbdlab.sampler import (EULER_MARUYAMA, HEUN2, T_FLOOR, FrozenBrownianPath,
                             SolverConfig, SolverNumericsError, denoise_dataset,
                             model_score, solve_backward, solver_order_experiment,
                             time_grid)
from sfbdlab.schedule_sde import CorruptionSpec, NoiseSchedule

SCHED = NoiseSchedule(sigma_max=10.0, T=10.0)


def test_solver_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(t_start=0.1, t_end=0.2)
    with pytest.raises(ValueError):
        SolverConfig(t_start=0.2, method="rk4")
    with pytest.raises(ValueError):
        SolverConfig(t_start=0.2, steps=0)


def test_time_grid_shape_and_spacing():
    cfg = SolverConfig(t_start=0.59, t_end=0.01, steps=18, rho=7.0)
    grid = time_grid(cfg)
    assert grid.shape == (19,)
    assert grid[0] == 0.59 and grid[-1] == 0.01
    assert np.all(np.diff(grid) < 0)
    # independent reconstruction of the polynomial-rho spacing
    i = np.arange(19)
    want = (0.59 ** (1 / 7) + i / 18 * (0.01 ** (1 / 7) - 0.59 ** (1 / 7))) ** 7
    np.testing.assert_allclose(grid, want, rtol=1e-12)


def test_model_score_forms():
    x = np.array([[2.0]])
    assert np.array_equal(model_score(IdentityDenoiser(SCHED), x, 1.0), [[0.0]])
    # unit-variance data at sigma_t = 1: score of N(0, 2) at 2 is -1
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    np.testing.assert_allclose(model_score(oracle, x, 1.0), [[-1.0]], atol=1e-12)
    # constant output mu: score of N(mu, sigma_t^2)
    const = ConstantDenoiser(np.array([0.5]), SCHED)
    np.testing.assert_allclose(model_score(const, x, 0.5), [[(0.5 - 2.0) / 0.25]])
    with pytest.raises(ValueError):
        model_score(oracle, x, 0.0)


class _ConstSigmaSchedule:
    """sigma frozen at a constant: g = 0, zero dynamics."""

    def __init__(self, value, T=10.0):
        self.value = value
        self.T = T
        self.sigma_max = value

    def sigma_at(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.full_like(t, self.value, dtype=np.float64)
        return out if out.ndim else float(out)

    def g_squared(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        return out if out.ndim else 0.0


def test_zero_dynamics_leaves_state_unchanged():
    net = IdentityDenoiser(_ConstSigmaSchedule(0.3))
    x = rng_stream(0, "zd").standard_normal((16, 2))
    out = solve_backward(net, x, SolverConfig(t_start=0.2, t_end=0.0, steps=8), seed=1)
    assert np.array_equal(out, x)


def test_interval_below_floor_is_noop():
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    x = rng_stream(1, "nf").standard_normal((8, 1))
    cfg = SolverConfig(t_start=5e-5, t_end=0.0, steps=1)
    assert np.array_equal(solve_backward(oracle, x, cfg, seed=0), x)


@pytest.mark.parametrize("method,steps", [(HEUN2, 64), (EULER_MARUYAMA, 256)])
def test_exact_score_preserves_marginals(method, steps):
    # backward flow with the true score maps N(0, 1 + 0.04) at 0.2 to N(0, 1);
    # n = 1e4 confidence bands: mean within 2.6/sqrt(n), var in [0.97, 1.03]
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    rng = rng_stream(7, f"marginal-{method}")
    x = rng.standard_normal((10 ** 4, 1)) * np.sqrt(1.04)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, method=method, steps=steps)
    out = solve_backward(oracle, x, cfg, seed=13)
    assert abs(out.mean()) <= 0.026
    assert 0.97 <= out.var() <= 1.03


def test_heun_beats_euler_at_equal_steps():
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    x = rng_stream(3, "hb").standard_normal((2000, 1)) * np.sqrt(1.04)
    res = solver_order_experiment(oracle, x, t_start=0.2, t_end=0.01,
                                  steps_list=(16, 32), ref_steps=1024, rho=7.0, seed=5)
    assert res.errors[HEUN2][0] < res.errors[EULER_MARUYAMA][0]


def test_frozen_path_increments_are_consistent():
    nodes = np.array([0.04, 0.02, 0.01, 0.001])
    path = FrozenBrownianPath(nodes, n=4, d=2, rng=rng_stream(0, "fp"))
    a = path.increment(0.04, 0.02) + path.increment(0.02, 0.001)
    b = path.increment(0.04, 0.001)
    np.testing.assert_allclose(a, b, atol=1e-15)
    # interpolated point sits between node values
    mid = path.value(0.015)
    lo, hi = path.value(0.01), path.value(0.02)
    assert np.all((mid - np.minimum(lo, hi) >= -1e-12) & (np.maximum(lo, hi) - mid >= -1e-12))


def _noisy(n, sigma=0.2, seed=5):
    rng = rng_stream(seed, "mk-noisy")
    pts = rng.standard_normal((n, 1)) + sigma * rng.standard_normal((n, 1))
    return Dataset(points=pts, tag="noisy", origin="gaussian(d=1)+noise")


def test_denoise_dataset_tiny_zeta_returns_input():
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    ds = _noisy(32, sigma=5e-5)
    spec = CorruptionSpec(zeta=5e-5, sigma_zeta=5e-5)
    cfg = SolverConfig(t_start=5e-5, t_end=0.0, steps=1)
    out = denoise_dataset(oracle, ds, spec, cfg, seed=2)
    assert out.tag == "denoised"
    assert np.array_equal(out.points, ds.points)


def test_denoise_dataset_validations():
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    spec = CorruptionSpec(zeta=0.2, sigma_zeta=0.2)
    clean = Dataset(points=np.zeros((4, 1)), tag="clean")
    with pytest.raises(ValueError):
        denoise_dataset(oracle, clean, spec, SolverConfig(t_start=0.2), seed=0)
    with pytest.raises(ValueError):
        denoise_dataset(oracle, _noisy(4), spec, SolverConfig(t_start=0.3), seed=0)


def test_denoise_dataset_exact_score_ks():
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    ds = _noisy(4000, seed=10)
    spec = CorruptionSpec(zeta=0.2, sigma_zeta=0.2)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=32)
    out = denoise_dataset(oracle, ds, spec, cfg, seed=3)
    assert kstest(out.points[:, 0], "norm").pvalue > 0.01


def test_denoise_dataset_prefix_chunking_invariance():
    # per-index noise streams: denoising the first k rows alone reproduces the
    # first k rows of the full run
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    ds = _noisy(64, seed=11)
    head = Dataset(points=ds.points[:16], tag="noisy", origin=ds.origin)
    spec = CorruptionSpec(zeta=0.2, sigma_zeta=0.2)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=8)
    full = denoise_dataset(oracle, ds, spec, cfg, seed=4)
    part = denoise_dataset(oracle, head, spec, cfg, seed=4)
    assert np.array_equal(full.points[:16], part.points)


def test_identity_denoiser_widens_marginal():
    # zero score: the backward pass is pure diffusion, adding
    # sigma_zeta^2 - floor^2 to the input variance (the final jump is the
    # identity), so var = (1 + 0.04) + 0.04 up to the floor term
    net = IdentityDenoiser(SCHED)
    ds = _noisy(20000, seed=12)
    spec = CorruptionSpec(zeta=0.2, sigma_zeta=0.2)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=16)
    out = denoise_dataset(net, ds, spec, cfg, seed=6)
    want = ds.points.var() + (0.2 ** 2 - T_FLOOR ** 2)
    assert abs(out.points.var() - want) <= 3 * want * np.sqrt(2 / 20000)
    assert abs(out.points.mean()) <= 0.03


def test_nonfinite_state_raises_with_step_index():
    exploding = ConstantDenoiser(np.array([1e308]), SCHED)
    x = np.zeros((4, 1))
    with np.errstate(all="ignore"), pytest.raises(SolverNumericsError) as err:
        solve_backward(exploding, x, SolverConfig(t_start=0.2, t_end=0.0, steps=8), seed=0)
    assert 0 <= err.value.step < 8
