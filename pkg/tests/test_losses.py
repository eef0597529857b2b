import numpy as np
import pytest
from scipy.stats import kstest

from sfbdlab.analytic import ConstantDenoiser, GaussianDenoiser, GaussianSpec, IdentityDenoiser
from sfbdlab.data_io import Dataset, rng_stream
from sfbdlab.losses import (WEIGHT_UNIT, TimeSampler, consistency_loss, denoising_loss,
                            denoising_loss_pairs)
from sfbdlab.sampler import SolverConfig
from sfbdlab.schedule_sde import NoiseSchedule

SCHED = NoiseSchedule(sigma_max=10.0, T=10.0)


def test_time_sampler_bounds_and_log_uniformity():
    sampler = TimeSampler(t_min=2e-3, t_max=10.0)
    draws = sampler.sample(rng_stream(0, "ts"), 20000)
    assert draws.min() >= sampler.t_min and draws.max() <= sampler.t_max
    # log sigma_t uniform on [log t_min, log t_max]: KS at level 0.01
    lo, hi = np.log(sampler.t_min), np.log(sampler.t_max)
    stat = kstest(np.log(draws), "uniform", args=(lo, hi - lo))
    assert stat.pvalue > 0.01


def test_time_sampler_validation():
    with pytest.raises(ValueError):
        TimeSampler(t_min=0.0, t_max=1.0)
    with pytest.raises(ValueError):
        TimeSampler(t_min=2.0, t_max=1.0)


def test_identity_denoiser_expected_loss_is_dimension():
    # residual x_t - x0 = sigma eps, so w ||resid||^2 = ||eps||^2 with mean d
    x_star = 0.7
    batch = Dataset(points=np.full((10 ** 5, 1), x_star), tag="clean")
    net = IdentityDenoiser(SCHED)
    sampler = TimeSampler(t_min=0.05, t_max=5.0)
    lv = denoising_loss(net, batch, sampler, seed=3)
    assert abs(lv.value - 1.0) <= 0.02
    assert lv.grad is None  # analytic object carries no parameters


def test_constant_denoiser_zero_loss_on_its_point():
    # the loss-optimal denoiser for a one-point dataset reproduces the point,
    # so every residual vanishes
    x_star = np.array([0.7, -0.2])
    batch = Dataset(points=np.tile(x_star, (500, 1)), tag="clean")
    net = ConstantDenoiser(x_star, SCHED)
    lv = denoising_loss(net, batch, TimeSampler(t_min=0.05, t_max=5.0), seed=4)
    assert lv.value == 0.0


def test_denoising_loss_rejects_bad_batches():
    net = IdentityDenoiser(SCHED)
    sampler = TimeSampler(t_min=0.05, t_max=5.0)
    with pytest.raises(ValueError):
        denoising_loss(net, Dataset(points=np.zeros((0, 1)), tag="clean"), sampler, seed=0)
    with pytest.raises(ValueError):
        denoising_loss(net, Dataset(points=np.zeros((4, 1)), tag="noisy"), sampler, seed=0)


def test_denoising_loss_deterministic(small_random_net):
    batch = Dataset(points=rng_stream(1, "b").standard_normal((64, 1)), tag="denoised")
    sampler = TimeSampler(t_min=2e-3, t_max=10.0)
    a = denoising_loss(small_random_net, batch, sampler, seed=11)
    b = denoising_loss(small_random_net, batch, sampler, seed=11)
    assert a.value == b.value
    assert np.array_equal(a.grad, b.grad)


def test_pairs_loss_permutation_invariant(small_random_net):
    rng = rng_stream(2, "perm")
    x0 = rng.standard_normal((40, 1))
    t = np.exp(rng.uniform(np.log(0.01), np.log(5.0), 40))
    x_t = x0 + t[:, None] * rng.standard_normal((40, 1))
    perm = rng.permutation(40)
    a = denoising_loss_pairs(small_random_net, x0, x_t, t)
    b = denoising_loss_pairs(small_random_net, x0[perm], x_t[perm], t[perm])
    assert abs(a.value - b.value) <= 1e-12 * max(1.0, abs(a.value))
    np.testing.assert_allclose(a.grad, b.grad, rtol=1e-9, atol=1e-12)


def _noisy_gaussian(n, sigma_zeta=0.2, seed=5):
    rng = rng_stream(seed, "noisy-src")
    pts = rng.standard_normal((n, 1)) + sigma_zeta * rng.standard_normal((n, 1))
    return Dataset(points=pts, tag="noisy", origin="gaussian(d=1)+noise")


def test_consistency_loss_validates_times(small_random_net):
    noisy = _noisy_gaussian(32)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=4)
    with pytest.raises(ValueError):
        consistency_loss(small_random_net, noisy, 0.1, 0.1, cfg, seed=0)
    with pytest.raises(ValueError):
        consistency_loss(small_random_net, noisy, 0.2, 0.1, cfg, seed=0)
    with pytest.raises(ValueError):
        consistency_loss(small_random_net, noisy, 0.0, 0.5, cfg, seed=0)  # s above tau
    clean = Dataset(points=noisy.points, tag="clean")
    with pytest.raises(ValueError):
        consistency_loss(small_random_net, clean, 0.0, 0.1, cfg, seed=0)


def test_consistency_loss_deterministic(small_random_net):
    noisy = _noisy_gaussian(64)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=4)
    a = consistency_loss(small_random_net, noisy, 0.0, 0.1, cfg, seed=9, m=2)
    b = consistency_loss(small_random_net, noisy, 0.0, 0.1, cfg, seed=9, m=2)
    assert a.value == b.value
    assert np.array_equal(a.grad, b.grad)


def test_consistency_at_r0_matches_reconstruction_on_shared_draws(small_random_net):
    # single inner draw: the two estimates coincide and the inner endpoint
    # contributes no gradient (identity at zero), so gradients agree too
    noisy = _noisy_gaussian(128)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=6)
    c = consistency_loss(small_random_net, noisy, 0.0, 0.1, cfg, seed=21, m=1)
    d = denoising_loss_pairs(small_random_net, c.inner_values[0], c.x_s, 0.1,
                             weight=WEIGHT_UNIT)
    assert abs(c.value - d.value) <= 1e-12 * max(1.0, abs(c.value))
    rel = np.abs(c.grad - d.grad) / np.maximum(np.abs(d.grad), 1e-8)
    assert rel.max() <= 1e-5


def test_consistency_loss_at_noise_floor_for_exact_denoiser():
    # with the posterior-mean denoiser the inner mean is an unbiased m-draw
    # estimate of D(x_s, s); the loss should sit at the Monte-Carlo floor
    oracle = GaussianDenoiser(GaussianSpec.iso(0.0, 1.0), SCHED)
    noisy = _noisy_gaussian(512, seed=6)
    cfg = SolverConfig(t_start=0.2, t_end=0.0, steps=24)
    res = consistency_loss(oracle, noisy, 0.0, 0.1, cfg, seed=33, m=8)
    assert res.grad is None
    assert res.mc_floor is not None
    # floor oracle: Var(x0 | x_s) / m = (s^2/(1+s^2)) / m at s = 0.1
    analytic_floor = (0.01 / 1.01) / 8
    assert res.mc_floor == pytest.approx(analytic_floor, rel=0.2)
    assert res.value <= 1.5 * res.mc_floor + 3.0 * res.value_stderr
