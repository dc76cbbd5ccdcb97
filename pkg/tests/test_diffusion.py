import numpy as np
import pytest

import vico.numerics as N
from vico import diffusion as D


def test_build_schedule_single_step():
    sched = D.build_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(sched.alpha_bar, [0.9])


def test_build_schedule_matches_direct_product():
    sched = D.build_schedule(1000, 1e-4, 2e-2)
    direct = 1.0
    for b in np.linspace(1e-4, 2e-2, 1000):
        direct *= 1.0 - b
    assert abs(sched.alpha_bar[999] - direct) < 1e-12
    assert np.all(np.diff(sched.alpha_bar) < 0)


def test_build_schedule_validation():
    with pytest.raises(ValueError):
        D.build_schedule(10, 0.5, 0.1)
    with pytest.raises(ValueError):
        D.build_schedule(0, 1e-4, 2e-2)
    with pytest.raises(ValueError):
        D.build_schedule(10, 0.0, 0.1)


def test_q_sample_limit_cases():
    sched = D.build_schedule(10, 1e-4, 2e-2)
    z0 = N.const(np.full((1, 1, 2, 2), 1.0, dtype=np.float32))
    eps = N.const(np.zeros((1, 1, 2, 2), dtype=np.float32))
    # eps = 0 -> pure rescaling by sqrt(alpha_bar)
    zt = D.q_sample(z0, 3, eps, sched)
    np.testing.assert_allclose(zt.data, np.sqrt(sched.alpha_bar[3]), rtol=1e-6)
    # alpha_bar -> 1 limit: z_t == z0
    sched.alpha_bar = np.ones_like(sched.alpha_bar)
    np.testing.assert_allclose(D.q_sample(z0, 3, eps, sched).data, z0.data)


def test_q_sample_closed_form_value():
    sched = D.build_schedule(5, 0.1, 0.3)
    sched.alpha_bar = np.full_like(sched.alpha_bar, 0.25)
    z0 = N.const(np.ones((1, 1, 1, 1), dtype=np.float64))
    eps = N.const(np.ones((1, 1, 1, 1), dtype=np.float64))
    zt = D.q_sample(z0, 2, eps, sched)
    assert zt.data.reshape(-1)[0] == pytest.approx(0.5 + np.sqrt(0.75), abs=1e-9)


def test_q_sample_range_and_shape_checks():
    sched = D.build_schedule(10, 1e-4, 2e-2)
    z0 = N.const(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ValueError, match="out of range"):
        D.q_sample(z0, 10, N.const(np.zeros((1, 1, 2, 2))), sched)
    with pytest.raises(N.ShapeError):
        D.q_sample(z0, 1, N.const(np.zeros((1, 1, 2, 3))), sched)


def test_denoising_loss_values():
    e = N.const(np.array([1.0, 1.0]))
    assert D.denoising_loss(e, e).item() == 0.0
    z = N.const(np.zeros(2))
    assert D.denoising_loss(e, z).item() == pytest.approx(1.0)
    # joint permutation invariance
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal(6), rng.standard_normal(6)
    perm = rng.permutation(6)
    l1 = D.denoising_loss(N.const(a), N.const(b)).item()
    l2 = D.denoising_loss(N.const(a[perm]), N.const(b[perm])).item()
    assert l1 == pytest.approx(l2, rel=1e-12)


def _oracle_eps(z0, z_t, t, sched):
    ab = sched.alpha_bar[t]
    return ((z_t - np.sqrt(ab) * z0) / np.sqrt(1.0 - ab)).astype(z_t.dtype)


def test_ddim_single_step_inverts_q_sample():
    # Algebraic identity; measured at a mid-schedule t where float32
    # rounding is not amplified by a huge 1/sqrt(alpha_bar).
    sched = D.build_schedule(1000, 1e-4, 2e-2)
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    t = 300
    z_t = D.q_sample(N.const(z0), t, N.const(eps), sched)
    z_back = D.ddim_step(z_t, N.const(eps), t, -1, sched)
    assert np.max(np.abs(z_back.data - z0)) < 1e-6


def test_ddim_zero_noise_is_rescaling():
    sched = D.build_schedule(100, 1e-4, 2e-2)
    z_t = N.const(np.full((1, 1, 2, 2), 2.0, dtype=np.float64))
    out = D.ddim_step(z_t, N.const(np.zeros_like(z_t.data)), 50, 20, sched)
    factor = np.sqrt(sched.alpha_bar[20] / sched.alpha_bar[50])
    np.testing.assert_allclose(out.data, 2.0 * factor, rtol=1e-12)


def test_ddim_50_step_trajectory_recovers_z0():
    sched = D.build_schedule(1000, 1e-4, 2e-2)
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    ts = D.ddim_timesteps(1000, 50)
    z = D.q_sample(N.const(z0), ts[0], N.const(eps), sched)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else -1
        eps_hat = N.const(_oracle_eps(z0, z.data, t, sched))
        z = D.ddim_step(z, eps_hat, t, t_prev, sched)
    assert np.max(np.abs(z.data - z0)) < 1e-5


def test_ddim_ordering_violation():
    sched = D.build_schedule(10, 1e-4, 2e-2)
    z = N.const(np.zeros((1, 1, 1, 1)))
    with pytest.raises(ValueError, match="t_prev"):
        D.ddim_step(z, z, 3, 5, sched)


def test_ddim_timesteps_grid():
    ts = D.ddim_timesteps(1000, 50)
    assert len(ts) == 50 and ts[0] == 980 and ts[-1] == 0
    assert D.ddim_timesteps(10, 1) == [0]
