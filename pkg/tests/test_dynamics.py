import numpy as np
import pytest

from slowmodes.dynamics import SimulationParams, Trajectory, em_step, simulate
from slowmodes.errors import ConfigurationError, SimulationDivergenceError
from slowmodes.potentials import (AnalyticBias, DoubleWellSim, Harmonic,
                                  MetadynamicsBias, NoBias, double_well_bias)


def test_em_step_zero_noise_is_gradient_descent():
    # harmonic U = x^2/2 at x=1, dt=0.1: pure descent to 0.9
    x = np.array([1.0])
    out = em_step(x, np.array([1.0]), dt=0.1, beta=1.0, noise=np.zeros(1))
    assert out[0] == pytest.approx(0.9)


def test_em_step_pure_noise():
    noise = np.array([0.37, -1.2])
    out = em_step(np.zeros(2), np.zeros(2), dt=0.05, beta=2.0, noise=noise)
    np.testing.assert_allclose(out, np.sqrt(2 * 0.05 / 2.0) * noise, rtol=1e-15)


def test_free_diffusion_increment_variance():
    # U = 0: increments are iid N(0, 2 dt / beta); sample variance within
    # 3 standard errors of the truth (chi-square: se ~ var * sqrt(2/(n-1)))
    beta, dt, n = 1.5, 1e-3, 10**5
    params = SimulationParams(beta=beta, dt=dt, n_steps=n, x0=[0.0], seed=11)
    traj = simulate(Harmonic(stiffness=1e-12), NoBias(), params)
    inc = np.diff(traj.states[:, 0])
    target = 2 * dt / beta
    se = target * np.sqrt(2.0 / (len(inc) - 1))
    assert abs(inc.var() - target) <= 3 * se


def test_simulate_deterministic_given_seed():
    params = SimulationParams(beta=1.0, dt=1e-3, n_steps=5000, x0=[0.3], seed=5)
    a = simulate(DoubleWellSim(), AnalyticBias(double_well_bias()), params)
    b = simulate(DoubleWellSim(), AnalyticBias(double_well_bias()), params)
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.bias_values, b.bias_values)


class _ZeroNoise:
    def standard_normal(self, shape):
        return np.zeros(shape)


def test_zero_diffusion_limit_is_explicit_descent(monkeypatch):
    # noise forced to zero: the integrator is exact explicit gradient descent
    import slowmodes.dynamics as dyn

    monkeypatch.setattr(dyn.np.random, "default_rng", lambda seed: _ZeroNoise())
    pot = Harmonic(stiffness=2.0)
    params = SimulationParams(beta=1.0, dt=0.01, n_steps=50, x0=[1.0], seed=0)
    traj = simulate(pot, NoBias(), params)
    x = np.array([1.0])
    path = []
    for k in range(50):
        x = x - pot.gradient(x) * 0.01
        path.append(x[0])
    np.testing.assert_array_equal(traj.states[:, 0], np.array(path))


def test_recorded_bias_matches_snapshot_at_recording_time():
    # recompute each recorded value with the centers deposited by that step
    bias = MetadynamicsBias(height=0.3, sigma=0.2, pace=7, freeze_step=150, dim=1)
    params = SimulationParams(beta=2.0, dt=1e-3, n_steps=400, x0=[0.0], seed=3,
                              save_stride=5)
    traj = simulate(DoubleWellSim(), bias, params)
    all_centers = bias.centers
    for i in range(traj.n):
        step = traj.steps[i]
        n_dep = min(step // bias.pace, bias.freeze_step // bias.pace)
        snap = MetadynamicsBias(height=0.3, sigma=0.2, pace=7, freeze_step=150,
                                dim=1, centers=all_centers[:n_dep])
        assert traj.bias_values[i] == snap.value(traj.states[i])


def test_deposits_stop_at_freeze_step():
    bias = MetadynamicsBias(height=0.3, sigma=0.2, pace=10, freeze_step=100, dim=1)
    params = SimulationParams(beta=2.0, dt=1e-3, n_steps=500, x0=[0.0], seed=3)
    simulate(DoubleWellSim(), bias, params)
    assert bias.n_centers == 10  # steps 10, 20, ..., 100


def test_divergence_guard_reports_step():
    # negative stiffness blows up immediately
    pot = Harmonic(stiffness=1.0, center=[0.0])
    unstable = SimulationParams(beta=1.0, dt=3.0, n_steps=1000, x0=[1.0], seed=1,
                                domain_radius=10.0)
    with pytest.raises(SimulationDivergenceError) as err:
        simulate(pot, NoBias(), unstable)
    assert err.value.step >= 1


def test_dimension_mismatch_rejected():
    params = SimulationParams(beta=1.0, dt=1e-3, n_steps=10, x0=[0.0, 0.0], seed=0)
    with pytest.raises(ConfigurationError):
        simulate(Harmonic(dim=1), NoBias(), params)


def test_param_validation():
    with pytest.raises(ConfigurationError):
        SimulationParams(beta=0.0, dt=1e-3, n_steps=10, x0=[0.0], seed=0)
    with pytest.raises(ConfigurationError):
        SimulationParams(beta=1.0, dt=1e-3, n_steps=0, x0=[0.0], seed=0)


def test_save_stride_and_times():
    params = SimulationParams(beta=1.0, dt=0.01, n_steps=100, x0=[0.0], seed=0,
                              save_stride=10)
    traj = simulate(Harmonic(), NoBias(), params)
    assert traj.n == 10
    np.testing.assert_array_equal(traj.steps, np.arange(10, 101, 10))
    np.testing.assert_allclose(traj.times, traj.steps * 0.01, rtol=1e-15)


def test_csv_roundtrip_bitexact(tmp_path):
    params = SimulationParams(beta=1.7, dt=1e-3, n_steps=300, x0=[0.1, -0.2],
                              seed=9, save_stride=3)
    bias = MetadynamicsBias(height=0.2, sigma=0.3, pace=20, freeze_step=200, dim=2)
    traj = simulate(Harmonic(stiffness=1.0, dim=2), bias, params)
    path = tmp_path / "traj.csv"
    traj.save_csv(path)
    back = Trajectory.load_csv(path)
    np.testing.assert_array_equal(back.states, traj.states)
    np.testing.assert_array_equal(back.times, traj.times)
    np.testing.assert_array_equal(back.bias_values, traj.bias_values)
    np.testing.assert_array_equal(back.steps, traj.steps)
    assert back.meta["beta"] == 1.7 and back.meta["dt"] == 1e-3 and back.meta["seed"] == 9
    header = path.read_text().splitlines()[0]
    assert header.startswith("# d=2 beta=")


@pytest.mark.slow
def test_double_well_sim_crosses_barrier():
    # beta=3 on the lowered barrier still mixes: >= 10 sign changes of x
    params = SimulationParams(beta=3.0, dt=1e-3, n_steps=10**6, x0=[0.35], seed=2024)
    traj = simulate(DoubleWellSim(), NoBias(), params)
    x = traj.states[:, 0]
    crossings = int(np.sum(np.sign(x[1:]) * np.sign(x[:-1]) < 0))
    assert crossings >= 10
