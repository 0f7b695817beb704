import json

import numpy as np
import pytest
from conftest import central_diff_gradient, rel_err

from slowmodes.errors import (ConfigurationError, FrozenBiasError,
                              InvalidInputError)
from slowmodes.potentials import (AnalyticBias, DoubleWellSim, DoubleWellTarget,
                                  Harmonic, MetadynamicsBias, MuellerBrown,
                                  NoBias, SumPotential, bias_from_config,
                                  deposit_gaussian, double_well_bias,
                                  eval_bias, eval_potential, load_bias,
                                  potential_from_config, save_bias)

ALL_POTENTIALS = [
    (DoubleWellTarget(), [(-1.2,), (1.2,)]),
    (DoubleWellSim(), [(-1.2,), (1.2,)]),
    (Harmonic(stiffness=2.5, dim=3, center=[0.1, -0.2, 0.3]), [(-3,) * 3, (3,) * 3]),
    (MuellerBrown(scale=0.075), [(-1.7, -0.5), (1.2, 2.2)]),
    (SumPotential([(1.0, MuellerBrown(scale=0.075)),
                   (0.5, Harmonic(stiffness=4.0, dim=2, center=[-0.2, 0.8]))]),
     [(-1.7, -0.5), (1.2, 2.2)]),
]


def test_double_well_values_at_origin():
    # barrier form: the wells sit near +-0.35 and the Gaussian bump is the
    # barrier, so the sign of the bump coefficient is positive
    assert DoubleWellTarget().value(np.array([0.0])) == pytest.approx(6.0)
    assert DoubleWellSim().value(np.array([0.0])) == pytest.approx(2.0)


def test_double_well_is_bistable():
    x = np.linspace(-1.1, 1.1, 2001)[:, None]
    u = DoubleWellTarget().value(x)
    mid = len(x) // 2
    assert u[mid] > u.min() + 5.0  # barrier ~6 above the wells
    left, right = u[:mid], u[mid:]
    assert left.argmin() not in (0, mid - 1)
    assert right.argmin() not in (0, mid - 1)


def test_harmonic_identity_case():
    h = Harmonic()
    v, g = eval_potential(h, np.array([2.0]))
    assert v == pytest.approx(2.0)
    assert g[0] == pytest.approx(2.0)


def test_mueller_brown_global_minimum():
    # frozen from numerical minimization of the standard constants
    mb = MuellerBrown()
    xmin = np.array([-0.5582236346, 1.4417258418])
    v, g = eval_potential(mb, xmin)
    assert v == pytest.approx(-146.6995172, abs=1e-3)
    assert np.linalg.norm(g) <= 1e-3


@pytest.mark.parametrize("potential,box", ALL_POTENTIALS,
                         ids=lambda p: getattr(p, "kind", None))
def test_gradients_match_finite_differences(potential, box, rng):
    lo, hi = np.asarray(box[0], float), np.asarray(box[1], float)
    X = rng.uniform(lo, hi, size=(100, len(lo)))
    for x in X:
        g = potential.gradient(x)
        fd = central_diff_gradient(lambda p: float(potential.value(p)), x)
        scale = max(1.0, np.abs(g).max(), np.abs(fd).max())
        assert np.abs(g - fd).max() / scale <= 1e-5


def test_batched_evaluation_matches_pointwise(rng):
    mb = MuellerBrown(scale=0.075)
    X = rng.uniform(-1.0, 1.0, size=(40, 2))
    v, g = mb.value_and_grad(X)
    for i in range(len(X)):
        assert v[i] == pytest.approx(float(mb.value(X[i])), rel=1e-14)
        np.testing.assert_allclose(g[i], mb.gradient(X[i]), rtol=1e-14)


def test_sim_minus_target_is_the_bias():
    x = np.linspace(-1.3, 1.3, 501)[:, None]
    diff = DoubleWellSim().value(x) - DoubleWellTarget().value(x)
    expected = -4.0 * np.exp(-80.0 * x[:, 0] ** 2)
    np.testing.assert_allclose(diff, expected, rtol=0, atol=1e-14)
    vb = double_well_bias()
    np.testing.assert_allclose(vb.value(x), expected, rtol=0, atol=1e-14)


def test_eval_potential_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        eval_potential(Harmonic(), np.array([np.nan]))
    with pytest.raises(ConfigurationError):
        eval_potential(Harmonic(dim=2), np.array([1.0]))
    with pytest.raises(ConfigurationError):
        potential_from_config({"kind": "nope"})


def test_potential_config_roundtrip():
    for potential, _ in ALL_POTENTIALS:
        clone = potential_from_config(potential.to_config())
        x = np.full(potential.dim, 0.3)
        assert clone.value(x) == pytest.approx(float(potential.value(x)), rel=1e-15)


# ---------------------------------------------------------------------------
# biases


def test_single_gaussian_bias_value():
    b = MetadynamicsBias(height=1.0, sigma=0.5, pace=10, freeze_step=100, dim=1)
    b.deposit([0.0], step=10)
    v, g = eval_bias(b, np.array([0.0]))
    assert v == pytest.approx(1.0)
    np.testing.assert_allclose(g, 0.0, atol=1e-15)


def test_none_bias_is_zero(rng):
    b = NoBias()
    x = rng.standard_normal(3)
    v, g = eval_bias(b, x)
    assert v == 0.0
    np.testing.assert_array_equal(g, np.zeros(3))


def test_repeated_deposits_add():
    b = MetadynamicsBias(height=1.0, sigma=0.5, pace=10, freeze_step=1000, dim=1)
    for k in range(3):
        deposit_gaussian(b, [0.0], step=10 * (k + 1))
    assert b.value(np.array([0.0])) == pytest.approx(3.0)


def test_deposit_after_freeze_rejected():
    b = MetadynamicsBias(height=1.0, sigma=0.5, pace=10, freeze_step=50, dim=1)
    with pytest.raises(FrozenBiasError):
        b.deposit([0.0], step=51)
    with pytest.raises(ConfigurationError):
        deposit_gaussian(NoBias(), [0.0], step=1)


def test_metadynamics_bounds_and_monotonicity(rng):
    b = MetadynamicsBias(height=0.5, sigma=0.2, pace=1, freeze_step=10**6, dim=2)
    xq = rng.uniform(-1, 1, size=(50, 2))
    prev = b.value(xq)
    for k in range(20):
        b.deposit(rng.uniform(-1, 1, size=2), step=k + 1)
        cur = b.value(xq)
        assert np.all(cur >= prev - 1e-15)  # non-decreasing in deposits
        assert np.all(cur >= 0.0)
        assert np.all(cur <= 0.5 * b.n_centers + 1e-12)
        prev = cur


def test_bias_gradients_match_finite_differences(rng):
    b = MetadynamicsBias(height=0.7, sigma=0.3, pace=1, freeze_step=100, dim=2)
    for k in range(8):
        b.deposit(rng.uniform(-1, 1, size=2), step=k + 1)
    for x in rng.uniform(-1.5, 1.5, size=(100, 2)):
        g = b.gradient(x)
        fd = central_diff_gradient(lambda p: float(b.value(p)), x)
        assert np.max(rel_err(g, fd, floor=1e-6)) <= 1e-5


def test_bias_sigma_validation():
    with pytest.raises(ConfigurationError):
        MetadynamicsBias(height=1.0, sigma=0.0, pace=10, freeze_step=10, dim=1)


def test_bias_json_roundtrip(tmp_path, rng):
    b = MetadynamicsBias(height=0.5, sigma=0.1, pace=500, freeze_step=300000, dim=2)
    for k in range(5):
        b.deposit(rng.uniform(-1, 1, size=2), step=500 * (k + 1))
    path = tmp_path / "bias.json"
    save_bias(b, path)
    b2 = load_bias(path)
    assert isinstance(b2, MetadynamicsBias)
    np.testing.assert_array_equal(b2.centers, b.centers)
    assert (b2.height, b2.sigma, b2.pace, b2.freeze_step) == (0.5, 0.1, 500, 300000)
    doc = json.loads(path.read_text())
    assert doc["kind"] == "metadynamics"

    static = AnalyticBias(double_well_bias())
    save_bias(static, tmp_path / "static.json")
    s2 = load_bias(tmp_path / "static.json")
    x = np.array([[0.2]])
    assert s2.value(x)[0] == pytest.approx(float(static.value(x)[0]), rel=1e-15)
