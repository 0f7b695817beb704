import numpy as np
import pytest
from conftest import rel_err

from slowmodes.errors import ConfigurationError
from slowmodes.features import (FourierDictionary, MlpDictionary, evaluate,
                                load_dictionary, make_fourier, make_mlp,
                                make_rbf, mlp_forward_jac,
                                rbf_centers_from_data, save_dictionary)


def fd_jacobian(dic, X, h=1e-6):
    out = np.empty((X.shape[0], dic.m, X.shape[1]))
    for k in range(X.shape[1]):
        Xp, Xm = X.copy(), X.copy()
        Xp[:, k] += h
        Xm[:, k] -= h
        out[:, :, k] = (dic.evaluate(Xp).values - dic.evaluate(Xm).values) / (2 * h)
    return out


def test_rbf_peak_at_center():
    dic = make_rbf(np.array([[0.3, -0.2]]), lengthscale=0.5)
    fe = evaluate(dic, np.array([[0.3, -0.2]]))
    assert fe.values[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(fe.jacobians[0, 0], 0.0, atol=1e-15)


def test_constant_feature_column():
    dic = make_rbf(np.array([[0.0], [1.0]]), lengthscale=0.5, include_constant=True)
    assert dic.m == 3
    fe = evaluate(dic, np.linspace(-1, 1, 7)[:, None])
    np.testing.assert_array_equal(fe.values[:, 0], np.ones(7))
    np.testing.assert_array_equal(fe.jacobians[:, 0, :], np.zeros((7, 1)))


def test_rbf_lengthscale_validation():
    with pytest.raises(ConfigurationError):
        make_rbf(np.array([[0.0]]), lengthscale=0.0)


@pytest.mark.parametrize("make", [
    lambda: make_rbf(np.random.default_rng(0).uniform(-1, 1, (7, 2)), 0.4,
                     include_constant=True),
    lambda: make_fourier(d=2, m=9, lengthscale=0.7, seed=1, include_constant=True),
    lambda: make_mlp(d=2, heads=5, hidden=(8, 6), seed=2),
])
def test_jacobians_match_finite_differences(make, rng):
    dic = make()
    X = rng.uniform(-1.5, 1.5, size=(100, 2))
    fe = evaluate(dic, X)
    fd = fd_jacobian(dic, X)
    scale = max(1.0, np.abs(fe.jacobians).max())
    assert np.abs(fe.jacobians - fd).max() / scale <= 1e-5


def test_mlp_random_20_features_jacobian(rng):
    dic = make_mlp(d=3, heads=20, hidden=(16,), seed=7)
    X = rng.standard_normal((50, 3))
    fe = mlp_forward_jac(dic, X)
    fd = fd_jacobian(dic, X)
    err = np.abs(fe.jacobians - fd) / np.maximum(np.abs(fd), 1.0)
    assert err.max() <= 1e-5


def test_mlp_zero_weights_output_bias():
    weights = [np.zeros((3, 4, 2)), np.zeros((3, 1, 4))]
    biases = [np.zeros((3, 4)), np.full((3, 1), 0.7)]
    dic = MlpDictionary(weights, biases)
    fe = dic.evaluate(np.random.default_rng(0).standard_normal((10, 2)))
    np.testing.assert_allclose(fe.values, 0.7)
    np.testing.assert_array_equal(fe.jacobians, np.zeros((10, 3, 2)))


def test_mlp_single_linear_layer_jacobian_is_weight():
    w = np.array([[[1.5, -2.0]], [[0.3, 0.4]]])  # 2 heads, 1 output, d=2
    dic = MlpDictionary([w], [np.zeros((2, 1))])
    X = np.random.default_rng(1).standard_normal((6, 2))
    fe = dic.evaluate(X)
    np.testing.assert_allclose(fe.values, X @ w[:, 0, :].T, rtol=1e-14)
    for i in range(6):
        np.testing.assert_allclose(fe.jacobians[i], w[:, 0, :], rtol=1e-14)


def test_mlp_head_shape_convention():
    dic = make_mlp(d=2, heads=4, hidden=(20, 20), seed=0)
    fe = dic.evaluate(np.zeros((3, 2)))
    assert fe.values.shape == (3, 4)
    assert fe.jacobians.shape == (3, 4, 2)
    assert dic.widths == [20, 20]


def test_mlp_outputs_bounded_on_probe(rng):
    # tanh hidden layers keep outputs within the output-layer weight budget
    dic = make_mlp(d=2, heads=3, hidden=(10, 10), seed=3)
    X = rng.uniform(-50, 50, size=(10**4, 2))
    fe = dic.evaluate(X)
    w_out, b_out = dic.weights[-1], dic.biases[-1]
    bound = np.abs(w_out).sum(axis=(1, 2)) + np.abs(b_out).sum(axis=1)
    assert np.all(np.abs(fe.values) <= bound[None, :] + 1e-12)


def test_dimension_mismatch():
    dic = make_mlp(d=3, heads=2, seed=0)
    with pytest.raises(ConfigurationError):
        dic.evaluate(np.zeros((4, 2)))
    with pytest.raises(ConfigurationError):
        mlp_forward_jac(make_rbf(np.array([[0.0]]), 1.0), np.zeros((2, 1)))


def test_json_roundtrip_exact(tmp_path, rng):
    dics = [
        make_rbf(rng.uniform(-1, 1, (5, 2)), 0.37, include_constant=True),
        make_fourier(d=2, m=6, lengthscale=0.9, seed=4),
        make_mlp(d=2, heads=3, hidden=(7, 5), seed=5, include_constant=True),
    ]
    X = rng.standard_normal((20, 2))
    for dic in dics:
        path = tmp_path / f"{dic.kind}.json"
        save_dictionary(dic, path)
        back = load_dictionary(path)
        a, b = dic.evaluate(X), back.evaluate(X)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(a.jacobians, b.jacobians)
        assert back.m == dic.m


def test_center_selection_coverage(rng):
    # stratified subsample: every data point within 3 lengthscales of a center
    x = np.concatenate([rng.normal(-0.35, 0.12, 6000), rng.normal(0.35, 0.12, 4000)])
    X = x[:, None]
    centers = rbf_centers_from_data(X, 200)
    assert centers.shape[0] == 200
    ell = 0.1
    dmin = np.min(np.abs(X - centers[:, 0][None, :]), axis=1)
    assert dmin.max() <= 3 * ell
    # spans the sampled range
    assert centers.min() <= np.quantile(x, 0.001) + 0.1
    assert centers.max() >= np.quantile(x, 0.999) - 0.1


def test_center_selection_2d(rng):
    X = rng.uniform(-1, 1, size=(10**4, 2))
    centers = rbf_centers_from_data(X, 64)
    assert centers.shape == (64, 2)
    d = np.linalg.norm(X[:, None, :] - centers[None], axis=-1).min(axis=1)
    assert d.max() <= 0.6
