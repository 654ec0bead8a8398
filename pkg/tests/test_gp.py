import tracemalloc
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import dense_loglik, model_draw, random_instance
from gpcsd import ElectrodeArray, ForwardOperator, Hyperparameters, LfpDataset, log_marginal_likelihood, predict
from gpcsd.errors import NumericalError, ValidationError
from gpcsd.forward import QuadratureGrid
from gpcsd.gp import KroneckerModel, log_map_objective, mean_loglik, predict_lfp
from gpcsd.kernels import spatial_lfp_cov, temporal_matrices
from gpcsd.optimize import PriorSet, default_priors

seeds = st.integers(0, 2**32 - 1)


@given(seeds)
def test_structured_loglik_equals_dense(seed):
    theta, ds, fwd = random_instance(np.random.default_rng(seed))
    assert abs(log_marginal_likelihood(theta, ds, fwd) - dense_loglik(theta, ds, fwd)) < 1e-8


def test_example_m4_t5_two_trials(rng):
    theta = Hyperparameters(150.0, (200.0,), 1.5, 3.0, 0.5, 1.0, 0.3)
    ds, fwd = model_draw(theta, ElectrodeArray(np.arange(4) * 100.0), 5, 2, rng)
    assert log_marginal_likelihood(theta, ds, fwd) == pytest.approx(dense_loglik(theta, ds, fwd), abs=1e-8)


@given(seeds)
def test_structured_inverse_identity(seed):
    theta, ds, fwd = random_instance(np.random.default_rng(seed))
    Ks = spatial_lfp_cov(theta, fwd, ds.electrodes)
    Kt = temporal_matrices(theta, ds.times).total
    model = KroneckerModel.from_matrices(Ks, Kt, theta.noise_var)
    S = np.kron(model.Ks, model.Kt) + theta.noise_var * np.eye(Ks.shape[0] * Kt.shape[0])
    inv = model.dense_inverse()
    # relative to the inverse's scale, 1 / noise
    assert np.max(np.abs(inv - np.linalg.inv(S))) * theta.noise_var < 1e-8
    np.testing.assert_allclose(model.Qs.T @ model.Qs, np.eye(len(Ks)), atol=1e-10)
    np.testing.assert_allclose(model.Qt.T @ model.Qt, np.eye(len(Kt)), atol=1e-10)
    assert np.all(model.D > 0)


def test_large_noise_tends_to_iid(rng):
    theta, ds, fwd = random_instance(rng)
    big = theta.replace(noise_var=1e18)
    iid = stats.norm(scale=np.sqrt(1e18)).logpdf(ds.lfp).sum()
    assert log_marginal_likelihood(big, ds, fwd) == pytest.approx(iid, rel=1e-8)


def test_duplicated_trials_double_loglik(rng):
    theta, ds, fwd = random_instance(rng)
    dup = LfpDataset(np.concatenate([ds.lfp, ds.lfp]), ds.electrodes, ds.sample_rate_hz)
    assert log_marginal_likelihood(theta, dup, fwd) == pytest.approx(2 * log_marginal_likelihood(theta, ds, fwd),
                                                                      rel=1e-12)


def test_nan_data_and_non_psd():
    with pytest.raises(ValidationError):
        LfpDataset(np.full((1, 3, 4), np.nan), ElectrodeArray([0.0, 1.0, 2.0]), 1000.0)
    with pytest.raises(NumericalError):
        KroneckerModel.from_matrices(np.diag([1.0, -1.0, 2.0]), np.eye(3), 0.1)


def test_flat_prior_objective_is_loglik(rng):
    theta, ds, fwd = random_instance(rng)
    flat = PriorSet(1, {}, {})
    assert log_map_objective(theta, ds, fwd, flat) == log_marginal_likelihood(theta, ds, fwd)
    pri = default_priors(ds)
    outside = theta.replace(R=pri.bounds["R"][1] * 2)
    assert log_map_objective(outside, ds, fwd, pri) == -np.inf


def test_prior_lower_at_quantile_than_median(rng):
    _, ds, _ = random_instance(rng)
    pri = default_priors(ds)
    ig = pri.priors["ell_s"]
    assert ig.logpdf(pri.quantiles["ell_s"][0]) < ig.logpdf(ig.ppf(0.5))


@given(seeds)
def test_objective_gradient_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    theta, ds, fwd = random_instance(rng, m_range=(4, 9), t_range=(10, 17), n_trials=3)
    pri = default_priors(ds)
    assert pri.in_support(theta)
    _, g = log_map_objective(theta, ds, fwd, pri, return_grad=True)
    v = theta.to_vector()
    fd = np.empty_like(v)
    for i in range(v.size):
        h = 1e-5 * v[i]
        up, dn = v.copy(), v.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (log_map_objective(Hyperparameters.from_vector(up), ds, fwd, pri)
                 - log_map_objective(Hyperparameters.from_vector(dn), ds, fwd, pri)) / (2 * h)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-4


def _pred_setup(rng, n_trials=3):
    theta, ds, fwd = random_instance(rng, m_range=(5, 8), t_range=(6, 10), n_trials=n_trials)
    grid = np.linspace(ds.electrodes.coords[0], ds.electrodes.coords[-1], 9)
    return theta, ds, fwd, grid


def test_predict_zero_data_and_linearity(rng):
    theta, ds, fwd, grid = _pred_setup(rng)
    zero = LfpDataset(np.zeros_like(ds.lfp), ds.electrodes, ds.sample_rate_hz)
    np.testing.assert_array_equal(predict(theta, zero, fwd, grid).total, 0.0)
    p1 = predict(theta, ds, fwd, grid)
    p2 = predict(theta, ds.scaled(-2.5), fwd, grid)
    np.testing.assert_allclose(p2.total, -2.5 * p1.total, rtol=1e-10, atol=1e-12 * np.abs(p1.total).max())


@given(seeds)
def test_split_sums_to_total(seed):
    theta, ds, fwd, grid = _pred_setup(np.random.default_rng(seed))
    mean = lambda z, t: np.sin(np.asarray(z)[:, None] / 300.0) * np.cos(np.asarray(t)[None, :] / 3.0)
    for m in (None, mean):
        p = predict(theta, ds, fwd, grid, mean=m)
        assert np.max(np.abs(p.mean + p.slow + p.fast - p.total)) <= 1e-10 * max(1.0, np.abs(p.total).max())


def test_trial_permutation_equivariance(rng):
    theta, ds, fwd, grid = _pred_setup(rng, n_trials=4)
    perm = np.array([2, 0, 3, 1])
    a = predict(theta, ds, fwd, grid).total
    b = predict(theta, ds.subset(perm), fwd, grid).total
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-11 * np.abs(a).max())


def test_predict_outside_bounds_warns(rng):
    theta, ds, fwd, _ = _pred_setup(rng)
    with pytest.warns(UserWarning, match="outside the integration"):
        predict(theta, ds, fwd, [ds.electrodes.coords[-1] + 500.0])


def test_predict_lfp_noise_limits(rng):
    theta, ds, fwd, _ = _pred_setup(rng)
    tiny = predict_lfp(theta.replace(noise_var=1e-10), ds, fwd)
    np.testing.assert_allclose(tiny.total, ds.lfp, atol=1e-6 * np.abs(ds.lfp).max())
    mean = lambda z, t: np.outer(np.cos(np.asarray(z) / 200.0), np.ones(len(t)))
    huge = predict_lfp(theta.replace(noise_var=1e20), ds, fwd, mean=mean)
    Amu = fwd.matrix(ds.electrodes, theta.R) @ mean(fwd.grid.nodes, ds.times)
    np.testing.assert_allclose(huge.total, np.broadcast_to(Amu, huge.total.shape), rtol=1e-6)


def test_predicted_csd_projects_to_predicted_lfp():
    from gpcsd.simulate import dipole_study, load_study

    spec = load_study("dipole")
    _, ds, _ = dipole_study(spec)
    fwd = ForwardOperator.for_electrodes(ds.electrodes, n_per_dim=100)
    theta = Hyperparameters(150.0, (200.0,), 17.5, 4.5, 1e-4, 1.0, 7e-5)
    csd = predict(theta, ds, fwd, fwd.grid.nodes).total[0]
    lfp = predict_lfp(theta, ds, fwd).total[0]
    proj = fwd.matrix(ds.electrodes, theta.R) @ csd
    assert np.linalg.norm(proj - lfp) / np.linalg.norm(lfp) < 0.02


def test_mean_loglik(rng):
    theta, ds, fwd = random_instance(rng, m_range=(3, 4), t_range=(4, 5), n_trials=3)
    assert mean_loglik(np.zeros(ds.lfp.shape[1:]), theta, ds, fwd) == 0.0
    ybar = ds.lfp.mean(0)
    cs = np.linspace(0.5, 1.5, 11)
    vals = [mean_loglik(c * ybar, theta, ds, fwd) for c in cs]
    assert cs[int(np.argmax(vals))] == pytest.approx(1.0)
    Ks = spatial_lfp_cov(theta, fwd, ds.electrodes)
    Kt = temporal_matrices(theta, ds.times).total
    Si = np.linalg.inv(np.kron(Ks, Kt) + theta.noise_var * np.eye(12))
    mu = rng.standard_normal((3, 4))
    dense = mu.ravel() @ Si @ ybar.ravel() - 0.5 * mu.ravel() @ Si @ mu.ravel()
    assert mean_loglik(mu, theta, ds, fwd) == pytest.approx(dense, rel=1e-8, abs=1e-10)


def test_loglik_memory_stays_small():
    # M = 50, T = 500: an MT x MT covariance would need 5 GB
    rng = np.random.default_rng(0)
    el = ElectrodeArray(np.arange(50) * 50.0)
    ds = LfpDataset(rng.standard_normal((1, 50, 500)), el, 1000.0)
    fwd = ForwardOperator.for_electrodes(el, n_per_dim=100)
    theta = Hyperparameters(100.0, (150.0,), 5.0, 50.0, 0.5, 1.0, 1.0)
    tracemalloc.start()
    log_marginal_likelihood(theta, ds, fwd, return_grad=True)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak < 40 * 500 * 500 * 8
