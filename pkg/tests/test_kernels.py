import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gpcsd import ElectrodeArray, ForwardOperator, Hyperparameters, QuadratureGrid
from gpcsd.errors import ValidationError
from gpcsd.forward import ForwardOperator as FO
from gpcsd.kernels import (
    build_cov,
    k_spatial_se,
    k_temporal_exp,
    k_temporal_se,
    spatial_lfp_cov,
    spatial_node_cov,
    temporal_matrices,
)

THETA = Hyperparameters(120.0, (150.0,), 2.0, 8.0, 0.7, 1.3, 0.2)


def test_scalar_kernels():
    assert k_spatial_se(3.0, 3.0, (50.0,)) == 1.0
    assert k_spatial_se(0.0, 50.0, (50.0,)) == pytest.approx(math.exp(-0.5), rel=1e-15)
    a, b = 30.0, -70.0
    sep = k_spatial_se(np.array([0.0, 0.0]), np.array([a, b]), (40.0, 90.0))
    assert sep == pytest.approx(k_spatial_se(0.0, a, (40.0,)) * k_spatial_se(0.0, b, (90.0,)), rel=1e-14)
    assert k_temporal_se(4.0, 4.0, 1.7, 5.0) == 1.7
    assert k_temporal_se(0.0, 5.0, 1.7, 5.0) == pytest.approx(1.7 * math.exp(-0.5), rel=1e-15)
    assert k_temporal_exp(4.0, 4.0, 0.3, 2.0) == 0.3
    assert k_temporal_exp(0.0, 2.0, 0.3, 2.0) == pytest.approx(0.3 * math.exp(-1), rel=1e-15)
    assert k_temporal_exp(0.0, 4.0, 0.3, 2.0) / k_temporal_exp(0.0, 2.0, 0.3, 2.0) == pytest.approx(math.exp(-1))


@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(0.1, 100), st.floats(0.1, 100))
def test_temporal_kernels_symmetric(t, tp, var, ell):
    assert k_temporal_se(t, tp, var, ell) == k_temporal_se(tp, t, var, ell)
    assert k_temporal_exp(t, tp, var, ell) == k_temporal_exp(tp, t, var, ell)


def test_hyperparameter_validation_and_roundtrip():
    assert Hyperparameters.from_dict(THETA.to_dict()) == THETA
    assert Hyperparameters.from_vector(THETA.to_vector()) == THETA
    with pytest.raises(ValidationError):
        THETA.replace(R=-1.0)
    with pytest.raises(ValidationError):
        THETA.replace(noise_var=np.nan)
    s = THETA.with_data_scale(3.0)
    assert s.var_slow == pytest.approx(9 * THETA.var_slow) and s.R == THETA.R


def test_build_cov_matches_triple_loop_oracle():
    # 3 electrodes, 5 trapezoid nodes
    z = [0.0, 40.0, 80.0, 120.0, 160.0]
    w = [20.0, 40.0, 40.0, 40.0, 20.0]
    el = ElectrodeArray([10.0, 75.0, 150.0])
    fwd = FO(QuadratureGrid.from_nodes(z))
    theta = THETA.replace(R=60.0, ell_s=(55.0,))
    cov = build_cov(theta, el, [30.0, 90.0], np.arange(4.0), fwd)

    def a(e, u):
        r = abs(e - u) / theta.R
        return -theta.R / 2 * (math.sqrt(r * r + 1) - r)

    for i, ei in enumerate(el.coords):
        for j, ej in enumerate(el.coords):
            tot = 0.0
            for k, uk in enumerate(z):
                for m, um in enumerate(z):
                    tot += w[k] * a(ei, uk) * math.exp(-0.5 * ((uk - um) / 55.0) ** 2) * w[m] * a(ej, um)
            assert cov.Ks_lfp[i, j] == pytest.approx(tot, rel=1e-12)
    for p, zp in enumerate([30.0, 90.0]):
        for j, ej in enumerate(el.coords):
            tot = sum(math.exp(-0.5 * ((zp - uk) / 55.0) ** 2) * w[k] * a(ej, uk) for k, uk in enumerate(z))
            assert cov.Ks_cross[p, j] == pytest.approx(tot, rel=1e-12)
    np.testing.assert_array_equal(cov.Kt_sum, cov.Kt_fast + cov.Kt_slow)


def test_symmetry_psd_and_unit_diagonal(probe24):
    fwd = ForwardOperator.for_electrodes(probe24, n_per_dim=100)
    cov = build_cov(THETA, probe24, None, np.arange(30.0), fwd)
    assert np.max(np.abs(cov.Ks_lfp - cov.Ks_lfp.T)) <= 1e-12 * np.abs(cov.Ks_lfp).max()
    for K in (cov.Ks_lfp, cov.Kt_sum):
        lam = np.linalg.eigvalsh(K)
        assert lam[0] >= -1e-8 * lam[-1]
        np.linalg.cholesky(K + 1e-8 * np.mean(np.diag(K)) * np.eye(len(K)))
    np.testing.assert_array_equal(np.diag(spatial_node_cov(THETA, fwd)), 1.0)


def test_long_lengthscale_is_rank_one(probe24):
    fwd = ForwardOperator.for_electrodes(probe24, n_per_dim=100)
    Ks = spatial_lfp_cov(THETA.replace(ell_s=(1e7,)), fwd, probe24)
    lam = np.linalg.eigvalsh(Ks)
    assert lam[-1] / lam.sum() > 0.999
    A = fwd.matrix(probe24, THETA.R)
    np.testing.assert_allclose(Ks, np.outer(A.sum(1), A.sum(1)), rtol=1e-6)


def test_separable_full_covariance_toy():
    el = ElectrodeArray([0.0, 100.0, 200.0])
    fwd = ForwardOperator.for_electrodes(el, n_per_dim=20)
    t = np.arange(4.0)
    cov = build_cov(THETA, el, None, t, fwd)
    full = cov.full()
    for i in range(3):
        for a in range(4):
            for j in range(3):
                for b in range(4):
                    kt = k_temporal_se(t[a], t[b], THETA.var_slow, THETA.ell_t_slow) + k_temporal_exp(
                        t[a], t[b], THETA.var_fast, THETA.ell_t_fast)
                    assert full[i * 4 + a, j * 4 + b] == pytest.approx(cov.Ks_lfp[i, j] * kt, rel=1e-14)


def test_spatial_gradients_match_finite_differences():
    el = ElectrodeArray(np.arange(6) * 100.0)
    fwd = ForwardOperator.for_electrodes(el, n_per_dim=40)
    _, grads = spatial_lfp_cov(THETA, fwd, el, with_grad=True)
    steps = {"R": lambda th, h: th.replace(R=th.R + h), "ell_s": lambda th, h: th.replace(ell_s=(th.ell_s[0] + h,))}
    for name, shift in steps.items():
        h = 1e-5 * 100.0
        up, dn = shift(THETA, h), shift(THETA, -h)
        fd = (spatial_lfp_cov(up, fwd, el) - spatial_lfp_cov(dn, fwd, el)) / (2 * h)
        np.testing.assert_allclose(grads[name], fd, rtol=1e-6, atol=1e-9 * np.abs(fd).max())


def test_temporal_gradients_match_finite_differences():
    t = np.arange(12.0)
    g = temporal_matrices(THETA, t, with_grad=True).grads
    for name in ("ell_t_fast", "ell_t_slow", "var_fast", "var_slow"):
        v = getattr(THETA, name)
        h = 1e-6 * v
        up = temporal_matrices(THETA.replace(**{name: v + h}), t).total
        dn = temporal_matrices(THETA.replace(**{name: v - h}), t).total
        np.testing.assert_allclose(g[name], (up - dn) / (2 * h), rtol=1e-6, atol=1e-10)
