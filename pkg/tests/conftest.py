import numpy as np
import pytest
from hypothesis import settings

from gpcsd import ElectrodeArray, ForwardOperator, Hyperparameters, LfpDataset
from gpcsd.kernels import spatial_lfp_cov, temporal_matrices

settings.register_profile("ci", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("ci")


def model_draw(theta, electrodes, n_times, n_trials, rng, n_quad=40):
    """Exact draws from the zero-mean model (small problems); returns (dataset, fwd)."""
    fwd = ForwardOperator.for_electrodes(electrodes, n_per_dim=n_quad)
    Ks = spatial_lfp_cov(theta, fwd, electrodes)
    Kt = temporal_matrices(theta, np.arange(n_times, dtype=float)).total
    M = electrodes.count
    L = np.linalg.cholesky(np.kron(Ks, Kt) + theta.noise_var * np.eye(M * n_times))
    y = (L @ rng.standard_normal((M * n_times, n_trials))).T.reshape(n_trials, M, n_times)
    return LfpDataset(y, electrodes, 1000.0), fwd


def random_instance(rng, m_range=(3, 7), t_range=(4, 9), n_trials=2):
    """Random 1D problem at 100 micron pitch with theta on the data scale."""
    M = int(rng.integers(*m_range))
    T = int(rng.integers(*t_range))
    span = (M - 1) * 100.0
    theta = Hyperparameters(
        rng.uniform(60.0, min(250.0, 0.8 * span)),
        (rng.uniform(60.0, min(250.0, span)),),
        rng.uniform(0.6, 0.45 * (T - 1)),
        rng.uniform(0.5 * (T - 1), T - 1),
        rng.uniform(0.1, 2.0),
        rng.uniform(0.1, 2.0),
        rng.uniform(0.05, 1.0),
    )
    ds, fwd = model_draw(theta, ElectrodeArray(np.arange(M) * 100.0), T, n_trials, rng)
    return theta, ds, fwd


def dense_loglik(theta, ds, fwd):
    """Independent oracle: Cholesky of the full MT x MT covariance."""
    from scipy import linalg

    Ks = spatial_lfp_cov(theta, fwd, ds.electrodes)
    Kt = temporal_matrices(theta, ds.times).total
    M, T = ds.n_channels, ds.n_samples
    S = np.kron(Ks, Kt) + theta.noise_var * np.eye(M * T)
    L = np.linalg.cholesky(S)
    out = 0.0
    for y in ds.lfp.reshape(ds.n_trials, -1):
        a = linalg.solve_triangular(L, y, lower=True)
        out += -0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * M * T * np.log(2 * np.pi)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def probe24():
    return ElectrodeArray(np.arange(24) * 100.0)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
