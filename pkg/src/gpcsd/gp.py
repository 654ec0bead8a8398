"""Kronecker-structured GP likelihood and conditional-mean CSD prediction.

With ``Sigma = Ks (x) Kt + noise * I`` and eigendecompositions
``Ks = Qs Ls Qs^T`` and ``Kt = Qt Lt Qt^T``, the inverse is
``(Qs (x) Qt) diag(q) (Qs (x) Qt)^T`` with ``q = 1 / (ls (x) lt + noise)``.
Every quantity below is evaluated through the ``M x T`` projections
``Qs^T Y Qt``; no ``MT x MT`` object is ever formed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import LfpDataset
from .errors import NumericalError, ValidationError
from .forward import ForwardOperator, _target_coords
from .kernels import Hyperparameters, spatial_cross_cov, spatial_lfp_cov, temporal_matrices

__all__ = [
    "KroneckerModel",
    "CsdPrediction",
    "log_marginal_likelihood",
    "log_map_objective",
    "predict",
    "predict_lfp",
    "mean_loglik",
]

PSD_TOL = 1e-8
LOG_2PI = np.log(2.0 * np.pi)


def _sym_eig(K, what):
    lam, Q = np.linalg.eigh(K)
    top = lam[-1]
    if top <= 0:
        if not np.any(K):
            return np.zeros_like(lam), Q
        raise NumericalError(f"{what} covariance has no positive eigenvalue")
    if lam[0] < -PSD_TOL * top:
        raise NumericalError(
            f"{what} covariance is not positive semidefinite (min eigenvalue "
            f"{lam[0]:.3e}, max {top:.3e}); increase quadrature resolution"
        )
    # round-off negatives only; the noise term keeps the total covariance definite
    return np.maximum(lam, 0.0), Q


@dataclass(frozen=True)
class KroneckerModel:
    """Eigendecompositions of the spatial and temporal covariances.

    ``Ks`` and ``Kt`` are kept for dense cross-checks on small problems.
    """

    Qs: np.ndarray
    lambda_s: np.ndarray
    Qt: np.ndarray
    lambda_t: np.ndarray
    noise_var: float
    Ks: np.ndarray
    Kt: np.ndarray

    @classmethod
    def from_matrices(cls, Ks, Kt, noise_var):
        Ks = 0.5 * (Ks + Ks.T)
        Kt = 0.5 * (Kt + Kt.T)
        lam_s, Qs = _sym_eig(Ks, "spatial")
        lam_t, Qt = _sym_eig(Kt, "temporal")
        model = cls(Qs, lam_s, Qt, lam_t, float(noise_var), Ks, Kt)
        if np.min(model.D) <= 0:
            raise NumericalError("total covariance is singular (zero signal and zero noise variance)")
        return model

    @property
    def D(self):
        return np.outer(self.lambda_s, self.lambda_t) + self.noise_var

    @property
    def q(self):
        return 1.0 / self.D

    def project(self, Y):
        """``Qs^T Y Qt`` for one trial or a stack of trials."""
        return self.Qs.T @ Y @ self.Qt

    def solve(self, Y):
        """``Sigma^{-1} vec(Y)`` returned in ``(..., M, T)`` layout."""
        return self.Qs @ (self.project(Y) * self.q) @ self.Qt.T

    def logdet(self) -> float:
        return float(np.sum(np.log(self.D)))

    def dense_inverse(self):
        Q = np.kron(self.Qs, self.Qt)
        return (Q * self.q.ravel()) @ Q.T


def _check_theta(theta, fwd):
    if theta.dim != fwd.dim:
        raise ValidationError(f"theta has {theta.dim} spatial lengthscales, forward model is {fwd.dim}D")


def _loglik_terms(theta: Hyperparameters, Y, electrodes, times, fwd: ForwardOperator, with_grad):
    _check_theta(theta, fwd)
    n_trials, M, T = Y.shape
    if with_grad:
        Ks, dKs = spatial_lfp_cov(theta, fwd, electrodes, with_grad=True)
    else:
        Ks, dKs = spatial_lfp_cov(theta, fwd, electrodes), {}
    tc = temporal_matrices(theta, times, with_grad=with_grad)
    model = KroneckerModel.from_matrices(Ks, tc.total, theta.noise_var)
    proj = model.project(Y)
    q = model.q
    val = (-0.5 * n_trials * model.logdet() - 0.5 * float(np.sum(proj * proj * q))
           - 0.5 * n_trials * M * T * LOG_2PI)
    if not with_grad:
        return val, None, model
    at = proj * q
    lam_s, lam_t = model.lambda_s, model.lambda_t
    S_s = np.tensordot(at * lam_t, at, axes=([0, 2], [0, 2]))
    S_t = np.tensordot(at * lam_s[:, None], at, axes=([0, 1], [0, 1]))
    qs = q @ lam_t
    qt = lam_s @ q
    grads = {}
    for name, dK in dKs.items():
        dK = 0.5 * (dK + dK.T)
        Dm = model.Qs.T @ dK @ model.Qs
        grads[name] = 0.5 * float(np.sum(Dm * S_s)) - 0.5 * n_trials * float(np.diag(Dm) @ qs)
    for name, dK in tc.grads.items():
        Dm = model.Qt.T @ dK @ model.Qt
        grads[name] = 0.5 * float(np.sum(Dm * S_t)) - 0.5 * n_trials * float(np.diag(Dm) @ qt)
    grads["noise_var"] = 0.5 * float(np.sum(at * at)) - 0.5 * n_trials * float(np.sum(q))
    return val, grads, model


def _grad_vector(grads, dim):
    return np.array([grads[n] for n in Hyperparameters.names(dim)])


def log_marginal_likelihood(theta: Hyperparameters, dataset: LfpDataset, fwd: ForwardOperator,
                            return_grad=False):
    """Gaussian log marginal likelihood of all trials under the zero-mean model.

    Includes the ``-NMT/2 log(2 pi)`` constant, so the value equals the
    multivariate-normal log density of the stacked trials. With
    ``return_grad`` also returns the gradient with respect to
    ``theta.to_vector()``.
    """
    val, grads, _ = _loglik_terms(theta, dataset.lfp, dataset.electrodes, dataset.times, fwd,
                                  return_grad)
    if return_grad:
        return val, _grad_vector(grads, theta.dim)
    return val


def log_map_objective(theta: Hyperparameters, dataset: LfpDataset, fwd: ForwardOperator, priors,
                      return_grad=False):
    """Log marginal likelihood plus log prior density; ``-inf`` outside the prior support.

    ``priors`` is a :class:`gpcsd.optimize.PriorSet` (or ``None`` for flat priors).
    """
    if priors is not None and not priors.in_support(theta):
        return (-np.inf, np.full(6 + theta.dim, np.nan)) if return_grad else -np.inf
    lp, lp_grad = (0.0, 0.0) if priors is None else priors.log_density(theta, return_grad=True)
    if return_grad:
        ll, g = log_marginal_likelihood(theta, dataset, fwd, return_grad=True)
        return ll + lp, g + lp_grad
    return log_marginal_likelihood(theta, dataset, fwd) + lp


@dataclass
class CsdPrediction:
    """Per-trial predictions on a grid of locations.

    ``total``, ``slow`` and ``fast`` have shape ``(n_trials, n_locations, n_times)``;
    ``mean`` has shape ``(n_locations, n_times)``. ``total`` is assembled as
    ``mean + slow + fast``.
    """

    grid: np.ndarray
    times: np.ndarray
    total: np.ndarray
    slow: np.ndarray
    fast: np.ndarray
    mean: np.ndarray

    @property
    def n_trials(self) -> int:
        return self.total.shape[0]


def _mean_parts(mean, fwd, theta, electrodes, obs_times, pred_coords, pred_times):
    if mean is None:
        return 0.0, None
    nodes = fwd.grid.nodes
    mu_nodes = np.asarray(mean(nodes, obs_times), dtype=float)
    A = fwd.matrix(electrodes, theta.R)
    mu_pred = None if pred_coords is None else np.asarray(mean(pred_coords, pred_times), dtype=float)
    return A @ mu_nodes, mu_pred


def _residual_weights(theta, dataset, fwd, lfp_mean):
    Ks = spatial_lfp_cov(theta, fwd, dataset.electrodes)
    tc = temporal_matrices(theta, dataset.times)
    model = KroneckerModel.from_matrices(Ks, tc.total, theta.noise_var)
    return model.solve(dataset.lfp - lfp_mean), Ks


def predict(theta: Hyperparameters, dataset: LfpDataset, fwd: ForwardOperator, pred_grid,
            pred_times=None, mean=None) -> CsdPrediction:
    """Conditional-mean CSD on ``pred_grid`` for every trial, split into slow and fast parts.

    Parameters
    ----------
    pred_grid : array_like or ElectrodeArray
        Prediction coordinates, ``(P,)`` or ``(P, 2)``.
    pred_times : array_like, optional
        Prediction times in ms; defaults to the observed times.
    mean : callable, optional
        ``mean(coords, times) -> (n_coords, n_times)`` CSD mean shared by all
        trials. ``None`` means a zero-mean process.
    """
    _check_theta(theta, fwd)
    coords = _target_coords(pred_grid)
    outside = ~fwd.contains(coords)
    if np.any(outside):
        warnings.warn(f"{int(outside.sum())} prediction locations lie outside the integration "
                      "bounds; predictions there are extrapolations", stacklevel=2)
    obs_t = dataset.times
    pt = obs_t if pred_times is None else np.asarray(pred_times, dtype=float)
    lfp_mean, mu_pred = _mean_parts(mean, fwd, theta, dataset.electrodes, obs_t, coords, pt)
    alpha, _ = _residual_weights(theta, dataset, fwd, lfp_mean)
    cross = spatial_cross_cov(theta, fwd, coords, dataset.electrodes)
    tc = temporal_matrices(theta, pt, obs_t)
    left = cross @ alpha
    slow = left @ tc.slow.T
    fast = left @ tc.fast.T
    mu = np.zeros((coords.shape[0], pt.size)) if mu_pred is None else mu_pred
    total = mu + slow + fast
    return CsdPrediction(coords, pt, total, slow, fast, mu)


def predict_lfp(theta: Hyperparameters, dataset: LfpDataset, fwd: ForwardOperator, times=None,
                mean=None) -> CsdPrediction:
    """Posterior mean of the noiseless LFP at the electrodes, with the slow/fast split."""
    _check_theta(theta, fwd)
    obs_t = dataset.times
    pt = obs_t if times is None else np.asarray(times, dtype=float)
    lfp_mean, _ = _mean_parts(mean, fwd, theta, dataset.electrodes, obs_t, None, None)
    alpha, Ks = _residual_weights(theta, dataset, fwd, lfp_mean)
    tc = temporal_matrices(theta, pt, obs_t)
    left = Ks @ alpha
    slow = left @ tc.slow.T
    fast = left @ tc.fast.T
    if mean is None:
        mu = np.zeros((dataset.n_channels, pt.size))
    else:
        mu = fwd.matrix(dataset.electrodes, theta.R) @ np.asarray(mean(fwd.grid.nodes, pt), dtype=float)
    total = mu + slow + fast
    return CsdPrediction(dataset.electrodes.coords, pt, total, slow, fast, mu)


def mean_loglik(mean_lfp, theta: Hyperparameters, dataset: LfpDataset, fwd: ForwardOperator) -> float:
    """Objective for a shared mean: ``mu^T S^-1 ybar - mu^T S^-1 mu / 2``.

    ``mean_lfp`` is the mean already mapped to LFP space at the electrodes,
    shape ``(M, T)``; parametrized means are evaluated by the caller.
    """
    mu = np.asarray(mean_lfp, dtype=float)
    if mu.shape != dataset.lfp.shape[1:]:
        raise ValidationError(f"mean has shape {mu.shape}, expected {dataset.lfp.shape[1:]}")
    Ks = spatial_lfp_cov(theta, fwd, dataset.electrodes)
    tc = temporal_matrices(theta, dataset.times)
    model = KroneckerModel.from_matrices(Ks, tc.total, theta.noise_var)
    w = model.solve(mu)
    ybar = dataset.lfp.mean(axis=0)
    return float(np.sum(w * ybar) - 0.5 * np.sum(w * mu))
