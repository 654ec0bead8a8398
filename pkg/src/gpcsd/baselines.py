"""Reference CSD estimators: second spatial difference and 1D kernel CSD."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .forward import ElectrodeArray, ForwardParams, QuadratureGrid, operator_matrix

__all__ = ["tcsd", "KcsdConfig", "KcsdResult", "kcsd_1d", "kcsd_fit", "KcsdModel"]


def tcsd(lfp, pitch, sign=-1.0):
    """Traditional CSD: scaled second difference across channels.

    Parameters
    ----------
    lfp : ndarray, shape (..., M, T)
        Potentials at uniformly spaced channels (channel axis second to last).
    pitch : float
        Channel spacing in microns.
    sign : float
        ``-1`` gives ``-(phi[i-1] - 2 phi[i] + phi[i+1]) / pitch**2``, the
        Poisson convention. The forward operator in this package has a negative
        prefactor, so estimates comparable to its sources use ``sign=+1``.

    Returns
    -------
    ndarray, shape (..., M - 2, T)
        Estimates at the interior channels.
    """
    x = np.asarray(lfp, dtype=float)
    if x.ndim < 2 or x.shape[-2] < 3:
        raise ValidationError("tCSD needs at least 3 channels")
    if not (np.isfinite(pitch) and pitch > 0):
        raise ValidationError("pitch must be positive")
    d2 = x[..., :-2, :] - 2.0 * x[..., 1:-1, :] + x[..., 2:, :]
    return sign * d2 / pitch**2


def tcsd_array(lfp, electrodes: ElectrodeArray, sign=-1.0):
    """:func:`tcsd` with the pitch taken from (and uniformity checked on) ``electrodes``."""
    return tcsd(lfp, electrodes.pitch(), sign=sign)


@dataclass(frozen=True)
class KcsdConfig:
    """Settings for :func:`kcsd_1d`.

    ``lambdas`` are relative to the mean diagonal of the potential kernel, so
    the grid does not depend on the data units. ``extension`` pads the basis
    span beyond the outer electrodes, in microns.
    """

    R: float
    basis_count: int = 1000
    widths: tuple = tuple(np.linspace(100.0, 800.0, 15))
    lambdas: tuple = tuple(np.logspace(-15, 0, 25))
    extension: float = 0.0
    n_quad: int = 400
    cv_trials: int = 5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(float(w) for w in self.widths))
        object.__setattr__(self, "lambdas", tuple(float(v) for v in self.lambdas))
        if not (np.isfinite(self.R) and self.R > 0):
            raise ValidationError("R must be positive")
        if self.basis_count < 2 or self.n_quad < 2:
            raise ValidationError("need at least two bases and two quadrature nodes")
        for name in ("widths", "lambdas"):
            g = np.asarray(getattr(self, name))
            if g.size == 0:
                raise ValidationError(f"{name} grid is empty")
            if name == "widths" and np.any(g <= 0):
                raise ValidationError("widths must be positive")
            if name == "lambdas" and np.any(g < 0):
                raise ValidationError("lambdas must be non-negative")
            if np.any(np.diff(g) <= 0):
                raise ValidationError(f"{name} grid must be strictly increasing")
        if self.extension < 0:
            raise ValidationError("extension must be non-negative")
        if self.cv_trials < 1:
            raise ValidationError("cv_trials must be at least 1")


@dataclass
class KcsdModel:
    """A kCSD estimator with fixed basis width and regularization."""

    electrodes: ElectrodeArray
    config: KcsdConfig
    width: float
    lam: float
    centers: np.ndarray
    _grid: QuadratureGrid = field(repr=False)
    _pot_basis: np.ndarray = field(repr=False)

    @property
    def k_pot(self):
        return self._pot_basis @ self._pot_basis.T

    def _weights(self, lfp):
        K = self.k_pot
        scale = float(np.mean(np.diag(K)))
        H = K + self.lam * scale * np.eye(K.shape[0])
        if self.lam == 0 and np.linalg.cond(H) > 1e12:
            raise NumericalError("kCSD system is singular at lambda = 0; use a larger lambda")
        M, T = lfp.shape[-2], lfp.shape[-1]
        rhs = np.moveaxis(lfp, -2, 0).reshape(M, -1)
        beta = np.linalg.solve(H, rhs)
        return beta.reshape(M, *lfp.shape[:-2], T)

    def estimate(self, lfp, coords=None):
        """CSD at ``coords`` (default: electrodes) for ``lfp`` of shape ``(..., M, T)``."""
        lfp = np.asarray(lfp, dtype=float)
        z = self.electrodes.coords if coords is None else np.asarray(coords, dtype=float).ravel()
        basis = _gauss(z, self.centers, self.width)
        cross = basis @ self._pot_basis.T
        beta = self._weights(lfp)
        out = np.tensordot(cross, beta, axes=(1, 0))
        return np.moveaxis(out, 0, -2)

    def fitted_lfp(self, lfp):
        lfp = np.asarray(lfp, dtype=float)
        beta = self._weights(lfp)
        return np.moveaxis(np.tensordot(self.k_pot, beta, axes=(1, 0)), 0, -2)


@dataclass
class KcsdResult:
    """Output of :func:`kcsd_1d`.

    ``cv_errors[i, j]`` is the leave-one-electrode-out squared error for
    ``widths[i]`` and ``lambdas[j]``.
    """

    csd: np.ndarray
    coords: np.ndarray
    width: float
    lam: float
    cv_errors: np.ndarray
    model: KcsdModel

    def to_csv(self, path):
        cfg = self.model.config
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["width", "lambda", "cv_error", "selected"])
            for i, width in enumerate(cfg.widths):
                for j, lam in enumerate(cfg.lambdas):
                    sel = int(width == self.width and lam == self.lam)
                    w.writerow([repr(width), repr(lam), repr(float(self.cv_errors[i, j])), sel])


def _gauss(z, centers, width):
    return np.exp(-0.5 * ((z[:, None] - centers[None, :]) / width) ** 2)


def _setup(electrodes: ElectrodeArray, config: KcsdConfig):
    (lo, hi), = electrodes.span()
    lo, hi = lo - config.extension, hi + config.extension
    centers = np.linspace(lo, hi, config.basis_count)
    grid = QuadratureGrid.make([(lo, hi)], n_per_dim=config.n_quad)
    A = operator_matrix(grid, electrodes, ForwardParams(config.R, grid.bounds))
    return centers, grid, A


def _pot_basis(A, grid, centers, width):
    return A @ _gauss(grid.nodes.ravel(), centers, width)


def _loo_errors(K, Y, lambdas):
    """Closed-form leave-one-out residual energy of kernel ridge for each lambda."""
    s, U = np.linalg.eigh(0.5 * (K + K.T))
    s = np.clip(s, 0.0, None)
    scale = float(np.mean(np.diag(K)))
    UY = U.T @ Y
    out = np.empty(len(lambdas))
    for j, lam in enumerate(lambdas):
        inv = 1.0 / (s + lam * scale) if lam > 0 else np.where(s > s[-1] * 1e-12, 1.0 / np.maximum(s, 1e-300), 0.0)
        alpha = U @ (inv[:, None] * UY)
        diag = np.einsum("ij,j,ij->i", U, inv, U)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = alpha / diag[:, None]
        out[j] = float(np.sum(r * r)) if np.all(np.isfinite(r)) else np.inf
    return out


def kcsd_fit(lfp, electrodes: ElectrodeArray, config: KcsdConfig) -> tuple[KcsdModel, np.ndarray]:
    """Select basis width and lambda by leave-one-electrode-out CV.

    The first ``config.cv_trials`` trials are concatenated along time before
    cross-validation. Among equal errors the larger lambda wins.
    """
    if electrodes.dim != 1:
        raise ValidationError("kCSD is implemented for 1D arrays only")
    x = np.asarray(lfp, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != electrodes.count:
        raise ValidationError(f"lfp shape {x.shape} does not match {electrodes.count} electrodes")
    Y = np.concatenate(list(x[: config.cv_trials]), axis=1)
    centers, grid, A = _setup(electrodes, config)
    errors = np.empty((len(config.widths), len(config.lambdas)))
    for i, w in enumerate(config.widths):
        P = _pot_basis(A, grid, centers, w)
        errors[i] = _loo_errors(P @ P.T, Y, config.lambdas)
    if not np.any(np.isfinite(errors)):
        raise NumericalError("cross-validation failed for every (width, lambda)")
    best = np.nanmin(errors)
    # ties (within 1e-12 relative) go to the larger lambda, then the smaller width
    tied = np.argwhere(errors <= best * (1 + 1e-12))
    i, j = min(tied, key=lambda ij: (-ij[1], ij[0]))
    if i in (0, len(config.widths) - 1) or j in (0, len(config.lambdas) - 1):
        warnings.warn(f"kCSD selection on the grid boundary (width={config.widths[i]:g}, "
                      f"lambda={config.lambdas[j]:g})", stacklevel=2)
    width, lam = config.widths[i], config.lambdas[j]
    model = KcsdModel(electrodes, config, width, lam, centers, grid, _pot_basis(A, grid, centers, width))
    return model, errors


def kcsd_1d(lfp, electrodes: ElectrodeArray, config: KcsdConfig, coords=None) -> KcsdResult:
    """Cross-validated 1D kCSD estimates for every trial of ``lfp``.

    Parameters
    ----------
    lfp : ndarray, shape (n_trials, M, T) or (M, T)
    coords : array_like, optional
        Estimation points; defaults to the electrode positions.
    """
    x = np.asarray(lfp, dtype=float)
    model, errors = kcsd_fit(x, electrodes, config)
    z = electrodes.coords if coords is None else np.asarray(coords, dtype=float).ravel()
    return KcsdResult(model.estimate(x, z), z, model.width, model.lam, errors, model)
