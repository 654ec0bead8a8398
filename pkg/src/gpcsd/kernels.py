"""Covariance functions and covariance-matrix assembly.

The CSD prior is separable: a unit-variance squared-exponential (SE) kernel
in space times the sum of a slow SE kernel and a fast exponential kernel in
time. The LFP spatial covariance is obtained by applying the discretized
forward operator to both arguments of the spatial kernel, ``A K A^T``.

Vectorization convention: space-major, time-minor, so a trial ``Y`` of shape
``(M, T)`` flattens row-major and the full covariance is ``Ks (x) Kt``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ValidationError
from .forward import ElectrodeArray, ForwardOperator, _target_coords

__all__ = [
    "Hyperparameters",
    "CovMatrices",
    "k_spatial_se",
    "k_temporal_se",
    "k_temporal_exp",
    "temporal_matrices",
    "spatial_lfp_cov",
    "spatial_cross_cov",
    "build_cov",
]


@dataclass(frozen=True)
class Hyperparameters:
    """Model parameters.

    Lengths are in microns, times in milliseconds. ``ell_s`` holds one
    lengthscale per spatial dimension.
    """

    R: float
    ell_s: tuple
    ell_t_fast: float
    ell_t_slow: float
    var_fast: float
    var_slow: float
    noise_var: float

    def __post_init__(self):
        ell_s = tuple(float(v) for v in np.atleast_1d(self.ell_s))
        object.__setattr__(self, "ell_s", ell_s)
        for name in ("R", "ell_t_fast", "ell_t_slow"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive, got {v}")
        if not all(np.isfinite(v) and v > 0 for v in ell_s):
            raise ValidationError(f"spatial lengthscales must be positive, got {ell_s}")
        for name in ("var_fast", "var_slow", "noise_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"{name} must be non-negative, got {v}")

    @property
    def dim(self) -> int:
        return len(self.ell_s)

    @staticmethod
    def names(dim=1):
        """Flat parameter names in vector order."""
        ell = ["ell_s"] if dim == 1 else [f"ell_s{d}" for d in range(dim)]
        return ["R", *ell, "ell_t_fast", "ell_t_slow", "var_fast", "var_slow", "noise_var"]

    def to_vector(self) -> np.ndarray:
        return np.array([self.R, *self.ell_s, self.ell_t_fast, self.ell_t_slow,
                         self.var_fast, self.var_slow, self.noise_var])

    @classmethod
    def from_vector(cls, v, dim=1):
        v = np.asarray(v, dtype=float)
        if v.size != 6 + dim:
            raise ValidationError(f"expected {6 + dim} parameters, got {v.size}")
        return cls(v[0], tuple(v[1 : 1 + dim]), *v[1 + dim :])

    def to_dict(self) -> dict:
        return dict(zip(self.names(self.dim), self.to_vector().tolist()))

    @classmethod
    def from_dict(cls, d):
        if "ell_s" in d:
            ell = d["ell_s"]
        else:
            ell = [d[k] for k in sorted(k for k in d if k.startswith("ell_s"))]
        return cls(d["R"], tuple(np.atleast_1d(ell)), d["ell_t_fast"], d["ell_t_slow"],
                   d["var_fast"], d["var_slow"], d["noise_var"])

    def replace(self, **changes):
        return replace(self, **changes)

    def with_data_scale(self, factor):
        """Parameters for data multiplied by ``factor``: variances scale by ``factor**2``."""
        f2 = float(factor) ** 2
        return replace(self, var_fast=self.var_fast * f2, var_slow=self.var_slow * f2,
                       noise_var=self.noise_var * f2)


UNITS = {"R": "micron", "ell_s": "micron", "ell_t_fast": "ms", "ell_t_slow": "ms",
         "var_fast": "csd^2", "var_slow": "csd^2", "noise_var": "lfp^2"}


def unit_of(name):
    return UNITS["ell_s" if name.startswith("ell_s") else name]


def k_spatial_se(s, s_prime, ell_s):
    """Unit-variance SE kernel ``exp(-sum_d (s_d - s'_d)^2 / (2 ell_d^2))``.

    Scalars or arrays whose last axis indexes dimension (or 1D coordinates).
    """
    s = np.asarray(s, dtype=float)
    s_prime = np.asarray(s_prime, dtype=float)
    ell = np.atleast_1d(np.asarray(ell_s, dtype=float))
    if np.any(ell <= 0):
        raise ValidationError("spatial lengthscales must be positive")
    d = s - s_prime
    if ell.size == 1 and (d.ndim == 0 or d.shape[-1] != 1):
        return np.exp(-0.5 * (d / ell[0]) ** 2)
    return np.exp(-0.5 * np.sum((d / ell) ** 2, axis=-1))


def k_temporal_se(t, t_prime, var_slow, ell_t_slow):
    """Slow temporal kernel ``var * exp(-(t - t')^2 / (2 ell^2))``."""
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    return var_slow * np.exp(-0.5 * (d / ell_t_slow) ** 2)


def k_temporal_exp(t, t_prime, var_fast, ell_t_fast):
    """Fast temporal kernel ``var * exp(-|t - t'| / ell)``."""
    d = np.asarray(t, dtype=float) - np.asarray(t_prime, dtype=float)
    return var_fast * np.exp(-np.abs(d) / ell_t_fast)


@dataclass
class TemporalCov:
    fast: np.ndarray
    slow: np.ndarray
    grads: dict = field(default_factory=dict)

    @property
    def total(self):
        return self.fast + self.slow


def temporal_matrices(theta: Hyperparameters, t, t_prime=None, with_grad=False) -> TemporalCov:
    """Fast and slow temporal covariance matrices between ``t`` and ``t_prime``.

    With ``with_grad`` the derivatives with respect to ``ell_t_fast``,
    ``ell_t_slow``, ``var_fast`` and ``var_slow`` are returned in ``grads``.
    """
    t = np.asarray(t, dtype=float)
    tp = t if t_prime is None else np.asarray(t_prime, dtype=float)
    d = t[:, None] - tp[None, :]
    e_fast = np.exp(-np.abs(d) / theta.ell_t_fast)
    e_slow = np.exp(-0.5 * (d / theta.ell_t_slow) ** 2)
    out = TemporalCov(theta.var_fast * e_fast, theta.var_slow * e_slow)
    if with_grad:
        out.grads = {
            "ell_t_fast": out.fast * np.abs(d) / theta.ell_t_fast**2,
            "ell_t_slow": out.slow * d**2 / theta.ell_t_slow**3,
            "var_fast": e_fast,
            "var_slow": e_slow,
        }
    return out


def _axis_factors(grid, ell_s):
    if len(ell_s) != grid.dim:
        raise ValidationError(f"{len(ell_s)} spatial lengthscales for a {grid.dim}D grid")
    out = []
    for x, ell in zip(grid.axes, ell_s):
        d = x[:, None] - x[None, :]
        k = np.exp(-0.5 * (d / ell) ** 2)
        out.append((k, d * d / ell**3))
    return out


def _apply_kernel(left, factors, shape):
    """``left @ K`` for a tensor-product node kernel ``K = kron(*factors)``."""
    if len(factors) == 1:
        return left @ factors[0]
    m = left.shape[0]
    ky, kz = factors
    tmp = left.reshape(m, *shape) @ kz
    return np.einsum("mab,ac->mcb", tmp, ky).reshape(m, -1)


def _sandwich(left, right, factors, shape):
    return _apply_kernel(left, factors, shape) @ right.T


def spatial_lfp_cov(theta: Hyperparameters, fwd: ForwardOperator, targets, targets_right=None,
                    with_grad=False):
    """LFP spatial covariance ``A K A^T`` between electrode sets.

    Returns ``Ks`` and, with ``with_grad``, a dict of derivatives keyed by
    parameter name (``R`` and the spatial lengthscales). Gradients are only
    available for the symmetric case.
    """
    grid = fwd.grid
    names = Hyperparameters.names(grid.dim)[1 : 1 + grid.dim]
    factors = _axis_factors(grid, theta.ell_s)
    kmats = [k for k, _ in factors]
    if not with_grad:
        A = fwd.matrix(targets, theta.R)
        B = A if targets_right is None else fwd.matrix(targets_right, theta.R)
        return _sandwich(A, B, kmats, grid.shape)
    if targets_right is not None:
        raise ValidationError("gradients are only available for the symmetric covariance")
    A, dA = fwd.matrix(targets, theta.R, with_grad=True)
    AK = _apply_kernel(A, kmats, grid.shape)
    Ks = AK @ A.T
    half = dA @ AK.T
    grads = {"R": half + half.T}
    for d, name in enumerate(names):
        dk = [k if j != d else k * w for j, (k, w) in enumerate(factors)]
        grads[name] = _sandwich(A, A, dk, grid.shape)
    return Ks, grads


def spatial_cross_cov(theta: Hyperparameters, fwd: ForwardOperator, pred_coords, targets):
    """CSD-to-LFP spatial cross-covariance ``K(pred, nodes) A^T``, shape ``(P, M)``."""
    grid = fwd.grid
    pred = _target_coords(pred_coords)
    pred = pred.reshape(pred.shape[0], -1)
    if pred.shape[1] != grid.dim:
        raise ValidationError(f"prediction coordinates are {pred.shape[1]}D, model is {grid.dim}D")
    parts = [np.exp(-0.5 * ((pred[:, d, None] - grid.axes[d][None, :]) / theta.ell_s[d]) ** 2)
             for d in range(grid.dim)]
    if grid.dim == 1:
        kpn = parts[0]
    else:
        kpn = (parts[0][:, :, None] * parts[1][:, None, :]).reshape(pred.shape[0], -1)
    A = fwd.matrix(targets, theta.R)
    return kpn @ A.T


def spatial_node_cov(theta: Hyperparameters, fwd: ForwardOperator):
    """Dense node-by-node spatial kernel matrix (small grids only)."""
    mats = [k for k, _ in _axis_factors(fwd.grid, theta.ell_s)]
    return mats[0] if len(mats) == 1 else np.kron(mats[0], mats[1])


@dataclass
class CovMatrices:
    """Covariance blocks for one set of hyperparameters.

    ``Ks_lfp`` is ``A K A^T`` at the electrodes, ``Ks_cross`` is
    ``K(pred, nodes) A^T`` (``None`` without a prediction grid), and the
    temporal blocks are evaluated at the observed times.
    """

    Ks_lfp: np.ndarray
    Ks_cross: np.ndarray | None
    Kt_fast: np.ndarray
    Kt_slow: np.ndarray
    Kt_sum: np.ndarray

    def full(self):
        """Dense ``Ks (x) Kt`` (tests and small problems only)."""
        return np.kron(self.Ks_lfp, self.Kt_sum)


def build_cov(theta: Hyperparameters, electrodes: ElectrodeArray, pred_grid, times,
              fwd: ForwardOperator) -> CovMatrices:
    """Assemble the spatial and temporal covariance blocks for ``theta``."""
    Ks = spatial_lfp_cov(theta, fwd, electrodes)
    Ks = 0.5 * (Ks + Ks.T)
    cross = None if pred_grid is None else spatial_cross_cov(theta, fwd, pred_grid, electrodes)
    tc = temporal_matrices(theta, times)
    return CovMatrices(Ks, cross, tc.fast, tc.slow, tc.fast + tc.slow)

