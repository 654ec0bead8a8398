"""Biophysical forward models mapping a CSD field to field potentials.

Two reductions of the point-source volume-conductor integral are provided:

* 1D: the CSD is constant over a cylinder of radius ``R`` around a linear
  probe, and the potential along the probe axis is
  ``phi(z) = -(R / 2) * integral a(z, z'; R) g(z') dz'``.
* 2D: the CSD is constant over a slab ``tau <= x <= tau + R`` in front of a
  planar probe face, and
  ``phi(y, z) = -1 / (4 pi) * integral a(y, y', z, z'; R, tau) g(y', z') dy' dz'``.

Conductivity is fixed to 1, so all CSD estimates are in arbitrary units.
The integral is discretized on a :class:`QuadratureGrid`; the resulting
matrix ``A`` (targets x nodes, quadrature weights folded in) is what the
covariance code uses for the ``A K A^T`` sandwich.

Coordinates are in microns. 2D coordinates are ``(y, z)`` pairs, with ``y``
the width along the probe face and ``z`` the depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, NumericalError, ValidationError

__all__ = [
    "ElectrodeArray",
    "QuadratureGrid",
    "ForwardParams",
    "ForwardOperator",
    "weight_1d",
    "weight_2d",
    "operator_matrix",
    "apply_forward",
]

SCHEMES = ("gauss-legendre", "trapezoid")


def _finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValidationError("non-finite input to forward weight")


def weight_1d(z, z_prime, R):
    """Cylinder-model weight ``sqrt((r/R)^2 + 1) - |r|/R`` with ``r = z - z'``.

    Broadcasts over array inputs. Returns values in ``(0, 1]`` with the
    maximum at ``z == z'``.
    """
    z = np.asarray(z, dtype=float)
    z_prime = np.asarray(z_prime, dtype=float)
    _finite(z, z_prime, R)
    if not R > 0:
        raise ValidationError(f"R must be positive, got {R}")
    rr = np.abs(z - z_prime) / R
    # algebraically equal to sqrt(rr^2 + 1) - rr, without cancellation at large rr
    return 1.0 / (np.sqrt(rr * rr + 1.0) + rr)


def weight_2d(y, y_prime, z, z_prime, R, tau):
    """Slab-model weight ``log((R + tau + sqrt((R+tau)^2 + r^2)) / (tau + sqrt(tau^2 + r^2)))``.

    ``r^2 = (y - y')^2 + (z - z')^2``. ``tau = 0`` is allowed only away from
    ``r = 0``, where the weight diverges.
    """
    y, y_prime, z, z_prime = (np.asarray(v, dtype=float) for v in (y, y_prime, z, z_prime))
    _finite(y, y_prime, z, z_prime, R, tau)
    if not R > 0:
        raise ValidationError(f"R must be positive, got {R}")
    if tau < 0:
        raise ValidationError(f"tau must be non-negative, got {tau}")
    r2 = (y - y_prime) ** 2 + (z - z_prime) ** 2
    if tau == 0 and np.any(r2 == 0):
        raise NumericalError("2D forward weight is singular at r = 0 when tau = 0")
    return _weight_2d_r2(r2, R, tau)


def _weight_2d_r2(r2, R, tau):
    outer = R + tau
    return np.log(outer + np.sqrt(outer * outer + r2)) - np.log(tau + np.sqrt(tau * tau + r2))


@dataclass(frozen=True)
class ElectrodeArray:
    """Recording sites.

    Parameters
    ----------
    coords : array_like
        Shape ``(M,)`` for a linear probe (depth ``z``), or ``(M, 2)`` for a
        planar array with columns ``(y, z)``. Microns.
    """

    coords: np.ndarray

    def __post_init__(self):
        c = np.array(self.coords, dtype=float)
        if c.ndim == 2 and c.shape[1] == 1:
            c = c[:, 0]
        if c.ndim not in (1, 2) or (c.ndim == 2 and c.shape[1] != 2):
            raise ValidationError(f"electrode coords must be (M,) or (M, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("electrode coordinates must be finite")
        if c.ndim == 1:
            if c.size < 3:
                raise ValidationError("a linear probe needs at least 3 electrodes")
            if np.any(np.diff(c) <= 0):
                raise ValidationError("1D electrode coordinates must be strictly increasing")
        elif c.shape[0] < 2:
            raise ValidationError("a 2D array needs at least 2 electrodes")
        c.setflags(write=False)
        object.__setattr__(self, "coords", c)

    @property
    def dim(self) -> int:
        return 1 if self.coords.ndim == 1 else 2

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def span(self):
        """Per-dimension ``(min, max)`` of the coordinates."""
        if self.dim == 1:
            return ((float(self.coords.min()), float(self.coords.max())),)
        return tuple((float(self.coords[:, d].min()), float(self.coords[:, d].max())) for d in range(2))

    def pitch(self, rtol=1e-6) -> float:
        """Uniform spacing of a linear probe; raises if the spacing varies."""
        if self.dim != 1:
            raise ValidationError("pitch is only defined for 1D arrays")
        d = np.diff(self.coords)
        if np.max(np.abs(d - d.mean())) > rtol * d.mean():
            raise ValidationError("electrode spacing is not uniform")
        return float(d.mean())

    def pairwise_distances(self):
        c = self.coords.reshape(self.count, -1)
        diff = c[:, None, :] - c[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


def _axis_rule(a, b, n, scheme):
    if scheme == "gauss-legendre":
        x, w = np.polynomial.legendre.leggauss(n)
        half = 0.5 * (b - a)
        return a + half * (x + 1.0), half * w
    if scheme == "trapezoid":
        if n < 2:
            raise ValidationError("trapezoid rule needs at least 2 nodes")
        x = np.linspace(a, b, n)
        w = np.full(n, (b - a) / (n - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        return x, w
    raise ValidationError(f"unknown quadrature scheme {scheme!r}; expected one of {SCHEMES}")


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product quadrature grid over the CSD integration domain.

    ``axes[d]`` and ``axis_weights[d]`` hold the 1D rule for dimension ``d``.
    Flattened node order is row-major over ``axes`` (first axis slowest).
    """

    axes: tuple
    axis_weights: tuple
    scheme: str
    bounds: tuple

    @classmethod
    def make(cls, bounds, n_per_dim=100, scheme="gauss-legendre"):
        """Build a grid over ``bounds``, a sequence of ``(a, b)`` per dimension."""
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        if len(bounds) not in (1, 2):
            raise ValidationError("only 1D and 2D integration domains are supported")
        if isinstance(n_per_dim, (int, np.integer)):
            n_per_dim = (int(n_per_dim),) * len(bounds)
        axes, weights = [], []
        for (a, b), n in zip(bounds, n_per_dim):
            if not a < b:
                raise ValidationError(f"integration bounds must satisfy a < b, got ({a}, {b})")
            x, w = _axis_rule(a, b, int(n), scheme)
            axes.append(x)
            weights.append(w)
        return cls(tuple(axes), tuple(weights), scheme, bounds)

    @classmethod
    def from_nodes(cls, nodes, bounds=None):
        """Trapezoid rule on arbitrary sorted 1D nodes (used for dense simulation grids)."""
        x = np.asarray(nodes, dtype=float)
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValidationError("nodes must be a strictly increasing 1D array")
        h = np.diff(x)
        w = np.zeros_like(x)
        w[:-1] += 0.5 * h
        w[1:] += 0.5 * h
        if bounds is None:
            bounds = ((float(x[0]), float(x[-1])),)
        return cls((x,), (w,), "trapezoid", tuple(tuple(map(float, b)) for b in bounds))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self):
        return tuple(len(a) for a in self.axes)

    @property
    def n_per_dim(self):
        return self.shape

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nodes(self):
        if self.dim == 1:
            return self.axes[0]
        yy, zz = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([yy.ravel(), zz.ravel()])

    @property
    def weights(self):
        if self.dim == 1:
            return self.axis_weights[0]
        return np.outer(*self.axis_weights).ravel()

    def measure(self) -> float:
        return float(np.prod([b - a for a, b in self.bounds]))


@dataclass(frozen=True)
class ForwardParams:
    """Forward-model parameters: radius/slab depth ``R``, standoff ``tau`` (2D only), domain bounds."""

    R: float
    bounds: tuple
    tau: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.R) and self.R > 0):
            raise ValidationError(f"R must be positive and finite, got {self.R}")
        bounds = tuple((float(a), float(b)) for a, b in self.bounds)
        for a, b in bounds:
            if not a < b:
                raise ValidationError(f"bounds must satisfy a < b, got ({a}, {b})")
        object.__setattr__(self, "bounds", bounds)
        if len(bounds) == 2:
            if self.tau is None or not np.isfinite(self.tau) or self.tau < 0:
                raise ValidationError("2D forward model needs a finite tau >= 0")

    @property
    def dim(self) -> int:
        return len(self.bounds)


def _target_coords(targets):
    if isinstance(targets, ElectrodeArray):
        return targets.coords
    c = np.asarray(targets, dtype=float)
    if c.ndim == 2 and c.shape[1] == 1:
        c = c[:, 0]
    return c


def _check_consistent(grid: QuadratureGrid, params: ForwardParams, coords):
    if grid.dim != params.dim:
        raise ConfigurationError(f"grid is {grid.dim}D but forward params are {params.dim}D")
    if not np.allclose(np.asarray(grid.bounds), np.asarray(params.bounds), rtol=1e-12, atol=1e-9):
        raise ConfigurationError(f"grid bounds {grid.bounds} do not match forward bounds {params.bounds}")
    want = 1 if grid.dim == 1 else 2
    got = 1 if coords.ndim == 1 else coords.shape[1]
    if got != want:
        raise ConfigurationError(f"target coordinates are {got}D but the model is {want}D")


def _matrix(grid, coords, R, tau, with_grad=False):
    """Operator matrix and optionally its derivative in ``R``; assumes validated inputs."""
    w = grid.weights
    if grid.dim == 1:
        r = coords[:, None] - grid.axes[0][None, :]
        s = np.sqrt(r * r + R * R)
        # -(R/2) * a(z, z'; R) == -(sqrt(r^2 + R^2) - |r|) / 2
        a_scaled = R * R / (s + np.abs(r))
        A = -0.5 * a_scaled * w
        if not with_grad:
            return A
        return A, -0.5 * (R / s) * w
    nodes = grid.nodes
    r2 = (coords[:, 0, None] - nodes[None, :, 0]) ** 2 + (coords[:, 1, None] - nodes[None, :, 1]) ** 2
    if tau == 0 and np.any(r2 == 0):
        raise NumericalError("2D forward weight is singular: a target sits on a node with tau = 0")
    pref = -1.0 / (4.0 * np.pi)
    A = pref * _weight_2d_r2(r2, R, tau) * w
    if not with_grad:
        return A
    outer = R + tau
    return A, pref * w / np.sqrt(outer * outer + r2)


def operator_matrix(sources: QuadratureGrid, targets, params: ForwardParams):
    """Discretized forward operator ``A`` with quadrature weights and prefactor folded in.

    ``A[i, j] = prefactor * w_j * a(target_i, node_j)``, so that
    ``apply_forward(g) == A @ g`` for a field ``g`` sampled on the nodes.
    """
    coords = _target_coords(targets)
    _check_consistent(sources, params, coords)
    return _matrix(sources, coords, params.R, params.tau)


def apply_forward(csd_field, params: ForwardParams, targets, grid: QuadratureGrid):
    """Push a CSD field sampled on ``grid`` nodes through the forward model.

    ``csd_field`` has shape ``(n_nodes,)`` or ``(n_nodes, T)``; the result has
    shape ``(n_targets,)`` or ``(n_targets, T)``. Evaluated as an explicit
    weighted sum over nodes, one target at a time.
    """
    g = np.asarray(csd_field, dtype=float)
    coords = _target_coords(targets)
    _check_consistent(grid, params, coords)
    if g.shape[0] != grid.size:
        raise ValidationError(f"field has {g.shape[0]} nodes, grid has {grid.size}")
    if not np.all(np.isfinite(g)):
        raise ValidationError("CSD field must be finite")
    out = np.empty((coords.shape[0],) + g.shape[1:])
    for i in range(coords.shape[0]):
        row = _matrix(grid, coords[i : i + 1], params.R, params.tau)[0]
        out[i] = row @ g
    return out


@dataclass(frozen=True)
class ForwardOperator:
    """Quadrature grid plus the forward-model family used while ``R`` varies.

    Parameters
    ----------
    grid : QuadratureGrid
        Source nodes and weights.
    tau : float, optional
        Standoff distance for the 2D slab model.
    """

    grid: QuadratureGrid
    tau: float | None = None

    @classmethod
    def for_electrodes(cls, electrodes: ElectrodeArray, n_per_dim=100, scheme="gauss-legendre",
                       margin=0.0, tau=None):
        """Grid over the electrode span, optionally widened by ``margin`` on every side.

        For 2D arrays ``tau`` defaults to half the spacing between electrode columns.
        """
        bounds = [(a - margin, b + margin) for a, b in electrodes.span()]
        if electrodes.dim == 2:
            if tau is None:
                tau = default_tau(electrodes)
            if any(a == b for a, b in bounds):
                raise ConfigurationError("2D electrode span is degenerate; set a margin")
        grid = QuadratureGrid.make(bounds, n_per_dim=n_per_dim, scheme=scheme)
        return cls(grid, tau)

    @property
    def dim(self) -> int:
        return self.grid.dim

    @property
    def bounds(self):
        return self.grid.bounds

    def params(self, R) -> ForwardParams:
        return ForwardParams(float(R), self.grid.bounds, self.tau)

    def matrix(self, targets, R, with_grad=False):
        """``A`` for the given targets at radius ``R``; with ``with_grad`` also ``dA/dR``."""
        coords = _target_coords(targets)
        _check_consistent(self.grid, self.params(R), coords)
        return _matrix(self.grid, coords, float(R), self.tau, with_grad=with_grad)

    def contains(self, coords) -> np.ndarray:
        """Boolean mask of coordinates lying inside the integration bounds."""
        c = np.asarray(coords, dtype=float).reshape(len(coords), -1)
        mask = np.ones(c.shape[0], dtype=bool)
        for d, (a, b) in enumerate(self.grid.bounds):
            mask &= (c[:, d] >= a - 1e-9) & (c[:, d] <= b + 1e-9)
        return mask


def default_tau(electrodes: ElectrodeArray) -> float:
    """Half the smallest spacing between distinct electrode columns (``y`` values)."""
    ys = np.unique(np.round(electrodes.coords[:, 0], 9))
    if ys.size < 2:
        raise ConfigurationError("cannot infer tau from a single electrode column; pass tau")
    return 0.5 * float(np.min(np.diff(ys)))
