"""Priors, quantile matching and multi-restart MAP fitting.

Lengthscales and ``R`` get inverse-Gamma priors (shape ``alpha``, scale
``beta``, density proportional to ``x^(-alpha-1) exp(-beta/x)``) whose 1% and
99% quantiles are pinned to data-derived distances. Variances get half-Normal
priors. The optimizer works on ``log(theta)`` with L-BFGS-B.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize as sopt
from scipy import special, stats

from .dataset import LfpDataset
from .errors import FitError, NumericalError, ValidationError
from .forward import ElectrodeArray, ForwardOperator
from .gp import log_map_objective
from .kernels import Hyperparameters

log = logging.getLogger(__name__)

__all__ = [
    "InverseGamma",
    "HalfNormal",
    "PriorSet",
    "RestartRecord",
    "FitReport",
    "invgamma_from_quantiles",
    "default_priors",
    "fit_map",
]

DEFAULT_RESTARTS = 10
VAR_BOUNDS = (1e-16, 1e3)
NOISE_BOUNDS = (1e-12, 1e2)
PRIOR_PROFILES = {
    "default": {},
    "auditory": {"ell_t_slow": (30.0, 100.0), "ell_t_fast": (1.0, 20.0)},
}


@dataclass(frozen=True)
class InverseGamma:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError(f"inverse-Gamma parameters must be positive: {self}")

    def logpdf(self, x):
        a, b = self.alpha, self.beta
        return a * np.log(b) - special.gammaln(a) - (a + 1.0) * np.log(x) - b / x

    def dlogpdf(self, x):
        return -(self.alpha + 1.0) / x + self.beta / x**2

    def cdf(self, x):
        return special.gammaincc(self.alpha, self.beta / np.asarray(x, dtype=float))

    def ppf(self, p):
        return stats.invgamma(self.alpha, scale=self.beta).ppf(p)

    def sample(self, rng):
        return self.beta / rng.gamma(self.alpha)

    def to_dict(self):
        return {"family": "inverse_gamma", "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True)
class HalfNormal:
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise ValidationError(f"half-Normal sd must be positive, got {self.sd}")

    def logpdf(self, x):
        return np.log(2.0) - np.log(self.sd) - 0.5 * np.log(2 * np.pi) - 0.5 * (x / self.sd) ** 2

    def dlogpdf(self, x):
        return -x / self.sd**2

    def sample(self, rng):
        return abs(rng.normal(0.0, self.sd))

    def to_dict(self):
        return {"family": "half_normal", "sd": self.sd}


def prior_from_dict(d):
    if d is None:
        return None
    if d["family"] == "inverse_gamma":
        return InverseGamma(d["alpha"], d["beta"])
    if d["family"] == "half_normal":
        return HalfNormal(d["sd"])
    raise ValidationError(f"unknown prior family {d['family']!r}")


def invgamma_from_quantiles(q01_value, q99_value, lower=0.01, upper=0.99) -> InverseGamma:
    """Inverse-Gamma whose ``lower`` and ``upper`` quantiles sit at the given values.

    For fixed shape the scale is pinned by either quantile, so matching both
    reduces to a 1D root in ``log(alpha)`` on the quantile ratio.
    """
    lo, hi = float(q01_value), float(q99_value)
    if not (0 < lo < hi and np.isfinite(hi)):
        raise ValidationError(f"need 0 < q01 < q99, got ({lo}, {hi})")
    target = np.log(hi / lo)

    def gap(log_a):
        a = np.exp(log_a)
        with np.errstate(divide="ignore"):
            return np.log(special.gammainccinv(a, lower) / special.gammainccinv(a, upper)) - target

    a_lo, a_hi = -6.0, 18.0
    if not gap(a_lo) > 0 > gap(a_hi):
        raise NumericalError(f"quantile ratio {hi / lo:.6g} outside the solvable range")
    try:
        log_a = sopt.brentq(gap, a_lo, a_hi, xtol=1e-14, rtol=1e-14, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        raise NumericalError(f"inverse-Gamma quantile solve failed for ({lo}, {hi}): {exc}") from exc
    alpha = float(np.exp(log_a))
    beta = float(lo * special.gammainccinv(alpha, lower))
    out = InverseGamma(alpha, beta)
    err = max(abs(out.cdf(lo) - lower), abs(out.cdf(hi) - upper))
    if not err < 1e-6:
        raise NumericalError(f"inverse-Gamma quantile match off by {err:.2e} for ({lo}, {hi})")
    return out


@dataclass
class PriorSet:
    """Per-parameter priors and optimization bounds, keyed by parameter name.

    A prior of ``None`` is flat. ``quantiles`` records the matched 1%/99%
    values of the inverse-Gamma priors for provenance.
    """

    dim: int
    priors: dict
    bounds: dict
    quantiles: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in Hyperparameters.names(self.dim):
            self.priors.setdefault(name, None)
            lo, hi = self.bounds.setdefault(name, (0.0, np.inf))
            if not (0 <= lo < hi):
                raise ValidationError(f"bounds for {name} must be ordered and non-negative: {(lo, hi)}")

    @property
    def names(self):
        return Hyperparameters.names(self.dim)

    def in_support(self, theta: Hyperparameters) -> bool:
        for name, v in zip(self.names, theta.to_vector()):
            lo, hi = self.bounds[name]
            if not (lo <= v <= hi):
                return False
            if isinstance(self.priors[name], InverseGamma) and v <= 0:
                return False
        return True

    def log_density(self, theta: Hyperparameters, return_grad=False):
        v = theta.to_vector()
        total, grad = 0.0, np.zeros_like(v)
        for i, name in enumerate(self.names):
            p = self.priors[name]
            if p is None:
                continue
            total += float(p.logpdf(v[i]))
            grad[i] = p.dlogpdf(v[i])
        return (total, grad) if return_grad else total

    def with_quantiles(self, name, q01, q99, bounds=None) -> PriorSet:
        priors = dict(self.priors)
        priors[name] = invgamma_from_quantiles(q01, q99)
        quant = dict(self.quantiles)
        quant[name] = (float(q01), float(q99))
        b = dict(self.bounds)
        if bounds is not None:
            b[name] = tuple(bounds)
        return PriorSet(self.dim, priors, b, quant)

    def with_profile(self, profile: str) -> PriorSet:
        try:
            overrides = PRIOR_PROFILES[profile]
        except KeyError:
            raise ValidationError(f"unknown prior profile {profile!r}") from None
        out = self
        for name, (lo, hi) in overrides.items():
            out = out.with_quantiles(name, lo, hi)
        return out

    def drop(self, names) -> PriorSet:
        """Flat priors and unbounded support for ``names`` (used for fixed parameters)."""
        priors = {k: (None if k in names else v) for k, v in self.priors.items()}
        bounds = {k: ((0.0, np.inf) if k in names else v) for k, v in self.bounds.items()}
        return PriorSet(self.dim, priors, bounds, dict(self.quantiles))

    def sample(self, rng, max_tries=1000) -> dict:
        """Draw every parameter from its prior, rejecting draws outside the bounds."""
        out = {}
        for name in self.names:
            p = self.priors[name]
            lo, hi = self.bounds[name]
            for _ in range(max_tries):
                if p is None:
                    lo_f = max(lo, 1e-300)
                    hi_f = hi if np.isfinite(hi) else lo_f * 1e6 if lo_f > 0 else 1.0
                    v = float(np.exp(rng.uniform(np.log(lo_f), np.log(hi_f))))
                else:
                    v = float(p.sample(rng))
                if lo <= v <= hi:
                    break
            else:
                v = float(np.clip(v, lo, hi))
            out[name] = v
        return out

    def to_dict(self):
        return {
            "dim": self.dim,
            "parameterization": "inverse_gamma: shape alpha, scale beta",
            "priors": {k: (None if v is None else v.to_dict()) for k, v in self.priors.items()},
            # infinite bounds (fixed parameters) serialize as null
            "bounds": {k: [_finite_or_none(a), _finite_or_none(b)] for k, (a, b) in self.bounds.items()},
            "quantiles": {k: list(v) for k, v in self.quantiles.items()},
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["dim"], {k: prior_from_dict(v) for k, v in d["priors"].items()},
                   {k: (v[0] or 0.0, np.inf if v[1] is None else v[1]) for k, v in d["bounds"].items()},
                   {k: tuple(v) for k, v in d.get("quantiles", {}).items()})


def _finite_or_none(v):
    return float(v) if np.isfinite(v) else None


def _spacing(values):
    u = np.unique(np.asarray(values, dtype=float))
    if u.size < 2:
        return None, None
    return float(np.min(np.diff(u))), float(u[-1] - u[0])


def default_priors(dataset: LfpDataset, electrodes: ElectrodeArray | None = None) -> PriorSet:
    """Data-derived default priors and bounds (expects roughly unit-variance data).

    * ``R``: 1%/99% quantiles at the minimum and half the maximum
      inter-electrode distance; bounded to [0.5 min, 0.8 max].
    * spatial lengthscale per dimension: quantiles at 1.2 min and 0.8 max
      coordinate spacing; bounded to [0.5 min, max].
    * temporal lengthscales (both): quantiles at 1.2 and 0.8 times the
      minimum and maximum time differences; bounded to [0.5 min, max].
    * ``var_fast``, ``var_slow``: half-Normal(2); ``noise_var``: half-Normal(0.5).
    """
    electrodes = electrodes if electrodes is not None else dataset.electrodes
    times = dataset.times
    if electrodes.count < 2 or times.size < 2:
        raise ValidationError("default priors need at least 2 electrodes and 2 time points")
    dist = electrodes.pairwise_distances()
    nz = dist[dist > 0]
    d_min, d_max = float(nz.min()), float(nz.max())
    dim = electrodes.dim
    names = Hyperparameters.names(dim)
    priors, bounds, quant = {}, {}, {}

    def ig(name, lo, hi, b):
        priors[name] = invgamma_from_quantiles(lo, hi)
        quant[name] = (lo, hi)
        bounds[name] = b

    ig("R", d_min, 0.5 * d_max, (0.5 * d_min, 0.8 * d_max))
    coords = electrodes.coords.reshape(electrodes.count, -1)
    for d, name in enumerate(names[1 : 1 + dim]):
        s_min, s_span = _spacing(coords[:, d])
        if s_min is None:
            raise ValidationError(f"spatial dimension {d} has a single coordinate value")
        ig(name, 1.2 * s_min, 0.8 * s_span, (0.5 * s_min, s_span))
    t_min, t_span = _spacing(times)
    for name in ("ell_t_slow", "ell_t_fast"):
        ig(name, 1.2 * t_min, 0.8 * t_span, (0.5 * t_min, t_span))
    priors["var_fast"] = HalfNormal(2.0)
    priors["var_slow"] = HalfNormal(2.0)
    priors["noise_var"] = HalfNormal(0.5)
    bounds["var_fast"] = VAR_BOUNDS
    bounds["var_slow"] = VAR_BOUNDS
    bounds["noise_var"] = NOISE_BOUNDS
    return PriorSet(dim, priors, bounds, quant)


@dataclass
class RestartRecord:
    index: int
    initial: dict
    final: dict
    initial_objective: float
    objective: float
    converged: bool
    iterations: int
    message: str

    def to_dict(self):
        d = dict(self.__dict__)
        for k in ("initial_objective", "objective"):
            d[k] = _finite_or_none(d[k])
        return d


@dataclass
class FitReport:
    """Outcome of :func:`fit_map`. ``best_objective`` is the max over restarts."""

    theta: Hyperparameters
    objective: float
    restarts: list
    boundary_hits: dict
    seed: int | None
    priors: PriorSet
    fixed: dict = field(default_factory=dict)
    best_index: int = 0

    def to_dict(self):
        return {
            "theta": self.theta.to_dict(),
            "objective": self.objective,
            "best_restart": self.best_index,
            "boundary_hits": self.boundary_hits,
            "seed": self.seed,
            "fixed": self.fixed,
            "priors": self.priors.to_dict(),
            "restarts": [r.to_dict() for r in self.restarts],
        }


def _boundary_hits(theta, priors, free):
    hits = {}
    for name, v in zip(priors.names, theta.to_vector()):
        lo, hi = priors.bounds[name]
        hit = False
        if name in free:
            for b in (lo, hi):
                if np.isfinite(b) and abs(v - b) < 1e-6 * abs(b):
                    hit = True
        hits[name] = hit
    return hits


def _minimize(neg, x0, f0, bounds, maxiter, ftol, gtol, max_polish=3):
    """L-BFGS-B with restarts from the last point after an abnormal line search.

    An abnormal exit usually means the objective is flat to round-off; a
    fresh start that cannot improve it by more than ``ftol`` (relative)
    confirms a stationary point.
    """
    opts = {"maxiter": maxiter, "ftol": ftol, "gtol": gtol}
    x, f, nit = x0, f0, 0
    for _ in range(1 + max_polish):
        res = sopt.minimize(neg, x, jac=True, method="L-BFGS-B", bounds=bounds, options=opts)
        nit += int(res.nit)
        improved = res.fun < f
        gain = f - res.fun if improved else 0.0
        if improved:
            x, f = res.x, float(res.fun)
        if res.success or not np.isfinite(f):
            return x, f, bool(res.success and np.isfinite(f)), nit, str(res.message)
        if nit >= maxiter:
            break
        if gain <= ftol * max(abs(f), 1.0):
            return x, f, True, nit, f"{res.message} (stationary to round-off)"
    return x, f, False, nit, str(res.message)


def fit_map(dataset: LfpDataset, fwd: ForwardOperator, priors: PriorSet,
            n_restarts: int = DEFAULT_RESTARTS, seed: int | None = 0, fixed: dict | None = None,
            maxiter=500, ftol=1e-9, gtol=1e-5) -> FitReport:
    """Maximize the log posterior over ``log(theta)`` from ``n_restarts`` prior draws.

    Parameters
    ----------
    fixed : dict, optional
        Parameter values held constant (e.g. ``{"var_fast": 0.0}`` for a
        slow-only temporal model). Fixed parameters get flat priors.

    Raises
    ------
    FitError
        If no restart converges.
    """
    if n_restarts < 1:
        raise ValidationError("n_restarts must be at least 1")
    fixed = {k: float(v) for k, v in (fixed or {}).items()}
    names = Hyperparameters.names(fwd.dim)
    unknown = set(fixed) - set(names)
    if unknown:
        raise ValidationError(f"unknown fixed parameters: {sorted(unknown)}")
    if priors.dim != fwd.dim:
        raise ValidationError("prior set and forward model disagree on dimension")
    pri = priors.drop(fixed) if fixed else priors
    free = [n for n in names if n not in fixed]
    free_idx = np.array([names.index(n) for n in free])
    rng = np.random.default_rng(seed)
    log_lo = np.log([max(pri.bounds[n][0], 1e-300) for n in free])
    log_hi = np.log([pri.bounds[n][1] for n in free])
    lo = np.array([pri.bounds[n][0] for n in free])
    hi = np.array([pri.bounds[n][1] for n in free])

    def theta_of(x):
        full = dict(fixed)
        # exp(log(bound)) can round just past the bound
        full.update(zip(free, np.clip(np.exp(x), lo, hi)))
        return Hyperparameters.from_vector([full[n] for n in names], fwd.dim)

    def neg(x):
        try:
            th = theta_of(x)
            val, g = log_map_objective(th, dataset, fwd, pri, return_grad=True)
        except NumericalError as exc:
            log.debug("objective failed at %s: %s", np.exp(x), exc)
            return np.inf, np.zeros_like(x)
        if not np.isfinite(val):
            return np.inf, np.zeros_like(x)
        return -val, -(g[free_idx] * np.exp(x))

    records = []
    for i in range(n_restarts):
        init = pri.sample(rng)
        if init["ell_t_fast"] > init["ell_t_slow"] and "ell_t_fast" in free and "ell_t_slow" in free:
            init["ell_t_fast"], init["ell_t_slow"] = init["ell_t_slow"], init["ell_t_fast"]
        x0 = np.clip(np.log([init[n] for n in free]), log_lo, log_hi)
        f0, _ = neg(x0)
        x, f, ok, nit, msg = _minimize(neg, x0, f0, list(zip(log_lo, log_hi)), maxiter, ftol, gtol)
        th0, th = theta_of(x0), theta_of(x)
        rec = RestartRecord(i, th0.to_dict(), th.to_dict(), -f0, -f, ok, nit, msg)
        log.info("restart %d: objective %.6g -> %.6g (%s)", i, -f0, -f, rec.message)
        records.append(rec)

    good = [r for r in records if r.converged]
    if not good:
        raise FitError(f"none of {n_restarts} restarts converged", records)
    top = max(r.objective for r in good)
    best = next(r for r in good if r.objective >= top - 1e-9 * max(1.0, abs(top)))
    theta = Hyperparameters.from_dict(best.final)
    hits = _boundary_hits(theta, pri, free)
    if any(hits.values()):
        warnings.warn("fitted parameters on an optimization bound: "
                      + ", ".join(k for k, v in hits.items() if v), stacklevel=2)
    return FitReport(theta, best.objective, records, hits, seed, priors, fixed, best.index)
