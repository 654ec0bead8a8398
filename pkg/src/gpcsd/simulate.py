"""Ground-truth CSD generators, LFP synthesis and estimator scoring.

Two families of studies are supported:

* the four-bump dipole template on a 2400 x 50 grid, pushed through the 1D
  forward model with the trapezoid rule;
* multi-trial draws from separable spatiotemporal GPs (SE spatial kernel times
  a sum of temporal kernels, Matérn-3/2 included) for estimator comparisons
  and model mis-specification checks.

All randomness flows through one ``numpy.random.Generator`` (PCG64) per study,
seeded from the study spec.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import stats

from .dataset import LfpDataset
from .errors import NumericalError, ValidationError
from .forward import ElectrodeArray, ForwardParams, QuadratureGrid, operator_matrix

__all__ = [
    "Bump",
    "DipoleTemplate",
    "make_dipole",
    "gen_lfp",
    "StudySpec",
    "GpTrials",
    "gen_gp_trials",
    "load_study",
    "rescale_unit_max",
    "score",
    "paired_ttest",
]


@dataclass(frozen=True)
class Bump:
    z_mean: float
    t_mean: float
    z_sd: float
    t_sd: float
    sign: int


CANONICAL_BUMPS = (
    Bump(200.0, 25.0, 150.0, 3.0, +1),
    Bump(800.0, 25.0, 150.0, 3.0, -1),
    Bump(1600.0, 30.0, 150.0, 4.0, +1),
    Bump(2200.0, 30.0, 150.0, 4.0, -1),
)


@dataclass
class DipoleTemplate:
    """Signed Gaussian bumps sampled on a space x time grid.

    ``field`` has shape ``(len(z), len(t))`` and is scaled so its maximum
    absolute value is 1. :meth:`evaluate` applies the same scaling at
    arbitrary points.
    """

    bumps: tuple
    z: np.ndarray
    t: np.ndarray
    field: np.ndarray
    scale: float

    def evaluate(self, z, t):
        z = np.asarray(z, dtype=float)[:, None]
        t = np.asarray(t, dtype=float)[None, :]
        out = np.zeros((z.shape[0], t.shape[1]))
        for b in self.bumps:
            out += b.sign * np.exp(-0.5 * ((z - b.z_mean) / b.z_sd) ** 2
                                   - 0.5 * ((t - b.t_mean) / b.t_sd) ** 2)
        return out * self.scale


def make_dipole(n_space=2400, n_time=50, z_max=2400.0, bumps=CANONICAL_BUMPS) -> DipoleTemplate:
    """The canonical two-dipole template on ``n_space`` points in ``[0, z_max]``."""
    z = np.linspace(0.0, z_max, n_space)
    t = np.arange(n_time, dtype=float)
    tmpl = DipoleTemplate(tuple(bumps), z, t, np.empty(0), 1.0)
    raw = tmpl.evaluate(z, t)
    tmpl.scale = 1.0 / float(np.max(np.abs(raw)))
    tmpl.field = raw * tmpl.scale
    return tmpl


def forward_trapezoid(csd, z_nodes, R, electrodes: ElectrodeArray):
    """Forward-project a CSD sampled on ``z_nodes`` with the trapezoid rule."""
    grid = QuadratureGrid.from_nodes(z_nodes)
    params = ForwardParams(R, grid.bounds)
    A = operator_matrix(grid, electrodes, params)
    return A @ np.asarray(csd, dtype=float)


def gen_lfp(csd, z_nodes, R, noise_var, electrodes: ElectrodeArray, seed=None, rng=None,
            sample_rate_hz=1000.0, gain=1.0):
    """Noisy LFP from ground-truth CSD(s).

    ``csd`` is ``(n_nodes, T)`` or ``(n_trials, n_nodes, T)``. The noiseless
    LFP is multiplied by ``gain`` before i.i.d. Gaussian noise of variance
    ``noise_var`` is added.

    Returns
    -------
    dataset : LfpDataset
    noiseless : ndarray
    """
    g = np.asarray(csd, dtype=float)
    single = g.ndim == 2
    if single:
        g = g[None]
    clean = forward_trapezoid(g, z_nodes, R, electrodes) * gain
    if rng is None:
        rng = np.random.default_rng(seed)
    noisy = clean + np.sqrt(noise_var) * rng.standard_normal(clean.shape) if noise_var > 0 else clean.copy()
    return LfpDataset(noisy, electrodes, sample_rate_hz), clean


def _temporal_component(kind, t, ell, var):
    d = np.abs(t[:, None] - t[None, :])
    if kind == "se":
        return var * np.exp(-0.5 * (d / ell) ** 2)
    if kind == "exp":
        return var * np.exp(-d / ell)
    if kind == "matern32":
        r = np.sqrt(3.0) * d / ell
        return var * (1.0 + r) * np.exp(-r)
    raise ValidationError(f"unknown temporal kernel {kind!r}")


def _psd_sqrt(K, what):
    K = 0.5 * (K + K.T)
    lam, Q = np.linalg.eigh(K)
    top = max(lam[-1], 0.0)
    if lam[0] < -1e-8 * max(top, 1e-300):
        raise NumericalError(f"{what} kernel matrix is not positive semidefinite (min eig {lam[0]:.3e})")
    return Q * np.sqrt(np.clip(lam, 0.0, None))


@dataclass
class StudySpec:
    """Configuration of a simulation study (the record of truth for generated data)."""

    name: str
    kind: str = "gp"
    electrodes: dict = field(default_factory=lambda: {"start": 0.0, "stop": 2400.0, "count": 24})
    n_times: int = 60
    sample_rate_hz: float = 1000.0
    n_train: int = 50
    n_test: int = 50
    R: float = 150.0
    spatial_ell: float = 200.0
    temporal: list = field(default_factory=list)
    noise_var: float = 0.0
    grid_step: float = 10.0
    z_max: float = 2400.0
    lfp_peak: float | None = None
    seed: int = 0
    fit_model: dict = field(default_factory=dict)
    notes: str = ""

    def electrode_array(self) -> ElectrodeArray:
        e = self.electrodes
        if "coords" in e:
            return ElectrodeArray(e["coords"])
        return ElectrodeArray(np.linspace(e["start"], e["stop"], int(e["count"])))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown study fields: {sorted(extra)}")
        return cls(**d)


def load_study(name_or_path) -> StudySpec:
    """Load a shipped study (``dipole``, ``gp``, ``misspec3``, ``misspec2``) or a JSON file."""
    p = Path(str(name_or_path))
    if p.suffix == ".json" and p.exists():
        text = p.read_text()
    else:
        try:
            text = resources.files("gpcsd.studies").joinpath(f"{name_or_path}.json").read_text()
        except FileNotFoundError:
            raise ValidationError(f"unknown study {name_or_path!r}") from None
    return StudySpec.from_dict(json.loads(text))


@dataclass
class GpTrials:
    """Ground truth and LFP for a multi-trial GP study.

    ``csd_nodes`` is ``(n_trials, n_nodes, T)`` on ``z_nodes``; ``csd_electrodes``
    is the truth at the electrode positions.
    """

    spec: StudySpec
    z_nodes: np.ndarray
    csd_nodes: np.ndarray
    csd_electrodes: np.ndarray
    dataset: LfpDataset
    noiseless: np.ndarray

    def split(self):
        """``(train, test)`` index arrays; the first ``n_train`` trials train."""
        n = self.spec.n_train
        return np.arange(n), np.arange(n, n + self.spec.n_test)


def study_nodes(spec: StudySpec, electrodes: ElectrodeArray):
    dense = np.linspace(0.0, spec.z_max, int(round(spec.z_max / spec.grid_step)) + 1)
    return np.union1d(np.round(dense, 9), np.round(electrodes.coords, 9))


def gen_gp_trials(spec: StudySpec, n_trials=None, seed=None) -> GpTrials:
    """Exact draws from the study's separable GP, pushed through the forward model.

    The spatial and temporal factors are symmetric square roots of the
    kernel matrices, so the draw ``Ls Z Lt^T`` has covariance ``Ks (x) Kt``.
    """
    electrodes = spec.electrode_array()
    n_trials = spec.n_train + spec.n_test if n_trials is None else int(n_trials)
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    z = study_nodes(spec, electrodes)
    t = np.arange(spec.n_times) * (1000.0 / spec.sample_rate_hz)
    Ks = np.exp(-0.5 * ((z[:, None] - z[None, :]) / spec.spatial_ell) ** 2)
    Kt = np.zeros((t.size, t.size))
    for comp in spec.temporal:
        Kt += _temporal_component(comp["kernel"], t, float(comp["ell"]), float(comp["var"]))
    Ls = _psd_sqrt(Ks, "spatial")
    Lt = _psd_sqrt(Kt, "temporal")
    Zs = rng.standard_normal((n_trials, Ls.shape[1], Lt.shape[1]))
    csd = Ls @ Zs @ Lt.T
    ds, clean = gen_lfp(csd, z, spec.R, spec.noise_var, electrodes, rng=rng,
                        sample_rate_hz=spec.sample_rate_hz)
    idx = np.searchsorted(z, np.round(electrodes.coords, 9))
    return GpTrials(spec, z, csd, csd[:, idx, :], ds, clean)


def dipole_study(spec: StudySpec, seed=None):
    """Dipole template, its noiseless LFP and a noisy dataset for ``spec``.

    With ``spec.lfp_peak`` set, the noiseless LFP is scaled to that peak
    absolute value before noise is added.
    """
    tmpl = make_dipole(z_max=spec.z_max, n_time=spec.n_times)
    electrodes = spec.electrode_array()
    clean = forward_trapezoid(tmpl.field, tmpl.z, spec.R, electrodes)
    gain = 1.0 if spec.lfp_peak is None else spec.lfp_peak / float(np.max(np.abs(clean)))
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    ds, clean = gen_lfp(tmpl.field, tmpl.z, spec.R, spec.noise_var, electrodes, rng=rng,
                        sample_rate_hz=spec.sample_rate_hz, gain=gain)
    return tmpl, ds, clean


def rescale_unit_max(x, axis=None):
    """Divide by the maximum absolute value (per slice when ``axis`` is given)."""
    x = np.asarray(x, dtype=float)
    m = np.max(np.abs(x), axis=axis, keepdims=axis is not None)
    return x / np.where(m == 0, 1.0, m)


@dataclass
class Score:
    per_trial: np.ndarray
    mean: float
    sd: float
    per_location: np.ndarray


def score(pred, truth, rescale=True) -> Score:
    """MSE between predicted and true CSDs, shape ``(trials, locations, times)``.

    With ``rescale`` each trial of both arrays is first divided by its
    maximum absolute value.
    """
    p = np.asarray(pred, dtype=float)
    g = np.asarray(truth, dtype=float)
    if p.ndim == 2:
        p, g = p[None], g[None] if g.ndim == 2 else g
    if p.shape != g.shape:
        raise ValidationError(f"prediction shape {p.shape} does not match truth {g.shape}")
    if rescale:
        p = rescale_unit_max(p, axis=(1, 2))
        g = rescale_unit_max(g, axis=(1, 2))
    err = (p - g) ** 2
    per_trial = err.mean(axis=(1, 2))
    return Score(per_trial, float(per_trial.mean()), float(per_trial.std(ddof=1)) if per_trial.size > 1 else 0.0,
                 err.mean(axis=(0, 2)))


def paired_ttest(a, b):
    """Paired t-test on per-trial errors; identical samples give ``t = 0, p = 1``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("paired samples must have equal length")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    res = stats.ttest_rel(a, b)
    return float(res.statistic), float(res.pvalue)
