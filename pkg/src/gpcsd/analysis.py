"""Post-hoc analysis of predicted CSDs: evoked means, periodograms, phases and PLV."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import signal

from .errors import ValidationError
from .gp import CsdPrediction

__all__ = [
    "evoked_mean",
    "Spectrum",
    "periodogram",
    "component_spectra",
    "extract_phase",
    "interior_mask",
    "PhaseTensor",
    "phase_tensor",
    "plv",
    "plv_matrix",
]

EDGE_FRACTION = 0.05
FILTER_ORDER = 4


def evoked_mean(predictions, component="total"):
    """Trial average of predicted fields.

    ``predictions`` is a :class:`CsdPrediction`, a list of them (aligned
    grids and times; trials are pooled), or an array ``(trials, nodes, times)``.
    """
    if isinstance(predictions, CsdPrediction):
        predictions = [predictions]
    if isinstance(predictions, (list, tuple)) and predictions and isinstance(predictions[0], CsdPrediction):
        ref = predictions[0]
        for p in predictions[1:]:
            if p.grid.shape != ref.grid.shape or not np.array_equal(p.grid, ref.grid):
                raise ValidationError("predictions are on different spatial grids")
            if p.times.shape != ref.times.shape or not np.array_equal(p.times, ref.times):
                raise ValidationError("predictions are on different time grids")
        stack = np.concatenate([getattr(p, component) for p in predictions], axis=0)
    else:
        stack = np.asarray(predictions, dtype=float)
        if stack.ndim == 2:
            stack = stack[None]
    if stack.ndim != 3 or stack.shape[0] == 0:
        raise ValidationError("need a non-empty (trials, nodes, times) stack")
    return stack.mean(axis=0)


def _sample_rate(sample_rate=None, times=None):
    if times is not None:
        t = np.asarray(times, dtype=float)
        dt = np.diff(t)
        if dt.size == 0 or np.any(dt <= 0) or np.max(np.abs(dt - dt.mean())) > 1e-9 * max(abs(dt.mean()), 1.0):
            raise ValidationError("time grid is not uniformly sampled")
        fs = 1000.0 / dt.mean()
        if sample_rate is not None and not np.isclose(fs, sample_rate, rtol=1e-9):
            raise ValidationError(f"times imply {fs:g} Hz but sample_rate is {sample_rate:g} Hz")
        return fs
    if sample_rate is None or not (np.isfinite(sample_rate) and sample_rate > 0):
        raise ValidationError("sample rate must be positive")
    return float(sample_rate)


@dataclass
class Spectrum:
    """Trial-averaged one-sided power per node.

    ``power[..., k]`` is the power at ``frequencies[k]``; with the default
    normalization the sum over frequencies equals the mean per-trial energy
    ``sum_t x[t]**2``.
    """

    frequencies: np.ndarray
    power: np.ndarray
    sample_rate: float
    n_samples: int

    def to_csv(self, path, coords=None, label=""):
        coords = np.arange(self.power.shape[0]) if coords is None else np.asarray(coords)
        with open(path, "w", newline="") as fh:
            fh.write(f"# spectrum {label} sample_rate_hz={self.sample_rate!r} n_samples={self.n_samples}\n")
            w = csv.writer(fh)
            w.writerow(["node", "coordinate", *[f"{f:.17g}" for f in self.frequencies]])
            for i, row in enumerate(self.power):
                c = coords[i]
                cs = " ".join(f"{v:.17g}" for v in np.atleast_1d(c))
                w.writerow([i, cs, *[f"{v:.17g}" for v in row]])


def periodogram(x, sample_rate=None, times=None, window=None) -> Spectrum:
    """Plain (untapered) periodogram along the last axis, averaged over trials.

    Parameters
    ----------
    x : ndarray, shape (trials, nodes, T) or (nodes, T)
    window : str, optional
        A :func:`scipy.signal.get_window` name; off by default. A window is
        rescaled to unit mean square so white-noise power is unchanged.

    Notes
    -----
    ``|rfft|**2 / T`` with non-DC, non-Nyquist bins doubled, so that the sum
    over bins equals ``sum_t x[t]**2`` (Parseval).
    """
    fs = _sample_rate(sample_rate, times)
    a = np.asarray(x, dtype=float)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise ValidationError("expected (trials, nodes, times)")
    n = a.shape[-1]
    if window is not None:
        w = signal.get_window(window, n)
        a = a * (w / np.sqrt(np.mean(w * w)))
    F = np.fft.rfft(a, axis=-1)
    p = np.abs(F) ** 2 / n
    p[..., 1 : (n + 1) // 2] *= 2.0
    return Spectrum(np.fft.rfftfreq(n, d=1.0 / fs), p.mean(axis=0), fs, n)


def component_spectra(prediction: CsdPrediction, sample_rate=None, window=None) -> dict:
    """Periodograms of the evoked-subtracted slow, fast and total components."""
    out = {}
    for name in ("slow", "fast", "total"):
        comp = getattr(prediction, name)
        if name == "total":
            comp = comp - comp.mean(axis=0)
        out[name] = periodogram(comp, sample_rate, times=prediction.times, window=window)
    return out


def extract_phase(x, band, sample_rate):
    """Instantaneous phase after zero-phase Butterworth band-pass filtering.

    Parameters
    ----------
    x : ndarray
        Signals with time on the last axis.
    band : (low, high)
        Pass band in Hz, ``0 < low < high < sample_rate / 2``.

    Returns
    -------
    ndarray
        Angles in ``(-pi, pi]``, same shape as ``x``. Samples within
        :data:`EDGE_FRACTION` of either end carry filter transients; see
        :func:`interior_mask`.
    """
    lo, hi = (float(v) for v in band)
    nyq = 0.5 * float(sample_rate)
    if not (0 < lo < hi):
        raise ValidationError(f"band must satisfy 0 < low < high, got ({lo}, {hi})")
    if hi >= nyq:
        raise ValidationError(f"band edge {hi} Hz is at or above the Nyquist frequency {nyq} Hz")
    sos = signal.butter(FILTER_ORDER, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
    y = signal.sosfiltfilt(sos, np.asarray(x, dtype=float), axis=-1)
    ph = np.angle(signal.hilbert(y, axis=-1))
    # np.angle returns [-pi, pi]; fold -pi onto pi
    return np.where(ph <= -np.pi, np.pi, ph)


def interior_mask(n_samples, fraction=EDGE_FRACTION):
    """Boolean mask that drops the first and last ``fraction`` of samples."""
    k = int(np.ceil(fraction * n_samples))
    m = np.zeros(n_samples, dtype=bool)
    m[k : n_samples - k] = True
    return m


@dataclass
class PhaseTensor:
    """Per-trial phases of every node at one time index and frequency band."""

    phases: np.ndarray
    band: tuple
    time_index: int
    coords: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.phases, dtype=float)
        if p.ndim != 2:
            raise ValidationError("phases must be (trials, nodes)")
        if np.any(p <= -np.pi - 1e-12) or np.any(p > np.pi + 1e-12):
            raise ValidationError("phases must lie in (-pi, pi]")
        self.phases = p

    @property
    def n_trials(self):
        return self.phases.shape[0]

    @property
    def n_nodes(self):
        return self.phases.shape[1]


def phase_tensor(x, band, sample_rate, time_index, coords=None, subtract_evoked=True) -> PhaseTensor:
    """Phases at ``time_index`` for ``x`` of shape ``(trials, nodes, T)``.

    The trial average is removed first unless ``subtract_evoked`` is false.
    """
    a = np.asarray(x, dtype=float)
    if a.ndim != 3:
        raise ValidationError("expected (trials, nodes, times)")
    n = a.shape[-1]
    if not 0 <= time_index < n:
        raise ValidationError(f"time index {time_index} outside [0, {n})")
    if not interior_mask(n)[time_index]:
        raise ValidationError(f"time index {time_index} falls in the excluded filter edge")
    if subtract_evoked:
        a = a - a.mean(axis=0)
    ph = extract_phase(a, band, sample_rate)[..., time_index]
    return PhaseTensor(ph, tuple(float(b) for b in band), int(time_index), coords)


def plv(phases_a, phases_b):
    """Phase locking value ``|mean(exp(i (a - b)))|`` over the trial axis (axis 0)."""
    a = np.asarray(phases_a, dtype=float)
    b = np.asarray(phases_b, dtype=float)
    if a.shape != b.shape:
        raise ValidationError("phase arrays must have the same shape")
    if a.shape[0] == 0:
        raise ValidationError("no trials")
    return np.abs(np.mean(np.exp(1j * (a - b)), axis=0))


def plv_matrix(pt: PhaseTensor) -> np.ndarray:
    """Node-by-node PLV; symmetric with a unit diagonal."""
    if pt.n_trials == 0:
        raise ValidationError("no trials")
    z = np.exp(1j * pt.phases)
    m = np.abs(z.T @ z.conj()) / pt.n_trials
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 1.0)
    return np.minimum(m, 1.0)


def plv_to_csv(path, matrix, pt: PhaseTensor):
    with open(path, "w", newline="") as fh:
        fh.write(f"# plv band_hz={pt.band[0]!r},{pt.band[1]!r} time_index={pt.time_index}\n")
        coords = pt.coords if pt.coords is not None else np.arange(matrix.shape[0])
        labels = [" ".join(f"{v:.17g}" for v in np.atleast_1d(c)) for c in coords]
        w = csv.writer(fh)
        w.writerow(["node", *labels])
        for lab, row in zip(labels, matrix):
            w.writerow([lab, *[f"{v:.17g}" for v in row]])
