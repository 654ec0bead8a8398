"""In-memory LFP dataset and the preprocessing steps applied before fitting."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .forward import ElectrodeArray


@dataclass(frozen=True)
class LfpDataset:
    """Trials x channels x time voltages with electrode geometry.

    Parameters
    ----------
    lfp : ndarray, shape (n_trials, n_channels, n_samples)
    electrodes : ElectrodeArray
    sample_rate_hz : float
    t0_ms : float
        Time of the first sample, in milliseconds.
    """

    lfp: np.ndarray
    electrodes: ElectrodeArray
    sample_rate_hz: float
    t0_ms: float = 0.0

    def __post_init__(self):
        x = np.asarray(self.lfp, dtype=float)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3:
            raise ValidationError(f"lfp must be (trials, channels, samples), got shape {x.shape}")
        if not isinstance(self.electrodes, ElectrodeArray):
            object.__setattr__(self, "electrodes", ElectrodeArray(self.electrodes))
        if x.shape[1] != self.electrodes.count:
            raise ValidationError(f"lfp has {x.shape[1]} channels but {self.electrodes.count} electrodes")
        if x.shape[0] < 1 or x.shape[2] < 2:
            raise ValidationError("need at least one trial and two time samples")
        if not np.all(np.isfinite(x)):
            raise ValidationError("lfp contains NaN or infinite values")
        if not (np.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValidationError("sample rate must be positive")
        object.__setattr__(self, "lfp", x)

    @property
    def n_trials(self) -> int:
        return self.lfp.shape[0]

    @property
    def n_channels(self) -> int:
        return self.lfp.shape[1]

    @property
    def n_samples(self) -> int:
        return self.lfp.shape[2]

    @property
    def times(self) -> np.ndarray:
        """Sample times in milliseconds."""
        return self.t0_ms + np.arange(self.n_samples) * (1000.0 / self.sample_rate_hz)

    def subset(self, trials=None, samples=None) -> LfpDataset:
        x = self.lfp
        t0 = self.t0_ms
        if trials is not None:
            x = x[np.asarray(trials)] if not isinstance(trials, slice) else x[trials]
        if samples is not None:
            idx = np.arange(self.n_samples)[samples]
            x = x[:, :, idx]
            t0 = self.t0_ms + idx[0] * 1000.0 / self.sample_rate_hz
        return replace(self, lfp=x, t0_ms=t0)

    def scaled(self, factor) -> LfpDataset:
        return replace(self, lfp=self.lfp * factor)


def subtract_evoked(dataset: LfpDataset) -> tuple[LfpDataset, np.ndarray]:
    """Remove the trial-average LFP from every trial; returns the dataset and the average."""
    avg = dataset.lfp.mean(axis=0)
    return replace(dataset, lfp=dataset.lfp - avg), avg


def unit_variance_scale(dataset: LfpDataset) -> float:
    """Multiplier that brings the pooled LFP standard deviation to 1."""
    sd = float(np.std(dataset.lfp))
    if sd == 0:
        raise ValidationError("LFP is constant; cannot normalize")
    return 1.0 / sd
