"""Expected BOLD regressors: stimulus trains convolved with a double-gamma HRF."""
from __future__ import annotations

import csv
import hashlib
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import FormatError, ParameterError


@dataclass
class StimulusSpec:
    onsets: np.ndarray
    durations: np.ndarray
    name: str = "task"

    def __post_init__(self):
        self.onsets = np.atleast_1d(np.asarray(self.onsets, dtype=float))
        self.durations = np.atleast_1d(np.asarray(self.durations, dtype=float))
        if self.onsets.shape != self.durations.shape:
            raise ParameterError("onsets and durations must have equal lengths")
        if np.any(self.onsets < 0) or np.any(np.diff(self.onsets) <= 0):
            raise ParameterError("onsets must be nonnegative and strictly increasing")
        if np.any(self.durations <= 0):
            raise ParameterError("durations must be positive")

    def shifted(self, seconds: float) -> "StimulusSpec":
        return StimulusSpec(self.onsets + seconds, self.durations.copy(), self.name)


@dataclass(frozen=True)
class HrfParams:
    peak_delay: float = 6.0
    undershoot_delay: float = 16.0
    peak_dispersion: float = 1.0
    undershoot_dispersion: float = 1.0
    undershoot_ratio: float = 1.0 / 6.0
    length: float = 32.0

    def __post_init__(self):
        vals = (self.peak_delay, self.undershoot_delay, self.peak_dispersion,
                self.undershoot_dispersion, self.undershoot_ratio, self.length)
        if any(not (math.isfinite(v) and v > 0) for v in vals):
            raise ParameterError("HRF parameters must be positive")
        if self.length < self.undershoot_delay:
            raise ParameterError("HRF length must be at least the undershoot delay")


@dataclass
class DesignMatrix:
    """``T x p`` regressors, one column per task."""

    values: np.ndarray
    tr: float = 2.0
    task_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise ParameterError("design must be a T x p matrix with p >= 1")
        if not np.all(np.isfinite(v)):
            raise ParameterError("design entries must be finite")
        self.values = v
        if not self.task_names:
            self.task_names = [f"task{i + 1}" for i in range(v.shape[1])]
        if len(self.task_names) != v.shape[1]:
            raise ParameterError("one task name per design column is required")

    @property
    def n_scans(self) -> int:
        return self.values.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.values.shape[1]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values, dtype="<f8").tobytes())
        h.update(repr(float(self.tr)).encode())
        h.update("\x00".join(self.task_names).encode())
        return h.hexdigest()[:16]


def _gamma_pdf(t, delay, dispersion):
    return stats.gamma.pdf(t, a=delay / dispersion, scale=dispersion)


def _hrf_raw(t, params: HrfParams):
    t = np.asarray(t, dtype=float)
    h = (_gamma_pdf(t, params.peak_delay, params.peak_dispersion)
         - params.undershoot_ratio * _gamma_pdf(t, params.undershoot_delay, params.undershoot_dispersion))
    return np.where(t < 0, 0.0, h)


def canonical_hrf(t, params: HrfParams = HrfParams(), resolution: float = 0.01):
    """Double-gamma HRF, scaled so its maximum over ``[0, length]`` is one.

    The peak used for scaling is found on a grid of step ``resolution``.
    Negative times give zero.
    """
    grid = np.arange(0.0, params.length + resolution / 2, resolution)
    peak = np.max(_hrf_raw(grid, params))
    return _hrf_raw(t, params) / peak


def stimulus_train(stim: StimulusSpec, n_samples: int, dt: float) -> np.ndarray:
    """Boxcar sampled at ``k * dt``: one while ``onset <= t < onset + duration``."""
    t = np.arange(n_samples) * dt
    f = np.zeros(n_samples)
    for onset, dur in zip(stim.onsets, stim.durations):
        f[(t >= onset - 1e-9) & (t < onset + dur - 1e-9)] = 1.0
    return f


def expected_bold(stim: StimulusSpec, n_scans: int, tr: float,
                  params: HrfParams = HrfParams(), upsample: int = 16,
                  normalize: bool = True) -> np.ndarray:
    """Convolve the stimulus train with the HRF on a ``tr / upsample`` grid.

    The result is sampled at scan times ``0, tr, 2 tr, ...`` and, unless
    ``normalize`` is false, divided by its maximum absolute value.
    """
    if n_scans < 1 or tr <= 0 or upsample < 1:
        raise ParameterError("need n_scans >= 1, tr > 0 and upsample >= 1")
    dt = tr / upsample
    n_fine = n_scans * upsample
    f = stimulus_train(stim, n_fine, dt)
    if not f.any():
        warnings.warn(f"stimulus '{stim.name}' has no events inside the scan window; "
                      "regressor is zero", RuntimeWarning, stacklevel=2)
        return np.zeros(n_scans)
    kernel = canonical_hrf(np.arange(0.0, params.length + dt / 2, dt), params)
    x = np.convolve(f, kernel)[:n_fine] * dt
    x = x[::upsample][:n_scans]
    if normalize:
        peak = np.max(np.abs(x))
        if peak > 0:
            x = x / peak
    return x


def build_design(stimuli: Sequence[StimulusSpec], n_scans: int, tr: float,
                 params: HrfParams = HrfParams(), upsample: int = 16,
                 normalize: bool = True) -> DesignMatrix:
    cols = [expected_bold(s, n_scans, tr, params, upsample, normalize) for s in stimuli]
    return DesignMatrix(np.column_stack(cols), tr=tr, task_names=[s.name for s in stimuli])


def load_stimulus(path, name: str | None = None) -> StimulusSpec:
    """Read an onset/duration[/amplitude] timing file (whitespace or comma separated)."""
    path = Path(path)
    onsets, durs = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.replace(",", " ").split()
            if len(parts) not in (2, 3):
                raise FormatError(f"{path}:{lineno}: expected 2 or 3 columns, got {len(parts)}")
            try:
                onsets.append(float(parts[0]))
                durs.append(float(parts[1]))
            except ValueError:
                if not onsets and lineno == 1:
                    continue  # header line
                raise FormatError(f"{path}:{lineno}: non-numeric timing entry") from None
    return StimulusSpec(np.array(onsets), np.array(durs), name or path.stem)


def load_design(path, tr: float = 2.0) -> DesignMatrix:
    """Parse a CSV design: header row of task names, then one row per scan."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if r]
    if not rows:
        raise FormatError(f"{path}: empty design file")
    header = [h.strip() for h in rows[0]]
    p = len(header)
    data = np.empty((len(rows) - 1, p))
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != p:
            raise FormatError(f"{path}: row {i} has {len(row)} cells, expected {p}")
        for j, cell in enumerate(row):
            try:
                val = float(cell)
            except ValueError:
                raise FormatError(f"{path}: row {i}, column '{header[j]}': "
                                  f"non-numeric cell {cell!r}") from None
            if not math.isfinite(val):
                raise FormatError(f"{path}: row {i}, column '{header[j]}': "
                                  f"non-finite cell {cell!r}")
            data[i - 1, j] = val
    if data.shape[0] == 0:
        raise FormatError(f"{path}: design has no data rows")
    return DesignMatrix(data, tr=tr, task_names=header)


def save_design(design: DesignMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(design.task_names)
        for row in design.values:
            w.writerow([repr(float(v)) for v in row])
