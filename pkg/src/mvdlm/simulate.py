"""Synthetic phantoms, null (resting) volumes and the false-positive harness.

SNR is defined as peak signal amplitude over noise standard deviation.  With
a peak-normalized regressor the amplitude of a region equals its effect, so
the noise SD is ``max |effect| / snr``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .design import DesignMatrix, HrfParams, StimulusSpec, build_design
from .dlm import ModelConfig
from .errors import ConfigurationError, ParameterError
from .mapping import EvidenceVolume, map_subject
from .volume import Bold4D

PARADIGMS = ("B1", "B2", "E1", "E2")


@dataclass
class Region:
    center: tuple
    radius: float
    effect: float
    task: int = 0


@dataclass
class PhantomSpec:
    dims: tuple = (30, 30, 30)
    regions: list = field(default_factory=list)
    snr: float = 30.0
    noise: str = "white"
    phi: float = 0.0
    baseline: float = 1000.0
    noise_sd: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.regions = [r if isinstance(r, Region) else
                        Region(**r) if isinstance(r, dict) else Region(*r)
                        for r in self.regions]
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ParameterError(f"dims must be three positive sizes, got {self.dims}")
        if not self.snr > 0:
            raise ParameterError("snr must be positive")
        if self.noise not in ("white", "ar1"):
            raise ParameterError(f"noise must be 'white' or 'ar1', got {self.noise!r}")
        if not -1 < self.phi < 1:
            raise ParameterError("AR(1) coefficient must lie in (-1, 1)")
        for reg in self.regions:
            c = np.asarray(reg.center)
            if not reg.radius > 0:
                raise ParameterError(f"region radius must be positive, got {reg.radius}")
            if c.shape != (3,) or np.any(c < 0) or np.any(c >= np.asarray(self.dims)):
                raise ParameterError(f"region center {reg.center} lies outside {self.dims}")

    @property
    def sd(self) -> float:
        if self.noise_sd is not None:
            return float(self.noise_sd)
        if not self.regions:
            return 1.0
        return max(abs(r.effect) for r in self.regions) / self.snr

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        for r in d["regions"]:
            r["center"] = list(r["center"])
        return d

    @classmethod
    def from_json(cls, d) -> "PhantomSpec":
        if isinstance(d, (str, Path)):
            d = json.loads(Path(d).read_text())
        return cls(**d)


def sphere_mask(dims, center, radius) -> np.ndarray:
    grid = np.indices(dims, dtype=float)
    c = np.asarray(center, dtype=float).reshape(3, 1, 1, 1)
    return np.sum((grid - c) ** 2, axis=0) <= radius ** 2


def _noise(rng: np.random.Generator, shape, sd: float, model: str, phi: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    if model == "white" or phi == 0:
        return sd * z
    out = np.empty(shape)
    out[..., 0] = z[..., 0]
    innov = np.sqrt(1 - phi ** 2)
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + innov * z[..., t]
    return sd * out


def generate_phantom(spec: PhantomSpec, design: DesignMatrix) -> tuple[Bold4D, np.ndarray]:
    """Baseline plus ``effect * regressor`` inside each sphere plus noise.

    Returns the volume and the boolean ground-truth mask (union of spheres).
    """
    T = design.n_scans
    rng = np.random.default_rng(spec.seed)
    data = spec.baseline + _noise(rng, spec.dims + (T,), spec.sd, spec.noise, spec.phi)
    truth = np.zeros(spec.dims, dtype=bool)
    for reg in spec.regions:
        if not 0 <= reg.task < design.n_tasks:
            raise ParameterError(f"region task {reg.task} not in design")
        sph = sphere_mask(spec.dims, reg.center, reg.radius)
        data[sph] += reg.effect * design.values[:, reg.task]
        truth |= sph
    return Bold4D(data, tr=design.tr), truth


def generate_resting(dims, T: int, noise: str = "white", phi: float = 0.0, seed: int = 0,
                     sd: float = 1.0, baseline: float = 1000.0, tr: float = 2.0) -> Bold4D:
    """Stationary noise volume with no stimulus-locked component."""
    spec = PhantomSpec(dims=dims, noise=noise, phi=phi, noise_sd=sd, baseline=baseline,
                       seed=seed)
    if T < 2:
        raise ParameterError("need at least two scans")
    rng = np.random.default_rng(seed)
    data = baseline + _noise(rng, spec.dims + (int(T),), sd, noise, phi)
    return Bold4D(data, tr=tr)


def _block(period_on: float, total: float, name: str) -> StimulusSpec:
    onsets = np.arange(0.0, total, 2 * period_on)
    return StimulusSpec(onsets, np.full(onsets.size, period_on), name)


def fictitious_stimuli(T: int, tr: float, seed: int = 0) -> dict[str, StimulusSpec]:
    """The four null paradigms: B1 10 s on/off, B2 30 s on/off, E1 2 s on / 6 s rest,
    E2 random 1-4 s on / 3-6 s rest."""
    total = T * tr
    if total < 120.0:
        raise ConfigurationError(f"{total:g} s is too short for two B2 cycles (120 s needed)")
    e1 = np.arange(0.0, total, 8.0)
    rng = np.random.default_rng(seed)
    on, dur, t = [], [], 0.0
    while True:
        a = rng.uniform(1.0, 4.0)
        if t >= total:
            break
        on.append(t)
        dur.append(a)
        t += a + rng.uniform(3.0, 6.0)
    return {
        "B1": _block(10.0, total, "B1"),
        "B2": _block(30.0, total, "B2"),
        "E1": StimulusSpec(e1, np.full(e1.size, 2.0), "E1"),
        "E2": StimulusSpec(np.array(on), np.array(dur), "E2"),
    }


def fictitious_designs(T: int, tr: float, seed: int = 0,
                       params: HrfParams = HrfParams()) -> dict[str, DesignMatrix]:
    return {k: build_design([s], T, tr, params) for k, s in fictitious_stimuli(T, tr, seed).items()}


@dataclass
class FprResult:
    rate: float
    n_voxels: int
    n_active: int
    evidence: EvidenceVolume

    def write_report(self, path) -> None:
        ev = self.evidence
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "k", "evidence", "active"])
            for i, j, k in np.argwhere(ev.mask):
                e = ev.values[0, i, j, k]
                w.writerow([i, j, k, f"{e:.6g}", int(e > ev.threshold)])


def assess_fpr(data: Bold4D, design: DesignMatrix, algorithm: str = "fest", kind="marginal",
               n_draws: int = 1000, threshold: float = 0.95, seed: int = 0,
               cfg: ModelConfig | None = None, workers: int | None = None,
               report=None, **kw) -> FprResult:
    """False-positive rate of a null volume under a fictitious design."""
    ev = map_subject(data, design, cfg, algorithm, kind, n_draws, threshold, seed,
                     workers=workers, **kw)
    n = int(ev.mask.sum())
    if n == 0:
        raise ConfigurationError("mask is empty")
    active = int(np.sum(ev.values[0][ev.mask] > threshold))
    res = FprResult(active / n, n, active, ev)
    if report is not None:
        res.write_report(report)
    return res


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else 2.0 * np.sum(a & b) / denom


def default_phantom(snr: float = 30.0, dims=(30, 30, 30), seed: int = 0) -> PhantomSpec:
    """Two spheres of radius 4 and 7 with effect 250."""
    d = np.asarray(dims)
    c1 = tuple(int(v) for v in (d * np.array([0.3, 0.3, 0.5])).round())
    c2 = tuple(int(v) for v in (d * np.array([0.65, 0.65, 0.5])).round())
    return PhantomSpec(dims=tuple(dims), regions=[Region(c1, 4, 250.0), Region(c2, 7, 250.0)],
                       snr=snr, seed=seed)


def block_design(T: int, tr: float = 2.0, period: float = 20.0, name: str = "task",
                 offset: float = 0.0) -> DesignMatrix:
    """Single on/off block regressor (``period`` seconds on, then off)."""
    onsets = np.arange(offset, T * tr, 2 * period)
    return build_design([StimulusSpec(onsets, np.full(onsets.size, period), name)], T, tr)

