"""NIR reflectance ripeness sensing and threshold classification.

Readings are differential: the photodiode is sampled with the LEDs off
(``R_0``) and on (``R_b``); the berry's reflectance is ``R_f = R_b - R_0``.
All values are raw analog counts.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class Ripeness(str, enum.Enum):
    RIPE = "ripe"
    UNRIPE = "unripe"


class NotInContact(RuntimeError):
    """Berry is not seated on the palm sensor."""


class NotSeparable(ValueError):
    """Calibration classes cannot be split by a reflectance threshold."""


class SensorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # hardware metadata, not used by the model
    wavelength: float = 870.0
    led_count: int = 7
    incident_angle: float = 35.0
    supply_voltage: float = 1.85
    divider_resistor: float = 560.0

    baseline_R0: float = Field(100.0, ge=0)
    measurement_noise_sigma: float = Field(0.0, ge=0)
    # largest berry-to-palm gap [mm] at which a reading is valid
    contact_tolerance: float = Field(10.0, ge=0)


class ReflectanceDistribution(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    ripe_mean: float = 16.78
    ripe_sigma: float = Field(1.5, ge=0)
    unripe_mean: float = 21.70
    unripe_sigma: float = Field(1.5, ge=0)

    @model_validator(mode="after")
    def _ordered(self):
        if not self.unripe_mean > self.ripe_mean:
            raise ValueError("unripe_mean must exceed ripe_mean (ripe berries reflect less at 870 nm)")
        return self

    @classmethod
    def field(cls, sigma: float = 1.5) -> "ReflectanceDistribution":
        return cls(ripe_mean=16.78, unripe_mean=21.70, ripe_sigma=sigma, unripe_sigma=sigma)

    @classmethod
    def lab(cls, sigma: float = 1.5) -> "ReflectanceDistribution":
        return cls(ripe_mean=17.96, unripe_mean=22.13, ripe_sigma=sigma, unripe_sigma=sigma)

    def params(self, ripeness: Ripeness) -> tuple[float, float]:
        if Ripeness(ripeness) is Ripeness.RIPE:
            return self.ripe_mean, self.ripe_sigma
        return self.unripe_mean, self.unripe_sigma


REFLECTANCE_PRESETS = {
    "field": ReflectanceDistribution.field,
    "lab": ReflectanceDistribution.lab,
}


@dataclass(frozen=True)
class ReflectanceReading:
    berry_id: int
    R_0: float
    R_b: float
    R_f: float

    def __post_init__(self):
        if not math.isclose(self.R_f, self.R_b - self.R_0, rel_tol=1e-12, abs_tol=1e-9):
            raise ValueError("R_f must equal R_b - R_0")


def sample_latent_reflectance(ripeness, dist: ReflectanceDistribution, rng: np.random.Generator, size=None):
    """Draw true reflectance for a berry class, clamped at zero."""
    mean, sigma = dist.params(ripeness)
    draw = rng.normal(mean, sigma, size=size)
    return np.maximum(draw, 0.0) if size is not None else max(float(draw), 0.0)


def measure(berry, sensor: SensorConfig, rng: np.random.Generator, palm_gap: float = 0.0) -> ReflectanceReading:
    """Take an ambient/illuminated reading pair of a seated berry.

    ``berry`` needs ``berry_id`` and ``latent_reflectance``. ``palm_gap`` is
    the distance between berry and palm sensor; readings beyond
    ``sensor.contact_tolerance`` are refused.
    """
    if palm_gap > sensor.contact_tolerance:
        raise NotInContact(f"berry {berry.berry_id} is {palm_gap:.2f} mm from the palm")
    n0, nb = rng.normal(0.0, sensor.measurement_noise_sigma, size=2)
    # the ambient level cancels in the difference; form it without the baseline
    # so R_f is bit-identical under any baseline shift
    rf = (berry.latent_reflectance + float(nb)) - float(n0)
    r0 = sensor.baseline_R0 + float(n0)
    return ReflectanceReading(berry_id=berry.berry_id, R_0=r0, R_b=r0 + rf, R_f=rf)


def fit_threshold(ripe_samples: Sequence[float], unripe_samples: Sequence[float], mode: str = "midpoint") -> float:
    """Reflectance cut point separating ripe (below) from unripe (above).

    ``mode="midpoint"`` returns the mean of the class means.
    ``mode="min-error"`` scans cut points between sorted pooled samples and
    keeps the one with the fewest misclassifications, restricted to the open
    interval between the class means; ties go to the cut nearest the midpoint.
    """
    ripe = np.asarray(ripe_samples, dtype=float)
    unripe = np.asarray(unripe_samples, dtype=float)
    if ripe.size < 2 or unripe.size < 2:
        raise ValueError("need at least two samples per class")
    m_r, m_u = float(ripe.mean()), float(unripe.mean())
    if not m_r < m_u:
        raise NotSeparable(f"ripe mean {m_r:.4g} is not below unripe mean {m_u:.4g}")
    mid = (m_r + m_u) / 2
    if mode == "midpoint":
        return mid
    if mode != "min-error":
        raise ValueError(f"unknown threshold mode {mode!r}")

    pooled = np.unique(np.concatenate([ripe, unripe]))
    cuts = (pooled[1:] + pooled[:-1]) / 2
    cuts = np.concatenate([cuts[(cuts > m_r) & (cuts < m_u)], [mid]])
    errors = np.array([(ripe >= c).sum() + (unripe < c).sum() for c in cuts])
    best = np.flatnonzero(errors == errors.min())
    return float(cuts[best[np.argmin(np.abs(cuts[best] - mid))]])


def classify(R_f: float, threshold: float) -> Ripeness:
    """Ripe iff strictly below the threshold; ties stay on the plant."""
    if not np.isfinite(threshold):
        raise ValueError("threshold must be finite")
    return Ripeness.RIPE if R_f < threshold else Ripeness.UNRIPE


def load_samples_csv(path, column: str | None = None) -> list[float]:
    """Read one class of calibration readings.

    Takes the named column, or the first one. A non-numeric first row is
    treated as a header; blank cells and ``#`` comment lines are skipped.
    """
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(line for line in fh if not line.startswith("#")) if row]
    if not rows:
        return []
    idx = 0
    try:
        float(rows[0][0])
    except ValueError:
        header = [h.strip() for h in rows.pop(0)]
        if column is not None:
            if column not in header:
                raise KeyError(f"column {column!r} not in {path}")
            idx = header.index(column)
    values = []
    for row in rows:
        if idx < len(row) and row[idx].strip():
            values.append(float(row[idx]))
    return values
