"""Stem retention, pull attempts and harvest bookkeeping.

Retention forces follow a truncated normal per ripeness class, honouring the
measured mean, standard deviation and min/max. A pull detaches the berry when
the gripper's pull capacity reaches the retention force; a single Bernoulli
``slip`` term absorbs everything else that goes wrong on a real grasp.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .ripeness import ReflectanceReading, Ripeness


class Infeasible(ValueError):
    """Requested efficiency exceeds what the force model allows."""


class ForceClass(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    mean: float
    sigma: float = Field(gt=0)
    min: float
    max: float

    @model_validator(mode="after")
    def _bounds(self):
        if not self.min <= self.mean <= self.max:
            raise ValueError("need min <= mean <= max")
        return self


class RetentionModel(BaseModel):
    """Per-class retention force distributions [N]."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    ripe: ForceClass = ForceClass(mean=2.06, sigma=0.92, min=0.03, max=4.50)
    unripe: ForceClass = ForceClass(mean=6.08, sigma=1.25, min=3.00, max=7.98)

    def for_class(self, ripeness) -> ForceClass:
        return self.ripe if Ripeness(ripeness) is Ripeness.RIPE else self.unripe


def _phi(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def truncated_cdf(x: float, fc: ForceClass) -> float:
    """CDF of the class force distribution at ``x``."""
    if x <= fc.min:
        return 0.0
    if x >= fc.max:
        return 1.0
    a = _phi((fc.min - fc.mean) / fc.sigma)
    b = _phi((fc.max - fc.mean) / fc.sigma)
    return (_phi((x - fc.mean) / fc.sigma) - a) / (b - a)


def _force_ceiling(model: RetentionModel, pull_capacity: float) -> float:
    return truncated_cdf(pull_capacity, model.ripe)


def calibrate_slip(target_efficiency: float, model: RetentionModel, params=None, *, pull_capacity: float | None = None) -> float:
    """Slip probability that brings ripe-berry efficiency down to the target.

    The force model alone sets a ceiling ``P(F <= capacity | ripe)``; the
    remaining shortfall is assigned to slip.
    """
    cap = pull_capacity if pull_capacity is not None else params.pull_capacity
    ceiling = _force_ceiling(model, cap)
    if not 0.0 <= target_efficiency <= 1.0:
        raise ValueError("target efficiency must be a probability")
    if target_efficiency > ceiling:
        raise Infeasible(f"target {target_efficiency} exceeds force-model ceiling {ceiling:.4f}")
    return max(0.0, 1.0 - target_efficiency / ceiling)


DEFAULT_TARGET_EFFICIENCY = 0.88
DEFAULT_PULL_CAPACITY = 4.0
DEFAULT_SLIP = calibrate_slip(DEFAULT_TARGET_EFFICIENCY, RetentionModel(), pull_capacity=DEFAULT_PULL_CAPACITY)


class GraspParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    pull_capacity: float = Field(DEFAULT_PULL_CAPACITY, gt=0)
    slip_failure_prob: float = Field(DEFAULT_SLIP, ge=0, le=1)
    # pull regardless of classification (string-pull benchtop experiment)
    force_override: bool = False


def sample_retention(ripeness, model: RetentionModel, rng: np.random.Generator, size=None):
    """Retention force draw(s) by rejection from the truncated normal."""
    fc = model.for_class(ripeness)
    n = 1 if size is None else int(size)
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        # oversample by the acceptance rate so most calls take one pass
        accept = truncated_mass(fc)
        batch = rng.normal(fc.mean, fc.sigma, size=max(16, int(need / accept * 1.1) + 8))
        ok = batch[(batch >= fc.min) & (batch <= fc.max)][:need]
        out[filled : filled + ok.size] = ok
        filled += ok.size
    return float(out[0]) if size is None else out


def truncated_mass(fc: ForceClass) -> float:
    """Probability mass of the untruncated normal inside [min, max]."""
    return _phi((fc.max - fc.mean) / fc.sigma) - _phi((fc.min - fc.mean) / fc.sigma)


class Outcome(str, enum.Enum):
    DETACHED = "Detached"
    STILL_ON_STEM = "StillOnStem"
    SLIP = "Slip"
    SKIPPED = "Skipped"
    NON_CONVERGENCE = "NonConvergence"
    UNDETECTED = "Undetected"


PULLED = frozenset({Outcome.DETACHED, Outcome.STILL_ON_STEM, Outcome.SLIP})
# outcomes that do not count as harvest attempts
NOT_ATTEMPTED = frozenset({Outcome.SKIPPED, Outcome.UNDETECTED})


def attempt_detach(retention: float, params: GraspParams, classification, rng: np.random.Generator) -> Outcome:
    """Outcome of closing on a berry and pulling.

    Unripe-classified berries are released without a pull unless
    ``params.force_override`` is set. The slip draw happens before the force
    comparison; capacity equal to retention detaches.
    """
    if classification is not None and Ripeness(classification) is Ripeness.UNRIPE and not params.force_override:
        return Outcome.SKIPPED
    if rng.random() < params.slip_failure_prob:
        return Outcome.SLIP
    return Outcome.DETACHED if params.pull_capacity >= retention else Outcome.STILL_ON_STEM


def detach_probability(ripeness, model: RetentionModel, params: GraspParams) -> float:
    """Closed-form probability that a pull on a berry of this class detaches it."""
    return (1.0 - params.slip_failure_prob) * truncated_cdf(params.pull_capacity, model.for_class(ripeness))


# -- reporting --------------------------------------------------------------------


@dataclass
class AttemptRecord:
    berry_id: int
    ripeness: Ripeness
    outcome: Outcome
    classification: Ripeness | None = None
    reading: ReflectanceReading | None = None
    retention_force: float | None = None
    diameter: float | None = None
    servo_iterations: int = 0
    approach_steps: int = 0
    servo_angle: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ripeness"] = Ripeness(self.ripeness).value
        d["outcome"] = Outcome(self.outcome).value
        d["classification"] = None if self.classification is None else Ripeness(self.classification).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttemptRecord":
        d = dict(d)
        d["ripeness"] = Ripeness(d["ripeness"])
        d["outcome"] = Outcome(d["outcome"])
        if d.get("classification") is not None:
            d["classification"] = Ripeness(d["classification"])
        if d.get("reading") is not None:
            d["reading"] = ReflectanceReading(**d["reading"])
        return cls(**d)


def _force_stats(forces: list[float], diameters: list[float]) -> dict:
    if not forces:
        return {"count": 0, "mean": None, "std": None, "min": None, "max": None, "avg_diameter": None}
    f = np.asarray(forces)
    return {
        "count": int(f.size),
        "mean": float(f.mean()),
        "std": float(f.std(ddof=1)) if f.size > 1 else None,
        "min": float(f.min()),
        "max": float(f.max()),
        "avg_diameter": float(np.mean(diameters)) if diameters else None,
    }


@dataclass
class HarvestReport:
    attempts: list[AttemptRecord] = field(default_factory=list)
    aggregate_stats: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"attempts": [a.to_dict() for a in self.attempts], "aggregate": self.aggregate_stats}


def aggregate(records: Iterable[AttemptRecord]) -> HarvestReport:
    """Counts, efficiency and per-class force statistics.

    Efficiency is successes over attempts, where skipped and undetected
    berries are not attempts; it is ``None`` when nothing was attempted.
    Forces are tallied for every berry that was actually pulled.
    """
    records = list(records)
    counts = {o.value: 0 for o in Outcome}
    for r in records:
        counts[Outcome(r.outcome).value] += 1
    attempts = sum(1 for r in records if Outcome(r.outcome) not in NOT_ATTEMPTED)
    successes = counts[Outcome.DETACHED.value]

    sensed = [r for r in records if r.classification is not None]
    correct = sum(1 for r in sensed if Ripeness(r.classification) is Ripeness(r.ripeness))

    force_stats = {}
    for cls in Ripeness:
        pulled = [
            r for r in records if Ripeness(r.ripeness) is cls and r.retention_force is not None and Outcome(r.outcome) in PULLED
        ]
        force_stats[cls.value] = _force_stats(
            [r.retention_force for r in pulled], [r.diameter for r in pulled if r.diameter is not None]
        )

    stats = {
        "berries": len(records),
        "attempts": attempts,
        "successes": successes,
        "failures": attempts - successes,
        "efficiency": successes / attempts if attempts else None,
        "outcomes": counts,
        "sensed": len(sensed),
        "classified_correctly": correct,
        "classification_accuracy": correct / len(sensed) if sensed else None,
        "servo_iterations": sum(r.servo_iterations for r in records),
        "approach_steps": sum(r.approach_steps for r in records),
        "force_stats": force_stats,
    }
    return HarvestReport(attempts=records, aggregate_stats=stats)


FORCE_TABLE_ROWS = [
    ("Min. F_r [N]", "min"),
    ("Max. F_r [N]", "max"),
    ("Avg. F_r [N]", "mean"),
    ("Std. F_r [N]", "std"),
    ("Avg. Diameter [mm]", "avg_diameter"),
    ("Count", "count"),
]


def force_table_rows(stats: dict) -> list[list[str]]:
    """Force statistics laid out like the retention-force results table."""
    fs = stats.get("force_stats", {})
    rows = [["Parameter", "Ripe Blackberries", "Unripe Blackberries"]]
    for label, key in FORCE_TABLE_ROWS:
        row = [label]
        for cls in (Ripeness.RIPE.value, Ripeness.UNRIPE.value):
            v = fs.get(cls, {}).get(key)
            if v is None:
                row.append("")
            elif key == "count":
                row.append(str(int(v)))
            else:
                row.append(f"{v:.2f}")
        rows.append(row)
    return rows
