"""Scenario documents: schema, validation, presets and scene construction."""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .fingers import GripperGeometry
from .grasp import GraspParams, RetentionModel, sample_retention
from .optics import BerryInstance, CameraModel, DetectorParams, Pose, Scene
from .ripeness import REFLECTANCE_PRESETS, ReflectanceDistribution, Ripeness, SensorConfig, sample_latent_reflectance
from .servo import ServoParams

SCENARIO_VERSION = 1
BERRY_DIAMETER_RANGE = (17.0, 31.0)

Vec3 = tuple[float, float, float]


class ScenarioError(ValueError):
    """Scenario file could not be parsed or failed validation."""


class BerrySpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    position: Vec3
    diameter: float = Field(20.0, gt=0)
    ripeness: Ripeness = Ripeness.RIPE
    # optional fixed latent values; drawn from the class distributions otherwise
    reflectance: Optional[float] = Field(None, ge=0)
    retention_force: Optional[float] = Field(None, ge=0)


class BerryGenerator(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    count: int = Field(ge=0)
    x_range: tuple[float, float] = (-60.0, 60.0)
    y_range: tuple[float, float] = (-30.0, 30.0)
    z_range: tuple[float, float] = (150.0, 300.0)
    ripe_fraction: float = Field(1.0, ge=0, le=1)
    diameter_range: tuple[float, float] = BERRY_DIAMETER_RANGE

    @field_validator("x_range", "y_range", "z_range", "diameter_range")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError("range must be (low, high)")
        return v


class Scenario(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    version: int = SCENARIO_VERSION
    name: str = "custom"
    description: str = ""
    seed: int = Field(0, ge=0)
    positioning: Literal["ibvs", "manual"] = "ibvs"
    sensing: bool = True
    threshold: Optional[float] = None

    gripper: GripperGeometry = GripperGeometry()
    camera: CameraModel = CameraModel()
    detector: DetectorParams = DetectorParams()
    sensor: SensorConfig = SensorConfig()
    reflectance: ReflectanceDistribution = ReflectanceDistribution()
    retention: RetentionModel = RetentionModel()
    grasp: GraspParams = GraspParams()
    servo: ServoParams = ServoParams()

    berries: list[BerrySpec] = []
    generator: Optional[BerryGenerator] = None
    allow_any_diameter: bool = False
    allow_out_of_range: bool = False

    home_pose: Vec3 = (0.0, 0.0, 0.0)
    clamshell_pose: Vec3 = (-150.0, 100.0, 0.0)

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != SCENARIO_VERSION:
            raise ValueError(f"unsupported scenario version {v}; expected {SCENARIO_VERSION}")
        return v

    @field_validator("reflectance", mode="before")
    @classmethod
    def _reflectance_preset(cls, v):
        if isinstance(v, dict) and "preset" in v:
            extra = set(v) - {"preset", "sigma"}
            if extra:
                raise ValueError(f"unexpected keys with preset: {sorted(extra)}")
            if v["preset"] not in REFLECTANCE_PRESETS:
                raise ValueError(f"unknown reflectance preset {v['preset']!r}; choose from {sorted(REFLECTANCE_PRESETS)}")
            return REFLECTANCE_PRESETS[v["preset"]](**({"sigma": v["sigma"]} if "sigma" in v else {}))
        return v

    @model_validator(mode="after")
    def _berries(self):
        if self.berries and self.generator is not None:
            raise ValueError("give either 'berries' or 'generator', not both")
        lo, hi = BERRY_DIAMETER_RANGE
        home = np.asarray(self.home_pose)
        for i, b in enumerate(self.berries):
            if not self.allow_any_diameter and not lo <= b.diameter <= hi:
                raise ValueError(f"berries.{i}.diameter: {b.diameter} mm outside [{lo}, {hi}] (set allow_any_diameter)")
            fc = self.retention.for_class(b.ripeness)
            if b.retention_force is not None and not fc.min <= b.retention_force <= fc.max:
                raise ValueError(f"berries.{i}.retention_force: outside [{fc.min}, {fc.max}] for {b.ripeness.value}")
            dist = float(np.linalg.norm(np.asarray(b.position) - home))
            if not self.allow_out_of_range and dist > self.detector.max_detection_range:
                raise ValueError(
                    f"berries.{i}.position: {dist:.1f} mm from home exceeds detection range "
                    f"{self.detector.max_detection_range} (set allow_out_of_range)"
                )
        if self.generator is not None and not self.allow_any_diameter:
            d0, d1 = self.generator.diameter_range
            if d0 < lo or d1 > hi:
                raise ValueError(f"generator.diameter_range: must lie within [{lo}, {hi}]")
        return self

    @property
    def classification_threshold(self) -> float:
        if self.threshold is not None:
            return self.threshold
        return (self.reflectance.ripe_mean + self.reflectance.unripe_mean) / 2

    @property
    def home(self) -> Pose:
        return Pose(tuple(map(float, self.home_pose)))

    @property
    def clamshell(self) -> Pose:
        return Pose(tuple(map(float, self.clamshell_pose)))


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "\n".join(lines)


def parse_scenario(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("<root>: scenario must be a JSON object")
    if "manifest_version" in data and "scenario" in data:
        data = data["scenario"]
    try:
        return Scenario.model_validate(data)
    except ValidationError as e:
        raise ScenarioError(_format_errors(e)) from None


def preset_names() -> list[str]:
    root = resources.files("berryharvest") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_scenario(path) -> Scenario:
    """Load a scenario file, a run manifest, or a shipped preset by name."""
    p = Path(path)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    elif str(path) in preset_names():
        text = (resources.files("berryharvest") / "presets" / f"{path}.json").read_text(encoding="utf-8")
    else:
        raise FileNotFoundError(f"no scenario file or preset named {path!r}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"<root>: invalid JSON: {e}") from None
    return parse_scenario(data)


def build_scene(scenario: Scenario, rng: np.random.Generator) -> Scene:
    """Instantiate berries with their latent reflectance and retention force."""
    specs = list(scenario.berries)
    gen = scenario.generator
    if gen is not None:
        for _ in range(gen.count):
            pos = tuple(float(rng.uniform(*r)) for r in (gen.x_range, gen.y_range, gen.z_range))
            ripe = rng.random() < gen.ripe_fraction
            specs.append(
                BerrySpec(
                    position=pos,
                    diameter=float(rng.uniform(*gen.diameter_range)),
                    ripeness=Ripeness.RIPE if ripe else Ripeness.UNRIPE,
                )
            )
    berries = []
    for i, s in enumerate(specs):
        refl = s.reflectance if s.reflectance is not None else sample_latent_reflectance(s.ripeness, scenario.reflectance, rng)
        force = s.retention_force if s.retention_force is not None else sample_retention(s.ripeness, scenario.retention, rng)
        berries.append(BerryInstance(i, np.asarray(s.position, dtype=float), s.diameter, s.ripeness, float(refl), float(force)))
    return Scene(berries, camera=scenario.camera, detector=scenario.detector)
