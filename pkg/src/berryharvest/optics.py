"""Scene, eye-in-hand pinhole camera and the detector stand-in.

The camera sits at the gripper centre and looks along the gripper axis. The
end-effector pose is a rigid transform (camera-to-world rotation plus
position); image coordinates follow the usual convention of +u to the right
(camera +X) and +v downward (camera +Y).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .ripeness import Ripeness


class BehindCamera(ValueError):
    """Point has non-positive depth in the camera frame."""


class CameraModel(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    image_width: int = Field(1280, gt=0)
    image_height: int = Field(720, gt=0)
    horizontal_fov: float = Field(80.0, gt=0, lt=180)

    @property
    def focal_length_px(self) -> float:
        return (self.image_width / 2) / math.tan(math.radians(self.horizontal_fov) / 2)

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.image_width / 2, self.image_height / 2

    def in_image(self, u, v):
        return (u >= 0) & (u <= self.image_width) & (v >= 0) & (v <= self.image_height)


@dataclass(frozen=True)
class Pose:
    """End-effector (= camera) pose in the world frame, mm."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.position, dtype=float)

    @property
    def R(self) -> np.ndarray:
        return np.asarray(self.rotation, dtype=float)

    def to_camera(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.t) @ self.R

    def moved(self, local_delta) -> "Pose":
        """Translate by a displacement given in the tool frame."""
        p = self.t + self.R @ np.asarray(local_delta, dtype=float)
        return Pose(tuple(float(x) for x in p), self.rotation)

    def lerp(self, other: "Pose", frac: float) -> "Pose":
        p = self.t + (other.t - self.t) * frac
        return Pose(tuple(float(x) for x in p), self.rotation)


@dataclass
class BerryInstance:
    berry_id: int
    position: np.ndarray
    diameter: float
    ripeness: Ripeness
    latent_reflectance: float
    latent_retention_force: float
    attached: bool = True

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.ripeness = Ripeness(self.ripeness)


@dataclass(frozen=True)
class BoundingBox:
    center_u: float
    center_v: float
    width: float
    height: float
    confidence: float
    # ground-truth tag from the simulator; plays the role of the tracker identity
    berry_id: int | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError("bounding box needs positive width and height")


class DetectorParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    center_sigma_px: float = Field(2.0, ge=0)
    size_sigma_frac: float = Field(0.03, ge=0)
    max_detection_range: float = Field(600.0, gt=0)
    confidence_min: float = Field(0.5, ge=0, le=1)
    confidence_max: float = Field(1.0, ge=0, le=1)
    occlusion: bool = True

    @model_validator(mode="after")
    def _conf_order(self):
        if self.confidence_min > self.confidence_max:
            raise ValueError("confidence_min must not exceed confidence_max")
        return self

    @classmethod
    def noiseless(cls, **kw) -> "DetectorParams":
        return cls(center_sigma_px=0.0, size_sigma_frac=0.0, **kw)


def project(point, camera: CameraModel, pose: Pose | None = None) -> tuple[float, float]:
    """Pinhole projection of a world point; raises BehindCamera for Z <= 0."""
    X, Y, Z = (pose or Pose()).to_camera(point)
    if Z <= 0:
        raise BehindCamera(f"point at camera depth {Z}")
    cx, cy = camera.principal_point
    f = camera.focal_length_px
    return cx + f * X / Z, cy + f * Y / Z


def estimate_depth(box: BoundingBox, assumed_diameter: float, camera: CameraModel) -> float:
    """Distance to an object of known size from its box size (pinhole inversion)."""
    apparent = (box.width + box.height) / 2
    if not apparent > 0:
        raise ValueError("apparent size must be positive")
    return camera.focal_length_px * assumed_diameter / apparent


def select_target(boxes: Iterable[BoundingBox]) -> BoundingBox | None:
    """Left-most box; ties resolved by the smaller ``center_v``."""
    return min(boxes, key=lambda b: (b.center_u, b.center_v), default=None)


@dataclass
class Scene:
    """Berries plus the camera and detector that look at them.

    Mutation (detaching a berry) belongs to the orchestrator between ticks;
    ``detect`` only reads.
    """

    berries: list[BerryInstance]
    camera: CameraModel = field(default_factory=CameraModel)
    detector: DetectorParams = field(default_factory=DetectorParams)

    def berry(self, berry_id: int) -> BerryInstance:
        for b in self.berries:
            if b.berry_id == berry_id:
                return b
        raise KeyError(berry_id)

    def detect(self, pose: Pose, rng: np.random.Generator, exclude=()) -> list[BoundingBox]:
        return detect(self.berries, self.camera, pose, self.detector, rng, exclude=exclude)


def detect(
    berries: list[BerryInstance],
    camera: CameraModel,
    pose: Pose,
    params: DetectorParams,
    rng: np.random.Generator,
    exclude=(),
) -> list[BoundingBox]:
    """Simulated detector output for the attached berries in view.

    A berry yields a box when its projected centre is in the image, its depth
    is positive and within range, and no nearer attached berry's projected
    disk covers its centre. Boxes use the fronto-parallel disk size
    ``f * diameter / Z`` with Gaussian centre and size jitter. Berries in
    ``exclude`` are still attached (and can occlude) but are not reported.
    """
    attached = [b for b in berries if b.attached]
    if not attached:
        return []
    P = pose.to_camera(np.array([b.position for b in attached]))
    Z = P[:, 2]
    front = Z > 0
    f = camera.focal_length_px
    cx, cy = camera.principal_point
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, cx + f * P[:, 0] / Z, np.nan)
        v = np.where(front, cy + f * P[:, 1] / Z, np.nan)
        size = np.where(front, f * np.array([b.diameter for b in attached]) / Z, np.nan)
    visible = front & (Z <= params.max_detection_range) & camera.in_image(u, v)

    if params.occlusion and len(attached) > 1:
        du = u[:, None] - u[None, :]
        dv = v[:, None] - v[None, :]
        # covers[i, j]: berry j's disk covers i's centre and j is nearer
        covers = (np.hypot(du, dv) <= size[None, :] / 2) & (Z[None, :] < Z[:, None]) & front[None, :]
        np.fill_diagonal(covers, False)
        visible &= ~covers.any(axis=1)

    skip = set(exclude)
    idx = [i for i in np.flatnonzero(visible) if attached[i].berry_id not in skip]
    if not idx:
        return []
    k = len(idx)
    jitter = rng.normal(0.0, 1.0, size=(k, 2)) * params.center_sigma_px
    scale = 1.0 + rng.normal(0.0, 1.0, size=(k, 2)) * params.size_sigma_frac
    conf = rng.uniform(params.confidence_min, params.confidence_max, size=k)
    boxes = []
    for n, i in enumerate(idx):
        boxes.append(
            BoundingBox(
                center_u=float(u[i] + jitter[n, 0]),
                center_v=float(v[i] + jitter[n, 1]),
                width=float(max(size[i] * scale[n, 0], 1e-6)),
                height=float(max(size[i] * scale[n, 1], 1e-6)),
                confidence=float(conf[n]),
                berry_id=attached[i].berry_id,
            )
        )
    return boxes
