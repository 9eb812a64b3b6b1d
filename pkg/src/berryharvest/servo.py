"""Image-based visual servoing for the eye-in-hand gripper camera.

The loop calibrates a 2x2 image Jacobian by jogging the end-effector along
its x and y axes, centres the left-most berry in the image, estimates its
depth from the bounding-box size, then closes half of the remaining distance.
It repeats until the berry is at the palm, hands off to the grasp pipeline,
deposits, and starts over until no berries are detected.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .optics import BoundingBox, CameraModel, Pose, Scene, estimate_depth, select_target


class CalibrationLost(RuntimeError):
    """Target disappeared while jogging for the Jacobian."""


class RecalibrationRequired(RuntimeError):
    """Jacobian is singular, ill-conditioned or not finite."""


class ProtocolError(RuntimeError):
    pass


class Phase(str, enum.Enum):
    CALIBRATE = "Calibrate"
    CENTER = "Center"
    APPROACH = "Approach"
    GRASP = "Grasp"
    DEPOSIT = "Deposit"
    DONE = "Done"


class ServoParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    speed_gain: float = Field(1.0, gt=0, le=1)
    pixel_tolerance: float = Field(5.0, gt=0)
    depth_tolerance: float = Field(10.0, gt=0)
    # upper bound on the jog; the actual jog is also limited to a fraction of
    # the estimated depth so the target stays in view at close range
    jog_step: float = Field(10.0, gt=0)
    jog_depth_fraction: float = Field(0.25, gt=0, le=1)
    iteration_cap: int = Field(100, ge=1)
    approach_fraction: float = Field(0.5, gt=0, le=1)
    standoff: float | None = Field(None, ge=0)
    assumed_diameter: float = Field(19.1, gt=0)
    max_condition: float = Field(1e3, gt=1)
    deposit_steps: int = Field(20, ge=1)


@dataclass(frozen=True)
class ImageJacobian:
    """Maps tool-frame (dx, dy) in mm to image (du, dv) in px."""

    matrix: np.ndarray

    @property
    def condition(self) -> float:
        if not np.all(np.isfinite(self.matrix)):
            return math.inf
        return float(np.linalg.cond(self.matrix))

    def solve(self, image_delta, max_condition: float = 1e3) -> np.ndarray:
        if self.condition > max_condition:
            raise RecalibrationRequired(f"Jacobian condition number {self.condition:.3g}")
        return np.linalg.solve(self.matrix, np.asarray(image_delta, dtype=float))


def _match(boxes: list[BoundingBox], reference: BoundingBox) -> BoundingBox | None:
    if reference.berry_id is not None:
        return next((b for b in boxes if b.berry_id == reference.berry_id), None)
    return min(boxes, key=lambda b: math.hypot(b.center_u - reference.center_u, b.center_v - reference.center_v), default=None)


def calibrate_jacobian(
    observe: Callable[[Pose], list[BoundingBox]],
    pose: Pose,
    reference: BoundingBox,
    jog_step: float,
    on_move: Callable[[Pose], None] | None = None,
) -> ImageJacobian:
    """Secant estimate of the image Jacobian from two axis jogs.

    ``observe(pose)`` returns detections at a pose; ``reference`` is the
    target's box at ``pose``. Each column is (image position after jogging the
    axis by ``jog_step`` minus position before) / ``jog_step``. The
    end-effector is brought back to ``pose`` after each jog.
    """
    if not jog_step > 0:
        raise ValueError("jog_step must be positive")
    before = np.array([reference.center_u, reference.center_v])
    cols = []
    for axis in (0, 1):
        delta = np.zeros(3)
        delta[axis] = jog_step
        jogged = pose.moved(delta)
        box = _match(observe(jogged), reference)
        if on_move is not None:
            on_move(pose)
        if box is None:
            raise CalibrationLost(f"target lost while jogging axis {'xy'[axis]}")
        cols.append((np.array([box.center_u, box.center_v]) - before) / jog_step)
    return ImageJacobian(np.column_stack(cols))


def centering_step(
    jacobian: ImageJacobian, target: BoundingBox, camera: CameraModel, gain: float, max_condition: float = 1e3
) -> tuple[float, float]:
    """Tool-frame (dx, dy) that moves the target towards the principal point."""
    cx, cy = camera.principal_point
    d = gain * jacobian.solve([cx - target.center_u, cy - target.center_v], max_condition)
    return float(d[0]), float(d[1])


def approach_step(estimated_depth: float | None, standoff: float, fraction: float = 0.5) -> float:
    """Advance along the optical axis by a fraction of the remaining distance."""
    if estimated_depth is None:
        raise ProtocolError("depth must be estimated before approaching")
    return fraction * (estimated_depth - standoff)


def pixel_error(box: BoundingBox, camera: CameraModel) -> float:
    cx, cy = camera.principal_point
    return math.hypot(box.center_u - cx, box.center_v - cy)


@dataclass
class ServoState:
    end_effector_pose: Pose
    jacobian: ImageJacobian | None = None
    target: BoundingBox | None = None
    estimated_depth: float | None = None
    phase: Phase = Phase.CALIBRATE
    iteration: int = 0
    speed_gain: float = 1.0
    pixel_tolerance: float = 5.0
    depth_tolerance: float = 10.0


@dataclass(frozen=True)
class TrajectoryPoint:
    step: int
    phase: Phase
    x: float
    y: float
    z: float
    pixel_error: float | None = None
    estimated_depth: float | None = None
    berry_id: int | None = None


@dataclass(frozen=True)
class DetectionRecord:
    tick: int
    berry_id: int | None
    u: float
    v: float
    w: float
    h: float
    confidence: float


@dataclass
class ServoEpisode:
    berry_id: int
    converged: bool
    iterations: int
    approach_steps: int
    grasp_pose: Pose | None = None
    final_depth_estimate: float | None = None


@dataclass
class IbvsResult:
    trajectory: list[TrajectoryPoint] = field(default_factory=list)
    episodes: list[ServoEpisode] = field(default_factory=list)
    detections: list[DetectionRecord] = field(default_factory=list)
    iterations: int = 0
    truncated: bool = False

    def episode_for(self, berry_id: int) -> ServoEpisode | None:
        return next((e for e in self.episodes if e.berry_id == berry_id), None)


GraspHandler = Callable[[int, Pose, ServoEpisode], bool]


def _default_grasp(scene: Scene) -> GraspHandler:
    def handler(berry_id, pose, episode):
        scene.berry(berry_id).attached = False
        return True

    return handler


def run_ibvs(
    scene: Scene,
    params: ServoParams,
    rng: np.random.Generator,
    home: Pose | None = None,
    clamshell: Pose | None = None,
    on_grasp: GraspHandler | None = None,
    standoff: float = 5.0,
    max_iterations: int | None = None,
) -> IbvsResult:
    """Harvest every detectable berry, left-most first.

    The left-most berry at the start of an episode stays the target until it
    is grasped or abandoned; another is picked only if it drops out of view.

    ``on_grasp(berry_id, pose, episode)`` runs when the servo has brought a
    berry to the palm and returns True if the gripper now holds a berry to
    deposit. Without a handler the berry is simply detached. Targets that
    exceed ``params.iteration_cap`` are recorded as non-converged and skipped.
    """
    home = home or Pose()
    clamshell = clamshell or home
    on_grasp = on_grasp or _default_grasp(scene)
    standoff = params.standoff if params.standoff is not None else standoff
    if max_iterations is None:
        max_iterations = params.iteration_cap * (len(scene.berries) + 1)
    cam = scene.camera

    result = IbvsResult()
    handled: set[int] = set()
    state = ServoState(home, speed_gain=params.speed_gain, pixel_tolerance=params.pixel_tolerance,
                       depth_tolerance=params.depth_tolerance)
    tick = 0

    def record(pose, phase, pe=None, depth=None, berry_id=None):
        x, y, z = pose.position
        result.trajectory.append(TrajectoryPoint(len(result.trajectory), Phase(phase), x, y, z, pe, depth, berry_id))

    def observe(pose):
        nonlocal tick
        boxes = scene.detect(pose, rng, exclude=handled)
        for b in boxes:
            result.detections.append(DetectionRecord(tick, b.berry_id, b.center_u, b.center_v, b.width, b.height, b.confidence))
        tick += 1
        return boxes

    def calib_observe(pose):
        record(pose, Phase.CALIBRATE, berry_id=state.target.berry_id if state.target else None)
        return observe(pose)

    def travel(start, end, phase):
        for k in range(1, params.deposit_steps + 1):
            record(start.lerp(end, k / params.deposit_steps), phase)

    def finish_episode(episode, hold):
        result.episodes.append(episode)
        handled.add(episode.berry_id)
        if hold:
            travel(state.end_effector_pose, clamshell, Phase.DEPOSIT)
            travel(clamshell, home, Phase.DEPOSIT)
        else:
            travel(state.end_effector_pose, home, Phase.DEPOSIT)
        state.end_effector_pose = home
        state.jacobian = None
        state.target = None
        state.estimated_depth = None

    episode_iters = 0
    approaches = 0
    jac_for: int | None = None
    locked: int | None = None
    while True:
        pose = state.end_effector_pose
        if result.iterations >= max_iterations:
            result.truncated = True
            record(pose, Phase.DONE)
            break
        boxes = observe(pose)
        # stay on the berry chosen at the start of the episode while it is in view
        target = next((b for b in boxes if b.berry_id == locked), None) if locked is not None else None
        target = target or select_target(boxes)
        if target is None:
            state.phase = Phase.DONE
            record(pose, Phase.DONE)
            break
        result.iterations += 1
        state.iteration += 1
        episode_iters += 1
        state.target = target
        locked = target.berry_id
        depth = estimate_depth(target, params.assumed_diameter, cam)
        state.estimated_depth = depth
        pe = pixel_error(target, cam)

        if episode_iters > params.iteration_cap:
            record(pose, Phase.DEPOSIT, pe, depth, target.berry_id)
            finish_episode(ServoEpisode(target.berry_id, False, episode_iters, approaches, pose, depth), hold=False)
            episode_iters = approaches = 0
            locked = None
            continue

        if target.berry_id != jac_for:
            state.jacobian = None
        if state.jacobian is None:
            state.phase = Phase.CALIBRATE
            record(pose, Phase.CALIBRATE, pe, depth, target.berry_id)
            jog = min(params.jog_step, params.jog_depth_fraction * depth)
            try:
                state.jacobian = calibrate_jacobian(calib_observe, pose, target, jog,
                                                    on_move=lambda p: record(p, Phase.CALIBRATE, berry_id=target.berry_id))
                jac_for = target.berry_id
            except CalibrationLost:
                pass
            continue

        if pe >= params.pixel_tolerance:
            state.phase = Phase.CENTER
            record(pose, Phase.CENTER, pe, depth, target.berry_id)
            try:
                dx, dy = centering_step(state.jacobian, target, cam, params.speed_gain, params.max_condition)
            except RecalibrationRequired:
                state.jacobian = None
                continue
            state.end_effector_pose = pose.moved((dx, dy, 0.0))
            continue

        if depth < params.depth_tolerance:
            state.phase = Phase.GRASP
            record(pose, Phase.GRASP, pe, depth, target.berry_id)
            episode = ServoEpisode(target.berry_id, True, episode_iters, approaches, pose, depth)
            hold = on_grasp(target.berry_id, pose, episode)
            state.phase = Phase.DEPOSIT
            finish_episode(episode, hold)
            episode_iters = approaches = 0
            jac_for = locked = None
            continue

        state.phase = Phase.APPROACH
        record(pose, Phase.APPROACH, pe, depth, target.berry_id)
        dz = approach_step(depth, standoff, params.approach_fraction)
        state.end_effector_pose = pose.moved((0.0, 0.0, dz))
        approaches += 1
        # depth changed, so the f/Z scale of the Jacobian is stale
        state.jacobian = None

    return result
