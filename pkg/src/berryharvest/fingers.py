"""Tendon-driven finger kinematics for the three-finger soft gripper.

Each finger is a planar two-segment continuum section. Both segments share
one curvature (piecewise constant curvature with equal segment curvature),
so the finger backbone is a single circular arc split by the medial bone.

Frame conventions
-----------------
Every finger lives in its own meridian plane. ``r`` is the signed radial
distance from the gripper axis, ``z`` the axial distance in front of the
palm plane (camera at the origin, looking along +z). Tangent angles are
measured from the gripper axis, positive pointing away from it, so bending
inward (positive curvature) *decreases* the tangent angle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import brentq, minimize_scalar


class DomainError(ValueError):
    """Argument outside the physical domain of the model."""


class GripperGeometry(BaseModel):
    """Dimensional parameters of the gripper (mm / degrees)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    finger_neutral_length: float = Field(32.0, gt=0)
    segment_count: int = Field(2, ge=1)
    # full apex angle of the cone spanned by the neutral fingers
    opening_angle: float = Field(60.0, gt=0, lt=90)
    base_radius: float = Field(22.0, gt=0)
    spool_diameter: float = Field(14.0, gt=0)
    servo_range: float = Field(180.0, gt=0)
    finger_count: int = Field(3, ge=2)
    camera_fov: float = Field(80.0, gt=0, lt=180)
    base_diameter: float = Field(45.0, gt=0)
    sensor_palm_offset: float = Field(5.0, gt=0)
    finger_thickness: float = Field(3.0, ge=0)

    @model_validator(mode="after")
    def _fingers_fit_base(self):
        if self.base_radius > self.base_diameter / 2:
            raise ValueError("base_radius must lie within the gripper base (<= base_diameter/2)")
        return self

    @property
    def segment_length(self) -> float:
        return self.finger_neutral_length / self.segment_count

    @property
    def tilt(self) -> float:
        """Neutral finger direction measured from the gripper axis [rad]."""
        return math.radians(self.opening_angle) / 2

    @property
    def finger_pitch(self) -> float:
        return 360.0 / self.finger_count


@dataclass(frozen=True)
class FingerConfiguration:
    curvature_per_segment: float  # 1/mm
    segment_length: float  # mm
    tendon_retraction: float  # mm
    saturated: bool = False

    def __post_init__(self):
        if self.curvature_per_segment < 0:
            raise DomainError("curvature must be non-negative (fingers bend inward only)")
        if (self.curvature_per_segment == 0) != (self.tendon_retraction == 0):
            raise DomainError("curvature is zero exactly when tendon retraction is zero")


@dataclass(frozen=True)
class FingertipPose:
    radial: float
    axial: float
    tangent_angle: float  # rad, from the gripper axis


# -- tendon / servo -----------------------------------------------------------


def tendon_retraction_from_servo(servo_angle: float, geometry: GripperGeometry | None = None) -> float:
    """Tendon length wound onto the spool for a servo angle in degrees."""
    geometry = geometry or GripperGeometry()
    if not 0.0 <= servo_angle <= geometry.servo_range:
        raise DomainError(f"servo angle {servo_angle} outside [0, {geometry.servo_range}] deg")
    return math.radians(servo_angle) * geometry.spool_diameter / 2


def servo_from_tendon_retraction(retraction: float, geometry: GripperGeometry | None = None) -> float:
    geometry = geometry or GripperGeometry()
    angle = math.degrees(retraction / (geometry.spool_diameter / 2))
    if retraction < 0 or angle > geometry.servo_range * (1 + 1e-12):
        raise DomainError(f"retraction {retraction} mm is not reachable by the servo")
    return min(angle, geometry.servo_range)


# -- arc geometry ---------------------------------------------------------------


def _arc_state(r0, z0, theta0, kappa, s):
    """Position and tangent after arc length ``s`` on a constant-curvature arc.

    Works elementwise on array ``s``; uses the series form near zero curvature.
    """
    s = np.asarray(s, dtype=float)
    theta = theta0 - kappa * s
    ks = kappa * s
    if abs(kappa) * float(np.max(np.abs(s), initial=0.0)) < 1e-6:
        # second-order expansion in kappa*s; avoids cancellation in (cos a - cos b)/k
        dr = s * (np.sin(theta0) - 0.5 * ks * np.cos(theta0))
        dz = s * (np.cos(theta0) + 0.5 * ks * np.sin(theta0))
    else:
        dr = (np.cos(theta) - np.cos(theta0)) / kappa
        dz = (np.sin(theta0) - np.sin(theta)) / kappa
    return r0 + dr, z0 + dz, theta


def _segment_starts(config: FingerConfiguration, geometry: GripperGeometry):
    """(r, z, theta) at the start of each segment, chained from the finger base."""
    states = []
    r, z, th = geometry.base_radius, 0.0, geometry.tilt
    for _ in range(geometry.segment_count):
        states.append((r, z, th))
        r, z, th = _arc_state(r, z, th, config.curvature_per_segment, config.segment_length)
        r, z, th = float(r), float(z), float(th)
    states.append((r, z, th))
    return states


def pcc_forward(config: FingerConfiguration, geometry: GripperGeometry) -> FingertipPose:
    """Fingertip position (radial, axial) and tip tangent angle for one finger."""
    r, z, th = _segment_starts(config, geometry)[-1]
    return FingertipPose(radial=r, axial=z, tangent_angle=th)


def finger_points(config: FingerConfiguration, geometry: GripperGeometry, n_per_segment: int = 64):
    """Sampled backbone of one finger.

    Returns arrays ``(s, r, z, theta)`` with ``n_per_segment`` samples per
    segment (segment end points included, shared joints not duplicated).
    """
    starts = _segment_starts(config, geometry)
    seg = config.segment_length
    s_all, r_all, z_all, th_all = [], [], [], []
    for i in range(geometry.segment_count):
        r0, z0, th0 = starts[i]
        local = np.linspace(0.0, seg, n_per_segment)
        if i > 0:
            local = local[1:]
        r, z, th = _arc_state(r0, z0, th0, config.curvature_per_segment, local)
        s_all.append(i * seg + local)
        r_all.append(r)
        z_all.append(z)
        th_all.append(th)
    return (np.concatenate(s_all), np.concatenate(r_all), np.concatenate(z_all), np.concatenate(th_all))


def surface_offsets(r, z, theta, offset):
    """Points displaced by ``offset`` along the inward (ventral) normal.

    The inward normal of tangent (sin t, cos t) is (-cos t, sin t); a negative
    offset gives the dorsal surface.
    """
    return r - offset * np.cos(theta), z + offset * np.sin(theta)


# -- aperture ---------------------------------------------------------------


def _distal_min_ventral_radius(kappa: float, geometry: GripperGeometry) -> float:
    """Exact minimum radial distance of the ventral surface on the distal segment.

    With r_v(s) = r(s) - h cos(theta(s)), dr_v/ds = sin(theta)(1 - h*kappa), so
    interior extrema sit where theta is a multiple of pi; the minimum is
    one of those or an end point of the segment.
    """
    L = geometry.finger_neutral_length
    s_lo = L - geometry.segment_length
    h = geometry.finger_thickness / 2
    theta0 = geometry.tilt
    cands = [s_lo, L]
    if kappa > 0:
        # theta(s) = theta0 - kappa*s = m*pi
        m_hi = math.floor((theta0 - kappa * s_lo) / math.pi)
        m_lo = math.ceil((theta0 - kappa * L) / math.pi)
        for m in range(m_lo, m_hi + 1):
            cands.append((theta0 - m * math.pi) / kappa)
    s = np.array(cands)
    r, _, th = _arc_state(geometry.base_radius, 0.0, theta0, kappa, s)
    return float(np.min(r - h * np.cos(th)))


def aperture_at_curvature(kappa: float, geometry: GripperGeometry) -> float:
    return max(0.0, 2.0 * _distal_min_ventral_radius(kappa, geometry))


def grasp_aperture(config: FingerConfiguration, geometry: GripperGeometry) -> float:
    """Diameter of the opening bounded by the grasping pads.

    Taken as twice the smallest radial distance of the ventral surface over
    the distal segment (medial bone to fingertip). Zero means contact.
    """
    return aperture_at_curvature(config.curvature_per_segment, geometry)


@dataclass(frozen=True)
class ClosureLimit:
    curvature: float
    aperture: float
    fingertip_contact: bool


@lru_cache(maxsize=64)
def closure_limit(geometry: GripperGeometry) -> ClosureLimit:
    """Curvature at which the fingers are fully closed.

    Either the first curvature where the pads meet on the axis, or, if they
    never do, the curvature of tightest closure (beyond it the fingertips
    curl back outward and the aperture grows again).
    """
    k_max = 2 * math.pi / geometry.finger_neutral_length
    grid = np.linspace(0.0, k_max, 2001)
    prev = aperture_at_curvature(0.0, geometry)
    for i in range(1, len(grid)):
        cur = aperture_at_curvature(float(grid[i]), geometry)
        if cur <= 0.0:
            k = brentq(lambda x: _distal_min_ventral_radius(x, geometry), grid[i - 1], grid[i], xtol=1e-14)
            return ClosureLimit(curvature=float(k), aperture=0.0, fingertip_contact=True)
        if cur > prev:
            lo = float(grid[max(i - 2, 0)])
            res = minimize_scalar(
                lambda x: aperture_at_curvature(x, geometry),
                bounds=(lo, float(grid[i])),
                method="bounded",
                options={"xatol": 1e-12},
            )
            return ClosureLimit(curvature=float(res.x), aperture=float(res.fun), fingertip_contact=False)
        prev = cur
    raise DomainError("finger never closes within one full turn of curvature")


def full_travel_retraction(geometry: GripperGeometry) -> float:
    return tendon_retraction_from_servo(geometry.servo_range, geometry)


def curvature_gain(geometry: GripperGeometry) -> float:
    """Linear retraction-to-curvature gain [1/mm^2].

    Calibrated so that full servo travel lands exactly on the closure limit.
    """
    return closure_limit(geometry).curvature / full_travel_retraction(geometry)


def curvature_from_retraction(retraction: float, geometry: GripperGeometry) -> FingerConfiguration:
    if retraction < 0:
        raise DomainError("tendon retraction cannot be negative")
    limit = full_travel_retraction(geometry)
    saturated = retraction > limit
    r = min(retraction, limit)
    kappa = curvature_gain(geometry) * r
    if kappa == 0.0:
        # retraction too small to register as any curvature
        r = 0.0
    return FingerConfiguration(
        curvature_per_segment=kappa,
        segment_length=geometry.segment_length,
        tendon_retraction=r,
        saturated=saturated,
    )


def aperture_from_retraction(retraction: float, geometry: GripperGeometry) -> float:
    return grasp_aperture(curvature_from_retraction(retraction, geometry), geometry)


def retraction_for_aperture(target: float, geometry: GripperGeometry) -> float:
    """Tendon retraction that closes the gripper to ``target`` mm.

    Raises DomainError when the target lies outside the achievable range.
    """
    hi = full_travel_retraction(geometry)
    a_open = aperture_from_retraction(0.0, geometry)
    a_closed = aperture_from_retraction(hi, geometry)
    if not a_closed <= target <= a_open:
        raise DomainError(f"aperture {target} mm outside achievable range [{a_closed:.3f}, {a_open:.3f}]")
    if target == a_open:
        return 0.0
    if target == a_closed:
        return hi
    return float(brentq(lambda r: aperture_from_retraction(r, geometry) - target, 0.0, hi, xtol=1e-12))


def fingertip_positions(config: FingerConfiguration, geometry: GripperGeometry) -> np.ndarray:
    """3D fingertip backbone points (finger_count x 3), fingers at equal pitch."""
    tip = pcc_forward(config, geometry)
    phi = np.radians(np.arange(geometry.finger_count) * geometry.finger_pitch)
    return np.column_stack([tip.radial * np.cos(phi), tip.radial * np.sin(phi), np.full_like(phi, tip.axial)])


def fingertip_gap(config: FingerConfiguration, geometry: GripperGeometry) -> float:
    """Smallest surface-to-surface distance between any two fingertips."""
    tips = fingertip_positions(config, geometry)
    d = np.linalg.norm(tips[:, None, :] - tips[None, :, :], axis=-1)
    iu = np.triu_indices(len(tips), k=1)
    return float(d[iu].min()) - geometry.finger_thickness


# -- camera clearance -----------------------------------------------------------


def fov_clearance(
    config: FingerConfiguration,
    geometry: GripperGeometry,
    *,
    camera_fov: float | None = None,
    n_per_segment: int = 64,
    tol: float = 1e-3,
) -> bool:
    """True iff no sampled finger point lies inside the camera view cone.

    The cone has its apex at the camera (gripper centre, palm plane) and
    half-angle ``camera_fov / 2``. ``camera_fov`` overrides the geometry value
    and may be 180 (half-space). Backbone, ventral and dorsal surfaces are
    checked; fingers are identical so one is enough.
    """
    fov = geometry.camera_fov if camera_fov is None else camera_fov
    if not 0 < fov <= 180:
        raise DomainError("camera_fov must be in (0, 180]")
    half = math.radians(fov) / 2
    _, r, z, th = finger_points(config, geometry, n_per_segment)
    h = geometry.finger_thickness / 2
    rv, zv = surface_offsets(r, z, th, h)
    rd, zd = surface_offsets(r, z, th, -h)
    rr = np.concatenate([r, rv, rd])
    zz = np.concatenate([z, zv, zd])
    # signed distance to the cone's generating line in the meridian plane (>0 outside)
    margin = np.abs(rr) * math.cos(half) - zz * math.sin(half)
    return bool(np.all(margin >= -tol))
