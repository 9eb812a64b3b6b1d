import math

import numpy as np
import pytest
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st

from berryharvest.optics import BerryInstance, BoundingBox, CameraModel, DetectorParams, Pose, Scene
from berryharvest.ripeness import Ripeness
from berryharvest.servo import (
    ImageJacobian,
    Phase,
    ProtocolError,
    RecalibrationRequired,
    ServoParams,
    approach_step,
    calibrate_jacobian,
    centering_step,
    pixel_error,
    run_ibvs,
)

CAM = CameraModel()
F = CAM.focal_length_px
EXACT = DetectorParams.noiseless()


def berry(i, pos, d=20.0):
    return BerryInstance(i, np.asarray(pos, float), d, Ripeness.RIPE, 16.78, 2.0)


def observer(scene, rng=None):
    rng = rng or np.random.default_rng(0)
    return lambda pose: scene.detect(pose, rng)


def jac_at(z, jog, x=0.0, y=0.0):
    scene = Scene([berry(0, (x, y, z))], detector=EXACT)
    obs = observer(scene)
    (ref,) = obs(Pose())
    return calibrate_jacobian(obs, Pose(), ref, jog).matrix


class TestJacobian:
    def test_analytic_diagonal(self):
        J = jac_at(200.0, 2.0)
        # moving the camera +x shifts a fixed point by -f/Z
        assert J[0, 0] == pytest.approx(-F / 200, rel=1e-12)
        assert J[1, 1] == pytest.approx(-F / 200, rel=1e-12)
        assert abs(J[0, 0]) == pytest.approx(3.81, abs=5e-3)
        assert abs(J[0, 1]) < 1e-12 and abs(J[1, 0]) < 1e-12

    def test_jog_independent_when_noiseless(self):
        assert np.allclose(jac_at(200, 2), jac_at(200, 4), rtol=2 / 200)

    def test_off_axis_is_still_exact(self):
        # translation-only Jacobian of a fixed point is -f/Z regardless of position
        J = jac_at(250, 3, x=40, y=-25)
        assert J == pytest.approx(np.diag([-F / 250] * 2), abs=1e-9)

    def test_noise_error_trend(self):
        # with pixel noise the error shrinks as the jog grows (O(sigma/jog))
        errs = []
        for jog in (1.0, 2.0, 4.0):
            rng = np.random.default_rng(11)
            scene = Scene([berry(0, (0, 0, 200))], detector=DetectorParams(center_sigma_px=0.5, size_sigma_frac=0))
            e = []
            for _ in range(200):
                obs = observer(scene, rng)
                (ref,) = obs(Pose())
                e.append(np.linalg.norm(calibrate_jacobian(obs, Pose(), ref, jog).matrix + np.eye(2) * F / 200))
            errs.append(np.mean(e))
        assert errs[0] > errs[1] > errs[2]

    def test_ill_conditioned(self):
        with pytest.raises(RecalibrationRequired):
            ImageJacobian(np.array([[1.0, 1.0], [1.0, 1.0]])).solve([1, 0])
        assert ImageJacobian(np.array([[np.nan, 0], [0, 1]])).condition == math.inf


class TestSteps:
    J = ImageJacobian(np.diag([-3.81, -3.81]))

    def test_centred_is_zero(self):
        assert centering_step(self.J, BoundingBox(640, 360, 10, 10, 1), CAM, 1.0) == (0.0, 0.0)

    def test_linear_solve(self):
        t = BoundingBox(640 + 76.27, 360, 10, 10, 1)
        assert centering_step(self.J, t, CAM, 1.0) == pytest.approx((76.27 / 3.81, 0))
        # error (-76.27, 0) over J = -3.81 gives a 20 mm step; sign follows the convention
        assert abs(centering_step(self.J, t, CAM, 1.0)[0]) == pytest.approx(20.0, abs=0.02)
        assert centering_step(self.J, t, CAM, 0.5)[0] == pytest.approx(centering_step(self.J, t, CAM, 1.0)[0] / 2)

    def test_approach(self):
        assert approach_step(400, 5) == 197.5
        assert approach_step(5, 5) == 0
        with pytest.raises(ProtocolError):
            approach_step(None, 5)

    def test_geometric_series(self):
        d = 400.0
        for _ in range(6):
            d -= approach_step(d, 5)
        assert d == pytest.approx(5 + 395 * 0.5**6)
        assert d == pytest.approx(11.2, abs=0.05)

    @given(st.floats(-300, 300), st.floats(-200, 200), st.floats(0.05, 1.0), st.floats(100, 500))
    def test_centering_contraction(self, du, dv, gain, z):
        x, y = du * z / F, dv * z / F
        scene = Scene([berry(0, (x, y, z))], detector=EXACT)
        obs = observer(scene)
        (ref,) = obs(Pose())
        J = calibrate_jacobian(obs, Pose(), ref, 2.0)
        dx, dy = centering_step(J, ref, CAM, gain)
        (after,) = obs(Pose().moved((dx, dy, 0)))
        assert pixel_error(after, CAM) == pytest.approx((1 - gain) * pixel_error(ref, CAM), abs=0.5)


class TestRun:
    def test_empty(self, rng):
        res = run_ibvs(Scene([]), ServoParams(), rng)
        assert [p.phase for p in res.trajectory] == [Phase.DONE]
        assert res.iterations == 0 and res.episodes == []

    def test_single_berry_400(self, rng):
        scene = Scene([berry(0, (0, 0, 400))], detector=EXACT)
        res = run_ibvs(scene, ServoParams(assumed_diameter=20.0), rng)
        (ep,) = res.episodes
        assert ep.converged and ep.approach_steps == 7
        assert ep.final_depth_estimate < 10
        assert not scene.berries[0].attached

    def test_residual_matches_series(self, rng):
        scene = Scene([berry(0, (0, 0, 400))], detector=EXACT)
        res = run_ibvs(scene, ServoParams(assumed_diameter=20.0), rng)
        zs = [p.z for p in res.trajectory if p.phase is Phase.APPROACH]
        remaining = [400 - z for z in zs]
        for k, d in enumerate(remaining):
            assert d - 5 == pytest.approx(395 * 0.5**k, rel=1e-9)

    def test_three_leftmost_first(self, rng):
        bs = [berry(0, (0, -10, 250)), berry(1, (45, 8, 200)), berry(2, (-45, 5, 220))]
        scene = Scene(bs, detector=EXACT)
        res = run_ibvs(scene, ServoParams(), rng)
        assert [e.berry_id for e in res.episodes] == [2, 0, 1]
        assert sum(p.phase is Phase.GRASP for p in res.trajectory) == 3
        assert all(e.converged for e in res.episodes)

    @given(st.lists(st.tuples(st.floats(-60, 60), st.floats(-30, 30), st.floats(150, 350)), min_size=1, max_size=4))
    # near-tie in u at different depths: parallax while centring swaps the order
    @example([(11.0, 22.0, 150.0), (12.0, 0.0, 164.0)])
    def test_order_by_initial_u(self, pts):
        # separated berries: once centred on a target a nearer berry can only
        # block it if it sits within its own radius of the line of approach
        for i, a in enumerate(pts):
            for b in pts[:i]:
                assume(math.hypot(a[0] - b[0], a[1] - b[1]) > 22)
        bs = [berry(i, p) for i, p in enumerate(pts)]
        scene = Scene(bs, detector=EXACT)
        initial = {b.berry_id: b.center_u for b in scene.detect(Pose(), np.random.default_rng(0))}
        res = run_ibvs(scene, ServoParams(), np.random.default_rng(0))
        grasped = [e.berry_id for e in res.episodes if e.converged]
        in_view = [g for g in grasped if g in initial]
        assert in_view == sorted(in_view, key=lambda i: initial[i])

    def test_iteration_cap(self, rng):
        scene = Scene([berry(0, (0, 0, 300))], detector=EXACT)
        res = run_ibvs(scene, ServoParams(iteration_cap=3), rng)
        (ep,) = res.episodes
        assert not ep.converged and ep.iterations == 4
        assert scene.berries[0].attached

    def test_deterministic(self):
        def once():
            scene = Scene([berry(0, (10, 5, 300)), berry(1, (-30, 0, 250))])
            return run_ibvs(scene, ServoParams(), np.random.default_rng(99))

        a, b = once(), once()
        assert a.trajectory == b.trajectory and a.detections == b.detections

    def test_deposit_path(self, rng):
        scene = Scene([berry(0, (0, 0, 200))], detector=EXACT)
        clam = Pose((-150.0, 100.0, 0.0))
        res = run_ibvs(scene, ServoParams(), rng, clamshell=clam)
        dep = [p for p in res.trajectory if p.phase is Phase.DEPOSIT]
        assert len(dep) == 40
        assert (dep[19].x, dep[19].y, dep[19].z) == pytest.approx(clam.position)
        assert (dep[-1].x, dep[-1].y, dep[-1].z) == pytest.approx((0, 0, 0))

    def test_handler_controls_deposit(self, rng):
        scene = Scene([berry(0, (0, 0, 200))], detector=EXACT)
        res = run_ibvs(scene, ServoParams(), rng, on_grasp=lambda *a: False)
        assert sum(p.phase is Phase.DEPOSIT for p in res.trajectory) == 20
        assert scene.berries[0].attached and len(res.episodes) == 1
