"""End-to-end runs, Monte Carlo batches and the files they leave behind.

A run is detect -> servo -> seat -> sense -> classify -> pull -> deposit,
repeated until nothing is left in view. Every random draw comes from four
independent streams (scene, detection, sensing, grasp) spawned from the run
seed, so a run is reproduced exactly by its scenario and seed.
"""

from __future__ import annotations

import csv
import datetime as _dt
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .fingers import DomainError, curvature_from_retraction, pcc_forward, retraction_for_aperture, servo_from_tendon_retraction
from .grasp import PULLED, AttemptRecord, HarvestReport, Outcome, aggregate, attempt_detach, force_table_rows
from .optics import BerryInstance, Pose, Scene
from .ripeness import Ripeness, classify, measure
from .scenario import Scenario, build_scene
from .servo import IbvsResult, ServoEpisode, TrajectoryPoint, run_ibvs

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3

TRAJECTORY_COLUMNS = ["step", "phase", "x", "y", "z", "pixel_error", "estimated_depth", "berry_id"]
DETECTION_COLUMNS = ["tick", "berry_id", "u", "v", "w", "h", "confidence"]


@dataclass
class RunArtifacts:
    scenario: Scenario
    seed: int
    report: HarvestReport
    berries: list[BerryInstance]
    ibvs: IbvsResult = field(default_factory=IbvsResult)
    threshold: float | None = None
    created: str = ""

    @property
    def exit_code(self) -> int:
        if any(Outcome(a.outcome) is Outcome.NON_CONVERGENCE for a in self.report.attempts):
            return EXIT_NONCONVERGENCE
        return EXIT_OK

    def report_dict(self) -> dict:
        return {
            "version": 1,
            "scenario": self.scenario.name,
            "seed": self.seed,
            "threshold": self.threshold,
            "berries": [
                {
                    "berry_id": b.berry_id,
                    "position": [float(x) for x in b.position],
                    "diameter": b.diameter,
                    "ripeness": b.ripeness.value,
                    "latent_reflectance": b.latent_reflectance,
                    "latent_retention_force": b.latent_retention_force,
                }
                for b in self.berries
            ],
            **self.report.to_dict(),
            "servo": {"iterations": self.ibvs.iterations, "truncated": self.ibvs.truncated},
        }

    def manifest(self) -> dict:
        return {
            "manifest_version": 1,
            "code_version": __version__,
            "created": self.created,
            "seed": self.seed,
            "scenario": self.scenario.model_dump(mode="json"),
        }


def _streams(seed: int):
    scene, detect, sense, grasp = np.random.SeedSequence(seed).spawn(4)
    return tuple(np.random.default_rng(s) for s in (scene, detect, sense, grasp))


def _camera_depth(berry: BerryInstance, pose: Pose) -> float:
    return float(pose.to_camera(berry.position)[2])


def run(scenario: Scenario, seed: int | None = None) -> RunArtifacts:
    """Simulate one harvest of the scenario's berries."""
    seed = scenario.seed if seed is None else int(seed)
    scene_rng, detect_rng, sense_rng, grasp_rng = _streams(seed)
    scene = build_scene(scenario, scene_rng)
    geometry = scenario.gripper
    threshold = scenario.classification_threshold if scenario.sensing else None
    standoff = scenario.servo.standoff if scenario.servo.standoff is not None else geometry.sensor_palm_offset
    # the closing fingers pull a berry this far in front of the palm onto the sensor
    reach = pcc_forward(curvature_from_retraction(0.0, geometry), geometry).axial
    records: list[AttemptRecord] = []

    def handle(berry: BerryInstance, palm_gap: float, episode: ServoEpisode | None) -> bool:
        try:
            angle = servo_from_tendon_retraction(retraction_for_aperture(berry.diameter, geometry), geometry)
        except DomainError:
            angle = None
        rec = AttemptRecord(
            berry_id=berry.berry_id,
            ripeness=berry.ripeness,
            outcome=Outcome.NON_CONVERGENCE,
            diameter=berry.diameter,
            servo_iterations=episode.iterations if episode else 0,
            approach_steps=episode.approach_steps if episode else 0,
            servo_angle=angle,
        )
        records.append(rec)
        if palm_gap > reach:
            log.info("berry %d not seated (gap %.1f mm)", berry.berry_id, palm_gap)
            return False
        if scenario.sensing:
            rec.reading = measure(berry, scenario.sensor, sense_rng, palm_gap=0.0)
            rec.classification = classify(rec.reading.R_f, threshold)
        rec.outcome = attempt_detach(berry.latent_retention_force, scenario.grasp, rec.classification, grasp_rng)
        if rec.outcome in PULLED:
            rec.retention_force = berry.latent_retention_force
        if rec.outcome is Outcome.DETACHED:
            berry.attached = False
            return True
        return False

    ibvs = IbvsResult()
    if scenario.positioning == "manual":
        for berry in scene.berries:
            handle(berry, 0.0, None)
    else:
        def on_grasp(berry_id, pose, episode):
            berry = scene.berry(berry_id)
            return handle(berry, max(0.0, _camera_depth(berry, pose) - standoff), episode)

        ibvs = run_ibvs(scene, scenario.servo, detect_rng, home=scenario.home, clamshell=scenario.clamshell,
                        on_grasp=on_grasp, standoff=standoff)
        seen = {r.berry_id for r in records}
        for ep in ibvs.episodes:
            if not ep.converged and ep.berry_id not in seen:
                b = scene.berry(ep.berry_id)
                records.append(AttemptRecord(b.berry_id, b.ripeness, Outcome.NON_CONVERGENCE, diameter=b.diameter,
                                             servo_iterations=ep.iterations, approach_steps=ep.approach_steps))
                seen.add(ep.berry_id)
        leftover = Outcome.NON_CONVERGENCE if ibvs.truncated else Outcome.UNDETECTED
        for b in scene.berries:
            if b.berry_id not in seen:
                records.append(AttemptRecord(b.berry_id, b.ripeness, leftover, diameter=b.diameter))

    return RunArtifacts(
        scenario=scenario,
        seed=seed,
        report=aggregate(records),
        berries=scene.berries,
        ibvs=ibvs,
        threshold=threshold,
        created=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )


# -- files --------------------------------------------------------------------


def _cell(v):
    if v is None:
        return ""
    if hasattr(v, "value"):
        return v.value
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header: list[str], rows, comments: list[str] = ()):
    with path.open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_artifacts(artifacts: RunArtifacts, out_dir) -> Path:
    """Write report, force-table CSV, trajectory, detection log and manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", artifacts.report_dict())
    with (out / "force_table.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(force_table_rows(artifacts.report.aggregate_stats))
    tp: list[TrajectoryPoint] = artifacts.ibvs.trajectory
    _write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS,
               ([p.step, p.phase, p.x, p.y, p.z, p.pixel_error, p.estimated_depth, p.berry_id] for p in tp))
    _write_csv(out / "detections.csv", DETECTION_COLUMNS,
               ([d.tick, d.berry_id, d.u, d.v, d.w, d.h, d.confidence] for d in artifacts.ibvs.detections))
    _write_json(out / "manifest.json", artifacts.manifest())
    return out


# -- Monte Carlo ----------------------------------------------------------------


def derive_trial_seed(master_seed: int, trial: int) -> int:
    """Seed of one replica; depends only on (master seed, trial index)."""
    return int(np.random.SeedSequence(master_seed, spawn_key=(trial,)).generate_state(1, dtype=np.uint64)[0])


def _trial(args) -> tuple[int, dict]:
    scenario, index, seed = args
    art = run(scenario, seed=seed)
    return index, {
        "seed": seed,
        "attempts": [a.to_dict() for a in art.report.attempts],
        "aggregate": art.report.aggregate_stats,
        "exit_code": art.exit_code,
    }


def _ci(k: int, n: int, level: float = 0.95):
    if n == 0:
        return None
    ci = binomtest(k, n).proportion_ci(confidence_level=level, method="exact")
    return [float(ci.low), float(ci.high)]


@dataclass
class MonteCarloReport:
    master_seed: int
    trial_seeds: list[int]
    trials: list[dict]
    aggregate_stats: dict

    @property
    def exit_code(self) -> int:
        return EXIT_NONCONVERGENCE if any(t["exit_code"] == EXIT_NONCONVERGENCE for t in self.trials) else EXIT_OK

    def to_dict(self, include_trials: bool = False) -> dict:
        d = {"master_seed": self.master_seed, "trial_seeds": self.trial_seeds, "aggregate": self.aggregate_stats}
        if include_trials:
            d["trials"] = self.trials
        return d


def monte_carlo(scenario: Scenario, trials: int, master_seed: int | None = None, workers: int = 1,
                order: list[int] | None = None) -> MonteCarloReport:
    """Independent replicas of a scenario, pooled.

    ``order`` only changes execution order (used to check that results do
    not depend on it); ``workers > 1`` runs trials in a process pool.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    master = scenario.seed if master_seed is None else int(master_seed)
    seeds = [derive_trial_seed(master, i) for i in range(trials)]
    order = list(range(trials)) if order is None else list(order)
    if sorted(order) != list(range(trials)):
        raise ValueError("order must be a permutation of the trial indices")
    jobs = [(scenario, i, seeds[i]) for i in order]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            done = list(ex.map(_trial, jobs))
    else:
        done = [_trial(j) for j in jobs]
    results = [r for _, r in sorted(done, key=lambda t: t[0])]

    pooled = [AttemptRecord.from_dict(a) for r in results for a in r["attempts"]]
    stats = aggregate(pooled).aggregate_stats
    stats["trials"] = trials
    stats["efficiency_ci95"] = _ci(stats["successes"], stats["attempts"])
    stats["classification_accuracy_ci95"] = _ci(stats["classified_correctly"], stats["sensed"])
    stats["trials_with_nonconvergence"] = sum(r["exit_code"] == EXIT_NONCONVERGENCE for r in results)
    stats["per_trial_efficiency"] = [r["aggregate"]["efficiency"] for r in results]
    stats["mean_servo_iterations_per_trial"] = float(np.mean([r["aggregate"]["servo_iterations"] for r in results]))
    return MonteCarloReport(master, seeds, results, stats)


# -- plot data ----------------------------------------------------------------------


SCATTER_COMMENTS = [
    "reflectance R_f (analog counts) of every sensed berry, one column per true ripeness class",
    "ripe: readings of ripe berries; unripe: readings of unripe berries; rows are not paired",
]
APPROACH_COMMENTS = [
    "end-effector position at each approach cycle, world frame, mm",
    "berry_id: servo target; cycle: approach index (last row per berry is the grasp pose)",
    "distance_to_berry: euclidean distance from the end-effector to the berry centre",
]


def _read_csv(path: Path) -> list[dict]:
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def emit_plots(run_dir) -> list[Path]:
    """Plot-ready CSVs for the reflectance scatter and servo trajectory."""
    run_dir = Path(run_dir)
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    traj_path = run_dir / "trajectory.csv"
    traj = _read_csv(traj_path) if traj_path.exists() else []
    out = run_dir / "plots"
    out.mkdir(exist_ok=True)

    cols: dict[str, list[float]] = {c.value: [] for c in Ripeness}
    for a in report.get("attempts", []):
        if a.get("reading"):
            cols[a["ripeness"]].append(a["reading"]["R_f"])
    n = max((len(v) for v in cols.values()), default=0)
    scatter = out / "reflectance_scatter.csv"
    _write_csv(scatter, ["ripe", "unripe"],
               ([cols["ripe"][i] if i < len(cols["ripe"]) else None,
                 cols["unripe"][i] if i < len(cols["unripe"]) else None] for i in range(n)),
               SCATTER_COMMENTS)

    positions = {b["berry_id"]: np.asarray(b["position"]) for b in report.get("berries", [])}
    rows = []
    cycle: dict[int, int] = {}
    for r in traj:
        if r["phase"] not in ("Approach", "Grasp") or not r["berry_id"]:
            continue
        bid = int(r["berry_id"])
        p = np.array([float(r["x"]), float(r["y"]), float(r["z"])])
        c = cycle.get(bid, 0)
        cycle[bid] = c + 1
        rows.append([bid, c, p[0], p[1], p[2], float(np.linalg.norm(p - positions[bid]))])
    approach = out / "approach_trajectory.csv"
    _write_csv(approach, ["berry_id", "cycle", "x", "y", "z", "distance_to_berry"], rows, APPROACH_COMMENTS)
    return [scatter, approach]
