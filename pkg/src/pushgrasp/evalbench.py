"""Test-case generators, the trial runner, and metric aggregation."""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Protocol as TypingProtocol

import numpy as np

from .perception import most_occluded_target, occluded_rate
from .rewards import BETA, ThresholdState, grasp_reward, push_reward, update_threshold
from .sim import MotionPrimitive, Pose, Scene, apply_grasp, apply_push, empty_scene, spawn_random
from .trainer import PolicySnapshot, greedy_kind, observe, to_primitive
from .coordinator import decide

N_LAYOUTS = 6
OCCLUSION_REJECTION_CAP = 500


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Protocol:
    name: str
    family: str  # random | occluded | challenging
    n_trials: int
    max_attempts: int
    consecutive_fail_limit: int
    n_objects: int = 30
    hard: bool = False
    occlusion_bin: tuple[float, float] | None = None
    layout_id: int | None = None
    seed_base: int = 1000
    workspace: int = 64


_OCCLUDED = re.compile(r"^occluded\(\s*([0-9.]+)\s*,\s*([0-9.]+)\s*\)$")
_CHALLENGING = re.compile(r"^challenging\(\s*([0-9]+)\s*\)$")


def protocol(name: str, **overrides) -> Protocol:
    """Build a protocol from its name: ``random15``, ``random30``, ``random30_hard``,
    ``occluded(lo,hi)`` or ``challenging(k)`` (k = 1..6)."""
    if name in ("random15", "random30", "random30_hard"):
        base = Protocol(
            name, "random", n_trials=100, max_attempts=5, consecutive_fail_limit=5,
            n_objects=15 if name == "random15" else 30, hard=name.endswith("_hard"),
        )  # fmt: skip
    elif m := _OCCLUDED.match(name):
        lo, hi = float(m.group(1)), float(m.group(2))
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"bad occlusion bin in {name!r}")
        base = Protocol(name, "occluded", 100, 10, 5, n_objects=30, occlusion_bin=(lo, hi))
    elif m := _CHALLENGING.match(name):
        k = int(m.group(1))
        if not 1 <= k <= N_LAYOUTS:
            raise ValueError(f"layout id must be 1..{N_LAYOUTS}")
        base = Protocol(name, "challenging", 30, 10, 10, layout_id=k)
    else:
        raise ValueError(f"unknown protocol {name!r}")
    return replace(base, **overrides)


def load_protocols(path: str | Path) -> list[Protocol]:
    """Protocol file: one JSON object or a list of them, ``{name, n_trials, max_attempts, fail_limit, seed_base}``."""
    data = json.loads(Path(path).read_text())
    items = data if isinstance(data, list) else [data]
    out = []
    for item in items:
        item = dict(item)
        allowed = {"name", "n_trials", "max_attempts", "fail_limit", "seed_base", "workspace", "n_objects"}
        unknown = set(item) - allowed
        if unknown:
            raise ValueError(f"unknown protocol keys: {sorted(unknown)}")
        name = item.pop("name")
        if "fail_limit" in item:
            item["consecutive_fail_limit"] = item.pop("fail_limit")
        out.append(protocol(name, **item))
    return out


# -- case generation ------------------------------------------------------


def load_layout(layout_id: int) -> tuple[Scene, int]:
    text = resources.files("pushgrasp").joinpath(f"layouts/layout{layout_id}.json").read_text()
    data = json.loads(text)
    return Scene.from_dict(data), int(data["target_id"])


def _jitter(scene: Scene, rng: np.random.Generator, shift: float = 0.5, turn: float = 0.05) -> Scene:
    objects = []
    for spec, pose in scene.objects:
        objects.append(
            (spec, Pose(pose.x + rng.uniform(-shift, shift), pose.y + rng.uniform(-shift, shift),
                        (pose.theta + rng.uniform(-turn, turn)) % (2 * math.pi)))
        )  # fmt: skip
    return replace(scene, objects=tuple(objects), _cache={})


def generate_case(proto: Protocol, trial_seed: int) -> tuple[Scene, int]:
    rng = np.random.default_rng(trial_seed)
    if proto.family == "random":
        scene = spawn_random(empty_scene(proto.workspace, seed=trial_seed), proto.n_objects, rng)
        if proto.hard:
            return scene, most_occluded_target(scene, scene.ids)
        return scene, scene.ids[int(rng.integers(len(scene)))]
    if proto.family == "occluded":
        lo, hi = proto.occlusion_bin
        for _ in range(OCCLUSION_REJECTION_CAP):
            scene = spawn_random(empty_scene(proto.workspace, seed=trial_seed), proto.n_objects, rng)
            hits = [i for i in scene.ids if lo <= occluded_rate(scene, i) < hi]
            if hits:
                return scene, hits[int(rng.integers(len(hits)))]
        raise GenerationError(f"no target with occlusion in [{lo}, {hi}) after {OCCLUSION_REJECTION_CAP} scenes")
    if proto.family == "challenging":
        scene, target = load_layout(proto.layout_id)
        scene = _jitter(scene, rng)
        if scene.width != proto.workspace:
            raise GenerationError("challenging layouts are defined on a 64x64 workspace")
        return replace(scene, seed=trial_seed), target
    raise ValueError(f"unknown protocol family {proto.family!r}")


# -- policies -------------------------------------------------------------


@dataclass(frozen=True)
class Plan:
    primitive: MotionPrimitive
    q_p: float = 0.0
    q_g: float = 0.0
    coord_p: float | None = None


class Policy(TypingProtocol):
    t_g: float

    def plan(self, scene: Scene, target: int, f_c: int) -> Plan: ...


class QPolicy:
    """Greedy policy from a frozen snapshot; ``use_coordinator=False`` is the Q-argmax ablation."""

    def __init__(self, snapshot: PolicySnapshot, use_coordinator: bool = True):
        self.snapshot = snapshot
        self.use_coordinator = use_coordinator
        self.t_g = snapshot.t_g

    def plan(self, scene: Scene, target: int, f_c: int) -> Plan:
        cfg = self.snapshot.config
        obs = observe(scene, target, self.snapshot.qnet, f_c, cfg.border_any_overlap, cfg.grasp_within_mask)
        p = self.snapshot.coordinator.predict(obs.features)
        kind = decide(p, cfg.decision_threshold) if self.use_coordinator else greedy_kind(obs)
        return Plan(to_primitive(obs.best(kind)), obs.best_push.q_value, obs.best_grasp.q_value, p)


# -- trials ---------------------------------------------------------------


@dataclass
class TrialRecord:
    protocol: str
    seed: int
    motions: list[dict] = field(default_factory=list)
    success: bool = False
    attempts: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def run_trial(scene: Scene, target: int, policy: Policy, proto: Protocol, seed: int = 0) -> TrialRecord:
    """Run one episode without learning; ends on target retrieval, the attempt cap, or a zero-reward streak."""
    record = TrialRecord(proto.name, seed)
    threshold = ThresholdState(policy.t_g, BETA)
    f_c = 0
    zero_streak = 0
    plan = policy.plan(scene, target, f_c)
    while True:
        prim = plan.primitive
        o_before = occluded_rate(scene, target)
        motion = {"kind": prim.kind, "rot": prim.rot_index, "x": prim.x, "y": prim.y, "o_before": o_before}
        if prim.kind == "push":
            scene, out = apply_push(scene, prim)
            o_after = occluded_rate(scene, target)
            next_plan = policy.plan(scene, target, f_c)
            reward = push_reward(o_before, o_after, next_plan.q_g, threshold)
            threshold = update_threshold(threshold, next_plan.q_g)
            motion.update(outcome=f"moved:{len(out.moved)}", o_after=o_after)
            done = False
        else:
            amodal = scene.footprint(target)
            scene, out = apply_grasp(scene, prim, target)
            reward = grasp_reward(out, (prim.x, prim.y), amodal)
            done = out.target_was_grasped
            motion["outcome"] = "target" if done else ("other" if out.success else "fail")
            if not done:
                f_c += 1
                next_plan = policy.plan(scene, target, f_c)
        motion["reward"] = reward
        record.motions.append(motion)
        record.attempts = len(record.motions)
        zero_streak = zero_streak + 1 if reward == 0.0 else 0
        if done:
            record.success = True
            break
        if record.attempts >= proto.max_attempts or zero_streak >= proto.consecutive_fail_limit:
            break
        plan = next_plan
    return record


def _run_one(args) -> TrialRecord:
    proto, trial_seed, snapshot, use_coordinator = args
    scene, target = generate_case(proto, trial_seed)
    return run_trial(scene, target, QPolicy(snapshot, use_coordinator), proto, trial_seed)


def trial_seeds(proto: Protocol) -> list[int]:
    return [proto.seed_base + i for i in range(proto.n_trials)]


def evaluate(
    snapshot: PolicySnapshot,
    protocols: Iterable[Protocol],
    use_coordinator: bool = True,
    workers: int = 1,
) -> list[TrialRecord]:
    jobs = [(p, s, snapshot, use_coordinator) for p in protocols for s in trial_seeds(p)]
    if workers <= 1:
        return [_run_one(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, jobs, chunksize=4))


# -- aggregation ------------------------------------------------------------


def aggregate(records: list[TrialRecord], attempts_successes_only: bool = False) -> list[dict]:
    """Per-protocol rows (in first-seen order) and an ``average`` row over protocols."""
    if not records:
        raise ValueError("no trial records")
    groups: dict[str, list[TrialRecord]] = {}
    for rec in records:
        groups.setdefault(rec.protocol, []).append(rec)
    rows = []
    for name, recs in groups.items():
        counted = [r for r in recs if r.success] if attempts_successes_only else recs
        rows.append(
            {
                "protocol": name,
                "trials": len(recs),
                "success_rate_pct": 100.0 * sum(r.success for r in recs) / len(recs),
                "mean_attempts": float(np.mean([r.attempts for r in counted])) if counted else float("nan"),
            }
        )
    rows.append(
        {
            "protocol": "average",
            "trials": len(records),
            "success_rate_pct": float(np.mean([r["success_rate_pct"] for r in rows])),
            "mean_attempts": float(np.mean([r["mean_attempts"] for r in rows])),
        }
    )
    return rows


RESULT_COLUMNS = ("protocol", "trials", "success_rate_pct", "mean_attempts")


def format_table(rows: list[dict], label: str | None = None) -> str:
    cols = (("policy",) if label is not None else ()) + RESULT_COLUMNS
    lines = [",".join(cols)]
    for row in rows:
        cells = [label] if label is not None else []
        cells += [row["protocol"], str(row["trials"]), f"{row['success_rate_pct']:.2f}", f"{row['mean_attempts']:.2f}"]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def format_comparison(labelled: dict[str, list[dict]]) -> str:
    parts = []
    for i, (label, rows) in enumerate(labelled.items()):
        text = format_table(rows, label)
        parts.append(text if i == 0 else text.split("\n", 1)[1])
    return "".join(parts)
