from __future__ import annotations

import json

import numpy as np
import pytest

from pushgrasp import evalbench as E
from pushgrasp.config import compressed
from pushgrasp.perception import occluded_rate
from pushgrasp.sim import DEFAULT_SHAPES, MotionPrimitive, Pose, add_object, empty_scene
from pushgrasp.trainer import Trainer


class Scripted:
    """Plays a fixed list of primitives, repeating the last one."""

    def __init__(self, primitives, t_g=0.25):
        self.primitives = list(primitives)
        self.t_g = t_g
        self.calls = 0

    def plan(self, scene, target, f_c):
        prim = self.primitives[min(self.calls, len(self.primitives) - 1)]
        self.calls += 1
        return E.Plan(prim)


def lone_square():
    return add_object(empty_scene(32), DEFAULT_SHAPES[0], Pose(16.0, 16.0))


def test_three_record_fixture_aggregates():
    records = [
        E.TrialRecord("p", 0, success=True, attempts=2),
        E.TrialRecord("p", 1, success=True, attempts=3),
        E.TrialRecord("p", 2, success=False, attempts=5),
    ]
    row = E.aggregate(records)[0]
    assert f"{row['success_rate_pct']:.2f}" == "66.67"
    assert f"{row['mean_attempts']:.2f}" == "3.33"
    only = E.aggregate(records, attempts_successes_only=True)[0]
    assert only["mean_attempts"] == 2.5
    table = E.format_table(E.aggregate(records))
    assert "p,3,66.67,3.33" in table


def test_average_row_is_mean_over_protocols():
    records = [E.TrialRecord("a", 0, success=True, attempts=1)] + [
        E.TrialRecord("b", i, success=i == 0, attempts=4) for i in range(4)
    ]
    rows = E.aggregate(records)
    assert [r["protocol"] for r in rows] == ["a", "b", "average"]
    assert rows[-1]["success_rate_pct"] == pytest.approx((100 + 25) / 2)
    assert rows[-1]["mean_attempts"] == pytest.approx(2.5)
    with pytest.raises(ValueError):
        E.aggregate([])


def test_protocol_names_and_defaults():
    assert E.protocol("random30_hard").hard
    assert E.protocol("random15").n_objects == 15
    occ = E.protocol("occluded(0.3,0.6)")
    assert occ.occlusion_bin == (0.3, 0.6) and occ.max_attempts == 10
    ch = E.protocol("challenging(4)")
    assert ch.layout_id == 4 and ch.n_trials == 30
    for bad in ("random99", "occluded(0.6,0.3)", "challenging(7)"):
        with pytest.raises(ValueError):
            E.protocol(bad)


def test_protocol_file(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps([{"name": "random15", "n_trials": 3, "fail_limit": 2}]))
    (p,) = E.load_protocols(path)
    assert (p.n_trials, p.consecutive_fail_limit) == (3, 2)
    path.write_text(json.dumps({"name": "random15", "colour": 1}))
    with pytest.raises(ValueError):
        E.load_protocols(path)


@pytest.mark.parametrize("lo,hi", [(0.0, 0.3), (0.3, 0.6), (0.6, 0.9)])
def test_occluded_cases_fall_in_their_bin(lo, hi):
    proto = E.protocol(f"occluded({lo},{hi})", workspace=48, n_objects=20)
    for seed in range(5):
        scene, target = E.generate_case(proto, seed)
        assert lo <= occluded_rate(scene, target) < hi


def test_impossible_bin_raises(monkeypatch):
    monkeypatch.setattr(E, "OCCLUSION_REJECTION_CAP", 3)
    proto = E.protocol("occluded(0.99,1.0)", workspace=48, n_objects=2)
    with pytest.raises(E.GenerationError):
        E.generate_case(proto, 0)


def test_random_hard_picks_most_occluded():
    proto = E.protocol("random30_hard", workspace=48)
    scene, target = E.generate_case(proto, 7)
    assert occluded_rate(scene, target) == max(occluded_rate(scene, i) for i in scene.ids)


def test_challenging_cases_are_deterministic_and_jittered():
    proto = E.protocol("challenging(2)")
    a, ta = E.generate_case(proto, 11)
    b, tb = E.generate_case(proto, 11)
    c, _ = E.generate_case(proto, 12)
    assert ta == tb
    assert a.to_dict() == b.to_dict()
    assert a.to_dict() != c.to_dict()
    base, _ = E.load_layout(2)
    for (_, p), (_, q) in zip(base.objects, a.objects):
        assert abs(p.x - q.x) <= 0.5 and abs(p.y - q.y) <= 0.5


@pytest.mark.parametrize("k", range(1, 7))
def test_layout_targets_start_occluded(k):
    scene, target = E.load_layout(k)
    assert target in scene.ids
    assert occluded_rate(scene, target) >= 0.4


def test_stub_grasp_succeeds_on_first_attempt():
    scene = lone_square()
    policy = Scripted([MotionPrimitive("grasp", 16, 16, 0)])
    rec = E.run_trial(scene, 0, policy, E.protocol("random15"))
    assert rec.success and rec.attempts == 1
    assert rec.motions[0]["outcome"] == "target" and rec.motions[0]["reward"] == 1.0


def test_attempt_cap_and_zero_streak():
    scene = lone_square()
    miss = MotionPrimitive("grasp", 2, 2, 0)
    rec = E.run_trial(scene, 0, Scripted([miss]), E.protocol("random15", max_attempts=8, consecutive_fail_limit=3))
    assert not rec.success and rec.attempts == 3
    on_mask = MotionPrimitive("grasp", 16, 14, 0)  # off-centre, a finger lands on the square
    rec = E.run_trial(scene, 0, Scripted([on_mask]), E.protocol("random15", max_attempts=4))
    assert not rec.success and rec.attempts == 4
    assert all(m["reward"] == 0.25 for m in rec.motions)


def test_trial_records_serialize():
    rec = E.TrialRecord("random15", 3, [{"kind": "push", "reward": 0.0}], False, 1)
    assert json.loads(rec.to_json())["motions"][0]["kind"] == "push"


@pytest.fixture(scope="module")
def snapshot():
    trainer = Trainer(compressed(workspace=32, n_targets=2))
    for _ in range(3):
        trainer.step()
    return trainer.snapshot()


def test_evaluation_respects_caps_and_leaves_weights_alone(snapshot):
    before = snapshot.checksum()
    protos = [E.protocol("random15", n_trials=3, workspace=32, n_objects=6)]
    records = E.evaluate(snapshot, protos)
    again = E.evaluate(snapshot, protos, use_coordinator=False)
    assert snapshot.checksum() == before
    assert len(records) == len(again) == 3
    for rec in records + again:
        assert 1 <= rec.attempts <= protos[0].max_attempts
    assert [r.to_json() for r in records] == [r.to_json() for r in E.evaluate(snapshot, protos)]
