"""Curriculum training loop: TD learning of the Q-maps plus online coordinator updates."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, read_records, write_records
from .config import Config
from .coordinator import Coordinator, CoordinatorFeatures, LabeledDecision, decide
from .perception import HeightmapStack, most_occluded_target, occluded_rate, occlusion_report, render
from .qnet import BestAction, QMaps, QNet, best_action, best_actions
from .rewards import ThresholdState, grasp_reward, push_reward, update_threshold
from .sim import N_ROTATIONS, MotionPrimitive, Scene, apply_grasp, apply_push, empty_scene, spawn_random

RANDOM, MOST_OCCLUDED = "random", "most_occluded"
EPSILON_GREEDY, COORDINATOR = "epsilon_greedy", "coordinator"
ARGMAX, TARGET_MASK = "argmax", "target_mask"


@dataclass(frozen=True)
class CurriculumStage:
    index: int
    start: int
    end: int | None
    n_targets: int
    m_obstacles: int
    target_rule: str
    controller: str


def curriculum_stage(iteration: int, config: Config = Config()) -> CurriculumStage:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    b0, b1, b2 = config.stage_bounds
    n = config.n_targets
    if iteration < b0:
        return CurriculumStage(0, 0, b0, n, config.m_start, RANDOM, EPSILON_GREEDY)
    if iteration < b1:
        frac = (iteration - b0) / (b1 - b0)
        m = int(math.floor(config.m_start + (config.m_ramp_end - config.m_start) * frac + 0.5))
        return CurriculumStage(1, b0, b1, n, m, RANDOM, COORDINATOR)
    if iteration < b2:
        return CurriculumStage(2, b1, b2, n, config.m_stage3, MOST_OCCLUDED, COORDINATOR)
    return CurriculumStage(3, b2, None, n, config.m_stage4, MOST_OCCLUDED, COORDINATOR)


# -- shared decision machinery (also used by evaluation) -------------------


@dataclass
class Observation:
    state: HeightmapStack
    inputs: np.ndarray
    qmaps: QMaps
    best_push: BestAction
    best_grasp: BestAction
    features: CoordinatorFeatures

    def best(self, kind: str) -> BestAction:
        return self.best_push if kind == "push" else self.best_grasp


def observe(
    scene: Scene, target: int, qnet: QNet, f_c: int, border_any_overlap: bool = False, grasp_within_mask: bool = False
) -> Observation:
    """Render, run the Q-net and pick the best push and grasp.

    ``grasp_within_mask`` restricts the grasp argmax to the target's amodal mask.
    """
    state = render(scene, target)
    inputs = state.as_input()
    qmaps = qnet.forward_qmaps(inputs)
    bp, bg = best_actions(qmaps, state.amodal if grasp_within_mask else None)
    rep = occlusion_report(scene, target, border_any_overlap=border_any_overlap)
    feats = CoordinatorFeatures(bp.q_value, bg.q_value, rep.o, rep.a_b, rep.a_n, float(f_c))
    return Observation(state, inputs, qmaps, bp, bg, feats)


def greedy_kind(obs: Observation) -> str:
    return "grasp" if obs.best_grasp.q_value >= obs.best_push.q_value else "push"


def to_primitive(best: BestAction) -> MotionPrimitive:
    return MotionPrimitive(best.kind, best.x, best.y, best.rot_index)


@dataclass(frozen=True)
class ActionChoice:
    primitive: MotionPrimitive
    explored: bool


def choose_action(
    obs: Observation,
    controller: str,
    epsilon: float,
    rng: np.random.Generator,
    coord_p: float | None = None,
    threshold: float = 0.5,
    explore_location: str = ARGMAX,
    explore_under_coordinator: bool = False,
) -> ActionChoice:
    """Pick the primitive kind, then act at that kind's best cell and rotation.

    With probability ``epsilon`` (under the coordinator only when
    ``explore_under_coordinator``) the kind is drawn uniformly instead. The
    exploratory primitive sits at the kind's best cell (``ARGMAX``) or on a
    random cell of the target's amodal mask at a random rotation (``TARGET_MASK``).
    """
    if controller not in (EPSILON_GREEDY, COORDINATOR):
        raise ValueError(f"unknown controller {controller!r}")
    if explore_location not in (ARGMAX, TARGET_MASK):
        raise ValueError(f"unknown exploration location {explore_location!r}")
    may_explore = controller == EPSILON_GREEDY or explore_under_coordinator
    if may_explore and rng.random() < epsilon:
        kind = ("push", "grasp")[int(rng.integers(2))]
        ys, xs = np.nonzero(obs.state.amodal)
        if explore_location == TARGET_MASK and len(xs):
            i = int(rng.integers(len(xs)))
            rot = int(rng.integers(N_ROTATIONS))
            return ActionChoice(MotionPrimitive(kind, int(xs[i]), int(ys[i]), rot), True)
        return ActionChoice(to_primitive(obs.best(kind)), True)
    if controller == EPSILON_GREEDY:
        kind = greedy_kind(obs)
    else:
        if coord_p is None:
            raise ValueError("coordinator control needs a probability")
        kind = decide(coord_p, threshold)
    return ActionChoice(to_primitive(obs.best(kind)), False)


def select_action(
    obs: Observation,
    controller: str,
    epsilon: float,
    rng: np.random.Generator,
    coord_p: float | None = None,
    threshold: float = 0.5,
    explore_location: str = ARGMAX,
) -> MotionPrimitive:
    return choose_action(obs, controller, epsilon, rng, coord_p, threshold, explore_location).primitive


def td_target(reward: float, terminal: bool, next_max_q: float | None, gamma: float = 0.5) -> float:
    if terminal:
        return float(reward)
    if next_max_q is None:
        raise ValueError("a non-terminal transition needs the next state's max Q")
    return float(reward) + gamma * float(next_max_q)


# -- replay ---------------------------------------------------------------


@dataclass
class Transition:
    scene: Scene
    next_scene: Scene
    target: int
    kind: str
    rot: int
    x: int
    y: int
    reward: float
    terminal: bool
    _inputs: np.ndarray | None = field(default=None, repr=False)
    _next_inputs: np.ndarray | None = field(default=None, repr=False)

    def inputs(self) -> np.ndarray:
        if self._inputs is None:
            self._inputs = render(self.scene, self.target).as_input()
        return self._inputs

    def next_inputs(self) -> np.ndarray:
        if self._next_inputs is None:
            self._next_inputs = render(self.next_scene, self.target).as_input()
        return self._next_inputs

    def to_dict(self) -> dict:
        return {
            "scene": self.scene.to_dict(),
            "next_scene": None if self.terminal else self.next_scene.to_dict(),
            "target": self.target,
            "action": [self.kind, self.rot, self.x, self.y],
            "reward": self.reward,
            "terminal": self.terminal,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Transition:
        scene = Scene.from_dict(d["scene"])
        kind, rot, x, y = d["action"]
        nxt = scene if d["next_scene"] is None else Scene.from_dict(d["next_scene"])
        return cls(scene, nxt, int(d["target"]), kind, int(rot), int(x), int(y), float(d["reward"]), bool(d["terminal"]))


# -- trainer --------------------------------------------------------------

LOG_FIELDS = (
    "iter", "trial", "step", "kind", "rot", "x", "y", "reward", "t_g",
    "o_before", "o_after", "q_p", "q_g", "coord_p", "terminal",
)  # fmt: skip


class Trainer:
    """Owns every piece of mutable training state; one call to :meth:`step` is one iteration."""

    N_STREAMS = 5

    def __init__(self, config: Config = Config()):
        self.config = config
        streams = np.random.SeedSequence(config.seed).spawn(self.N_STREAMS)
        rng_init, self.rng_scene, self.rng_policy, self.rng_replay, self.rng_coord = (
            np.random.default_rng(s) for s in streams
        )
        self.qnet = QNet(rng_init, out_scale=config.head_init_scale)
        self.coordinator = Coordinator(rng_init, buffer_cap=config.coord_buffer_cap, batch_size=config.coord_batch)
        self.replay: deque[Transition] = deque(maxlen=config.replay_cap)
        self.threshold = ThresholdState(config.t_g_init, config.beta)
        self.iteration = 0
        self.epsilon = config.eps_start
        self.scene: Scene | None = None
        self.target: int | None = None
        self.candidates: list[int] = []
        self.stage_index: int | None = None
        self.trial = -1
        self.trial_step = 0
        self.f_c = 0
        self.trial_outcomes: list[tuple[bool, int]] = []
        self.losses: list[float] = []
        self.loss_after: list[float] = []
        self.on_trial_start: list[Callable[[int, Scene, int], None]] = []

    # -- episode management --------------------------------------------------

    def _respawn(self, stage: CurriculumStage) -> None:
        cfg = self.config
        seed = int(self.rng_scene.integers(2**63))
        scene = empty_scene(cfg.workspace, seed=seed)
        scene = spawn_random(scene, stage.n_targets + stage.m_obstacles, self.rng_scene)
        ids = scene.ids
        picks = self.rng_scene.permutation(len(ids))[: stage.n_targets]
        self.scene = scene
        self.candidates = sorted(ids[i] for i in picks)

    def _choose_target(self, stage: CurriculumStage) -> int:
        if stage.target_rule == MOST_OCCLUDED:
            return most_occluded_target(self.scene, self.candidates)
        return self.candidates[int(self.rng_scene.integers(len(self.candidates)))]

    def _start_trial(self, stage: CurriculumStage) -> None:
        if not self.candidates:
            self._respawn(stage)
        self.target = self._choose_target(stage)
        self.trial += 1
        self.trial_step = 0
        self.f_c = 0
        for hook in self.on_trial_start:
            hook(self.trial, self.scene, self.target)

    # -- learning ---------------------------------------------------------------

    def _td_update(self, executed: Transition, executed_next_max: float | None) -> tuple[float, float]:
        cfg = self.config
        batch = [(executed, executed_next_max)]
        if cfg.replay_per_iter and self.replay:
            for i in self.rng_replay.integers(0, len(self.replay), size=cfg.replay_per_iter):
                batch.append((self.replay[int(i)], None))
        params = self.qnet.params
        params.zero_grad()
        executed_loss = 0.0
        for n, (tr, next_max) in enumerate(batch):
            if not tr.terminal and next_max is None:
                next_max = self.qnet.forward_qmaps(tr.next_inputs()).max_value()
            y = td_target(tr.reward, tr.terminal, next_max, cfg.gamma)
            q, ctx = self.qnet.pixel_forward(tr.inputs(), tr.kind, tr.rot, tr.x, tr.y)
            delta = q - y
            if n == 0:
                executed_loss = float(T.huber_loss(delta))
                executed_y = y
            self.qnet.pixel_backward(ctx, float(T.huber_grad(delta)))
        for name, g in params.grads.items():
            T.check_finite(f"gradient {name}", g)
        T.adam_step(params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        q_after, _ = self.qnet.pixel_forward(executed.inputs(), executed.kind, executed.rot, executed.x, executed.y)
        return executed_loss, float(T.huber_loss(q_after - executed_y))

    def _next_best_grasp(self, scene: Scene, target: int) -> tuple[QMaps, np.ndarray, float]:
        state = render(scene, target)
        inputs = state.as_input()
        qmaps = self.qnet.forward_qmaps(inputs)
        mask = state.amodal if self.config.grasp_within_mask else None
        return qmaps, inputs, best_action(qmaps.grasp, "grasp", mask).q_value

    # -- one iteration ---------------------------------------------------------

    def step(self) -> dict:
        cfg = self.config
        stage = curriculum_stage(self.iteration, cfg)
        if stage.index != self.stage_index:
            # A stage change abandons the running trial and respawns.
            self.stage_index = stage.index
            self.candidates = []
            self._start_trial(stage)
        scene, target = self.scene, self.target
        obs = observe(scene, target, self.qnet, self.f_c, cfg.border_any_overlap, cfg.grasp_within_mask)
        coord_p = self.coordinator.predict(obs.features)
        choice = choose_action(
            obs, stage.controller, self.epsilon, self.rng_policy, coord_p, cfg.decision_threshold,
            cfg.explore_location, cfg.explore_under_coordinator,
        )  # fmt: skip
        primitive = choice.primitive
        at_best = primitive == to_primitive(obs.best(primitive.kind))
        o_before = obs.features.o
        t_g_used = self.threshold.t_g
        q_g_next = None
        next_qmaps = None
        grasped_id = None

        if primitive.kind == "push":
            next_scene, _ = apply_push(scene, primitive)
            terminal = False
            o_after = occluded_rate(next_scene, target)
            next_qmaps, next_inputs, q_g_next = self._next_best_grasp(next_scene, target)
            reward = push_reward(o_before, o_after, q_g_next, self.threshold, cfg.occlusion_drop)
            reward = cfg.reward_push_value if reward == 1.0 else cfg.reward_push_occlusion if reward > 0 else 0.0
            self.threshold = update_threshold(self.threshold, q_g_next)
        else:
            next_scene, outcome = apply_grasp(scene, primitive, target)
            grasped_id = outcome.grasped_id
            terminal = outcome.target_was_grasped
            reward = grasp_reward(outcome, (primitive.x, primitive.y), obs.state.amodal)
            if reward == 1.0:
                reward = cfg.reward_grasp_target
            elif reward > 0:
                reward = cfg.reward_grasp_on_mask
            if terminal:
                o_after = None
                next_inputs = None
            else:
                o_after = occluded_rate(next_scene, target)
                next_qmaps, next_inputs, q_g_next = self._next_best_grasp(next_scene, target)

        transition = Transition(
            scene, next_scene, target, primitive.kind, primitive.rot_index, primitive.x, primitive.y,
            reward, terminal, _inputs=obs.inputs, _next_inputs=next_inputs,
        )  # fmt: skip
        self.replay.append(transition)
        next_max = None if terminal else next_qmaps.max_value()
        loss, loss_after = self._td_update(transition, next_max)
        self.losses.append(loss)
        self.loss_after.append(loss_after)

        if primitive.kind == "grasp" and (at_best or cfg.coord_labels == "all"):
            self.coordinator.record_and_train(
                LabeledDecision(obs.features, int(terminal)), self.rng_coord, cfg.coord_lr
            )

        row = {
            "iter": self.iteration,
            "trial": self.trial,
            "step": self.trial_step,
            "kind": primitive.kind,
            "rot": primitive.rot_index,
            "x": primitive.x,
            "y": primitive.y,
            "reward": reward,
            "t_g": t_g_used,
            "o_before": o_before,
            "o_after": o_after,
            "q_p": obs.best_push.q_value,
            "q_g": obs.best_grasp.q_value,
            "coord_p": coord_p,
            "terminal": terminal,
            "explored": choice.explored,
            "target": target,
            "q_g_next": q_g_next,
            "stage": stage.index,
            "loss": loss,
            "loss_after": loss_after,
        }

        # bookkeeping
        self.scene = next_scene
        self.trial_step += 1
        if primitive.kind == "grasp" and not terminal:
            self.f_c += 1
        elif primitive.kind == "push" and cfg.fc_reset == "push":
            self.f_c = 0
        if grasped_id is not None and grasped_id in self.candidates:
            self.candidates.remove(grasped_id)
        if stage.controller == EPSILON_GREEDY or cfg.explore_under_coordinator:
            self.epsilon = max(cfg.eps_end, self.epsilon * cfg.eps_decay)
        self.iteration += 1
        if terminal or self.trial_step >= cfg.train_trial_cap:
            self.trial_outcomes.append((terminal, self.trial_step))
            next_stage = curriculum_stage(self.iteration, cfg)
            if next_stage.index == self.stage_index:
                self._start_trial(next_stage)
        return row

    # -- metrics --------------------------------------------------------------

    def metrics_row(self, window: int = 100) -> dict:
        recent = self.trial_outcomes[-window:]
        losses = self.losses[-window:]
        return {
            "iter": self.iteration,
            "rolling_success_100": float(np.mean([s for s, _ in recent])) if recent else float("nan"),
            "rolling_attempts_100": float(np.mean([a for _, a in recent])) if recent else float("nan"),
            "mean_loss": float(np.mean(losses)) if losses else float("nan"),
        }

    # -- checkpoints ----------------------------------------------------------

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(self.qnet.copy(), self.coordinator.copy(), self.threshold.t_g, self.config)

    def state_dict(self) -> tuple[dict[str, np.ndarray], dict]:
        tensors: dict[str, np.ndarray] = {}
        for prefix, store in (("qnet.", self.qnet.params), ("", self.coordinator.params)):
            for name in store.params:
                tensors[prefix + name] = store.params[name]
                tensors[f"opt.m.{prefix}{name}"] = store.m[name]
                tensors[f"opt.v.{prefix}{name}"] = store.v[name]
        meta = {
            "config": self.config.to_dict(),
            "iteration": self.iteration,
            "t_g": self.threshold.t_g,
            "beta": self.threshold.beta,
            "epsilon": self.epsilon,
            "adam_t": {"qnet": self.qnet.params.t, "coord": self.coordinator.params.t},
            "rng": {
                name: getattr(self, name).bit_generator.state
                for name in ("rng_scene", "rng_policy", "rng_replay", "rng_coord")
            },
            "scene": None if self.scene is None else self.scene.to_dict(),
            "target": self.target,
            "candidates": self.candidates,
            "stage_index": self.stage_index,
            "trial": self.trial,
            "trial_step": self.trial_step,
            "f_c": self.f_c,
            "trial_outcomes": [[bool(s), int(a)] for s, a in self.trial_outcomes],
            "losses": self.losses,
            "loss_after": self.loss_after,
            "replay": [tr.to_dict() for tr in self.replay],
            "coord_buffer": [list(d.features.as_array()) + [d.label] for d in self.coordinator.buffer],
        }
        return tensors, meta

    def save_checkpoint(self, path: str | Path) -> None:
        tensors, meta = self.state_dict()
        write_records(path, tensors, {"trainer": meta})

    @classmethod
    def load_checkpoint(cls, path: str | Path) -> Trainer:
        tensors, blobs = read_records(path)
        if "trainer" not in blobs:
            raise CheckpointError(f"{path}: not a training checkpoint")
        meta = blobs["trainer"]
        trainer = cls(Config.from_dict({**meta["config"], "stage_bounds": tuple(meta["config"]["stage_bounds"])}))
        _load_store(trainer.qnet.params, tensors, "qnet.", path)
        _load_store(trainer.coordinator.params, tensors, "", path)
        trainer.qnet.params.t = int(meta["adam_t"]["qnet"])
        trainer.coordinator.params.t = int(meta["adam_t"]["coord"])
        trainer.iteration = int(meta["iteration"])
        trainer.threshold = ThresholdState(float(meta["t_g"]), float(meta["beta"]))
        trainer.epsilon = float(meta["epsilon"])
        for name, state in meta["rng"].items():
            getattr(trainer, name).bit_generator.state = state
        trainer.scene = None if meta["scene"] is None else Scene.from_dict(meta["scene"])
        trainer.target = meta["target"]
        trainer.candidates = [int(c) for c in meta["candidates"]]
        trainer.stage_index = meta["stage_index"]
        trainer.trial = int(meta["trial"])
        trainer.trial_step = int(meta["trial_step"])
        trainer.f_c = int(meta["f_c"])
        trainer.trial_outcomes = [(bool(s), int(a)) for s, a in meta["trial_outcomes"]]
        trainer.losses = [float(v) for v in meta["losses"]]
        trainer.loss_after = [float(v) for v in meta["loss_after"]]
        trainer.replay.extend(Transition.from_dict(d) for d in meta["replay"])
        for row in meta["coord_buffer"]:
            trainer.coordinator.buffer.append(
                LabeledDecision(CoordinatorFeatures.from_array(row[:6]), int(row[6]))
            )
        return trainer


def _load_store(store: T.ParamStore, tensors: dict, prefix: str, path) -> None:
    for name in store.params:
        for key, dest in ((prefix + name, store.params), (f"opt.m.{prefix}{name}", store.m), (f"opt.v.{prefix}{name}", store.v)):
            if key not in tensors:
                raise CheckpointError(f"{path}: missing record {key}")
            if tensors[key].shape != dest[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {key}")
            dest[name] = tensors[key].copy()
        store.grads[name] = np.zeros_like(store.params[name])


# -- frozen policies for evaluation --------------------------------------------


@dataclass
class PolicySnapshot:
    qnet: QNet
    coordinator: Coordinator
    t_g: float
    config: Config

    def checksum(self) -> str:
        return self.qnet.params.checksum() + self.coordinator.params.checksum()

    @classmethod
    def load(cls, path: str | Path) -> PolicySnapshot:
        trainer = Trainer.load_checkpoint(path)
        return trainer.snapshot()
