"""Run configuration: every tunable constant in one validated, JSON-loadable place."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 42
    workspace: int = 64

    # curriculum: stage starts, target/obstacle counts
    stage_bounds: tuple[int, int, int] = (1000, 3000, 5000)
    n_targets: int = 7
    m_start: int = 3
    m_ramp_end: int = 8
    m_stage3: int = 13
    m_stage4: int = 18

    # rewards
    reward_grasp_target: float = 1.0
    reward_grasp_on_mask: float = 0.25
    reward_push_value: float = 1.0
    reward_push_occlusion: float = 0.5
    occlusion_drop: float = 0.1
    beta: float = 0.95
    gamma: float = 0.5
    t_g_init: float = 0.25

    # exploration
    eps_start: float = 0.5
    eps_end: float = 0.1
    eps_decay: float = 0.998

    # optimization
    lr: float = 1e-3
    head_init_scale: float = 0.01
    coord_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    replay_cap: int = 500
    replay_per_iter: int = 4
    coord_buffer_cap: int = 1000
    coord_batch: int = 16
    decision_threshold: float = 0.5

    # bookkeeping
    train_trial_cap: int = 10
    checkpoint_every: int = 500
    metrics_every: int = 100

    # switches
    border_any_overlap: bool = False
    attempts_successes_only: bool = False
    explore_location: str = "target_mask"  # "argmax": exploratory actions keep the best cell
    explore_under_coordinator: bool = True
    grasp_within_mask: bool = False  # grasp argmax only over the target's amodal mask
    coord_labels: str = "argmax"  # "all": exploratory off-argmax grasps also label the coordinator
    fc_reset: str = "trial"  # "trial": reset on trial end or success; "push": pushes reset too

    # evaluation
    eval_seed_base: int = 1000

    def __post_init__(self) -> None:
        object.__setattr__(self, "stage_bounds", tuple(int(b) for b in self.stage_bounds))
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")
        need(self.workspace >= 16 and self.workspace % 4 == 0, "workspace must be >= 16 and a multiple of 4")
        b = self.stage_bounds
        need(len(b) == 3 and 0 < b[0] < b[1] < b[2], "stage_bounds must be three increasing positive integers")
        need(self.n_targets >= 1, "n_targets must be >= 1")
        for name in ("m_start", "m_ramp_end", "m_stage3", "m_stage4"):
            need(getattr(self, name) >= 0, f"{name} must be >= 0")
        for name in ("reward_grasp_target", "reward_grasp_on_mask", "reward_push_value", "reward_push_occlusion"):
            need(0.0 <= getattr(self, name) <= 1.0, f"{name} must lie in [0, 1]")
        need(0.0 < self.occlusion_drop <= 1.0, "occlusion_drop must lie in (0, 1]")
        need(0.0 <= self.beta < 1.0, "beta must lie in [0, 1)")
        need(0.0 <= self.gamma < 1.0, "gamma must lie in [0, 1)")
        need(0.0 <= self.eps_end <= self.eps_start <= 1.0, "need 0 <= eps_end <= eps_start <= 1")
        need(0.0 < self.eps_decay <= 1.0, "eps_decay must lie in (0, 1]")
        need(0.0 < self.lr < 1.0 and 0.0 < self.coord_lr < 1.0, "learning rates must lie in (0, 1)")
        need(0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0, "adam betas must lie in [0, 1)")
        need(self.adam_eps > 0, "adam_eps must be positive")
        need(self.head_init_scale >= 0.0, "head_init_scale must be >= 0")
        need(self.replay_cap >= 1 and self.replay_per_iter >= 0, "bad replay settings")
        need(self.coord_buffer_cap >= 1 and self.coord_batch >= 1, "bad coordinator buffer settings")
        need(0.0 < self.decision_threshold < 1.0, "decision_threshold must lie in (0, 1)")
        need(self.train_trial_cap >= 1, "train_trial_cap must be >= 1")
        need(self.checkpoint_every >= 1 and self.metrics_every >= 1, "intervals must be >= 1")
        need(self.fc_reset in ("trial", "push"), "fc_reset must be 'trial' or 'push'")
        need(self.explore_location in ("argmax", "target_mask"), "explore_location must be 'argmax' or 'target_mask'")
        need(self.coord_labels in ("argmax", "all"), "coord_labels must be 'argmax' or 'all'")

    @classmethod
    def from_dict(cls, data: dict) -> Config:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> Config:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_bounds"] = list(self.stage_bounds)
        return d


def compressed(**overrides) -> Config:
    """Desk-scale curriculum: stages start at 300/900/1500 on a 48x48 workspace."""
    base = dict(workspace=48, stage_bounds=(300, 900, 1500))
    base.update(overrides)
    return Config(**base)
