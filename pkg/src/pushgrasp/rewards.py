"""Grasp and push rewards, and the adaptive grasp-value threshold used for pushes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import GraspOutcome

GRASP_TARGET_REWARD = 1.0
GRASP_ON_MASK_REWARD = 0.25
PUSH_VALUE_REWARD = 1.0
PUSH_OCCLUSION_REWARD = 0.5
OCCLUSION_DROP = 0.1
BETA = 0.95
T_G_INIT = 0.25

REWARD_VALUES = frozenset({0.0, GRASP_ON_MASK_REWARD, PUSH_OCCLUSION_REWARD, 1.0})

# Occluded rates are ratios of cell counts; a drop of exactly OCCLUSION_DROP
# must count even after float rounding (0.5 - 0.4 < 0.1 in binary).
_DROP_SLACK = 1e-12


@dataclass(frozen=True)
class ThresholdState:
    t_g: float = T_G_INIT
    beta: float = BETA


def grasp_reward(outcome: GraspOutcome, grasp_xy: tuple[int, int], amodal_mask: np.ndarray) -> float:
    """``amodal_mask`` must come from the state before the grasp."""
    if outcome.target_was_grasped:
        return GRASP_TARGET_REWARD
    x, y = grasp_xy
    h, w = amodal_mask.shape
    if 0 <= x < w and 0 <= y < h and amodal_mask[y, x]:
        return GRASP_ON_MASK_REWARD
    return 0.0


def update_threshold(state: ThresholdState, q_g_next: float) -> ThresholdState:
    if not np.isfinite(q_g_next):
        raise ValueError("grasp value must be finite")
    return ThresholdState(t_g=state.beta * state.t_g + (1.0 - state.beta) * float(q_g_next), beta=state.beta)


def push_reward(
    o_before: float,
    o_after: float,
    q_g_next: float,
    state: ThresholdState,
    drop: float = OCCLUSION_DROP,
) -> float:
    """Evaluate against the threshold *before* this push's update."""
    if q_g_next > state.t_g:
        return PUSH_VALUE_REWARD
    if o_before - o_after >= drop - _DROP_SLACK:
        return PUSH_OCCLUSION_REWARD
    return 0.0
