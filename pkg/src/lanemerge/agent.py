"""Policy-side glue: state encoding, reward shaping, action selection and
greedy rollouts through the merge environment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .env import (Action, ACTIONS, EnvParams, EnvState, LaneGeometry,
                  MergeEnv, MergeInstance, merge_point, Outcome)
from .qnet import QNetwork
from .types import RoadUserDescription, Waypoint


@dataclass(frozen=True)
class StateNorms:
    """Scales that bring each feature into roughly [-1, 1]."""

    position: float = 100.0
    speed: float = 30.0
    acceleration: float = 4.0
    size: float = 15.0          # for the length*width footprint scalar
    dimension: float = 10.0     # for raw length/width when split_size is on
    split_size: bool = False


def state_dim(norms: StateNorms = StateNorms()) -> int:
    return 24 if norms.split_size else 21


def _vehicle_features(r: RoadUserDescription, ox: float, oy: float,
                      norms: StateNorms) -> list[float]:
    feats = [
        (r.x - ox) / norms.position,
        (r.y - oy) / norms.position,
        r.speed / norms.speed,
        r.acceleration / norms.acceleration,
        math.cos(r.heading),
        math.sin(r.heading),
    ]
    if norms.split_size:
        feats += [r.length / norms.dimension, r.width / norms.dimension]
    else:
        feats.append((r.length * r.width) / norms.size)
    return feats


def encode_state(merging: RoadUserDescription,
                 preceding: RoadUserDescription,
                 following: RoadUserDescription,
                 norms: StateNorms = StateNorms()) -> np.ndarray:
    """Fixed-order feature vector; positions are relative to the merging
    vehicle so its own slots start at (0, 0)."""
    if len({merging.uuid, preceding.uuid, following.uuid}) != 3:
        raise ValueError("the three road users must be distinct")
    feats: list[float] = []
    for r in (merging, preceding, following):
        feats.extend(_vehicle_features(r, merging.x, merging.y, norms))
    vec = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise ValueError("non-finite feature in state encoding")
    return vec


class RewardMode(Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"


REWARD_WEIGHTS = (0.6, 0.2, 0.2)


def reward(state: EnvState, mode: RewardMode) -> float:
    """Shaped merge reward.

    Positive mode combines inverse distance to the merging point, inverse
    speed mismatch with the gap and inverse acceleration magnitude; a
    successful terminal state is worth exactly 1. Negative mode is the same
    value shifted down by 1, so success is worth exactly 0.
    """
    if state.outcome is Outcome.SUCCESS:
        pos = 1.0
    else:
        try:
            mp = merge_point(state.preceding, state.following, state.geometry)
            d = math.hypot(state.merging.x - mp[0], state.merging.y - mp[1])
        except ValueError:           # gap collapsed; no merging point exists
            d = math.inf
        v_gap = (state.preceding.speed + state.following.speed) / 2.0
        w1, w2, w3 = REWARD_WEIGHTS
        pos = (w1 / (1.0 + d)
               + w2 / (1.0 + abs(state.merging.speed - v_gap))
               + w3 / (1.0 + abs(state.merging.acceleration)))
    return pos if mode is RewardMode.POSITIVE else pos - 1.0


def select_action(net: QNetwork, state_vec: np.ndarray, epsilon: float,
                  rng: np.random.Generator) -> int:
    """Epsilon-greedy; exploitation breaks ties toward the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(0, net.n_actions))
    return int(np.argmax(net.q_values(state_vec)))


def reference_policy(state: EnvState, params: EnvParams) -> Action:
    """Hand-written gap-seeking controller over the discrete action set.

    Closes on the merging point at a bounded closing speed, then steers into
    the lane once longitudinally aligned and the gap is wide enough to hold
    the safety distance on both sides. Used to seed the replay buffer and as
    a competence yardstick in tests.
    """
    m, p, f = state.merging, state.preceding, state.following
    geo = state.geometry
    try:
        mp = merge_point(p, f, geo)
    except ValueError:
        return Action.DECELERATE
    dx = mp[0] - m.x
    v_gap = (p.speed + f.speed) / 2.0
    dev = m.heading if m.heading < math.pi else m.heading - 2.0 * math.pi

    v_target = v_gap + min(4.0, max(-4.0, 0.3 * dx))
    want_a = min(params.a_max, max(params.a_min, 2.0 * (v_target - m.speed)))
    da = want_a - m.acceleration

    gap = (p.x - p.length / 2.0) - (f.x + f.length / 2.0)
    viable = gap >= 2.0 * params.d_safe + m.length + 0.5
    aligned = abs(dx) < 3.0 and abs(m.speed - v_gap) < 2.0
    lat = m.y - geo.target_lane_y
    if aligned and viable and lat > 0.05:
        want_dev = -min(params.max_heading_dev,
                        3.5 * lat / max(m.speed, 3.0))
        if dev > want_dev + params.turn_step / 2.0:
            return Action.TURN_LEFT
        if dev < want_dev - params.turn_step / 2.0:
            return Action.TURN_RIGHT
    elif lat <= 0.05 and abs(dev) > 1e-9:
        return Action.TURN_RIGHT if dev < 0.0 else Action.TURN_LEFT
    if da > 0.5:
        return Action.ACCELERATE
    if da < -0.5:
        return Action.DECELERATE
    return Action.DO_NOTHING


@dataclass
class RolloutResult:
    waypoints: list[Waypoint]
    outcome: Outcome
    states: list[EnvState]
    actions: list[Action]
    rewards: list[float]


def policy_rollout(net: QNetwork, instance: MergeInstance,
                   params: EnvParams = EnvParams(),
                   norms: StateNorms = StateNorms(),
                   geometry: Optional[LaneGeometry] = None,
                   mode: RewardMode = RewardMode.POSITIVE) -> RolloutResult:
    """Greedy (epsilon = 0) rollout; one waypoint per environment step,
    carrying the merging vehicle's state."""
    env = MergeEnv(instance, params=params, geometry=geometry)
    state = env.reset()
    result = RolloutResult([], state.outcome, [state], [], [])
    while not state.done:
        vec = encode_state(state.merging, state.preceding, state.following,
                           norms)
        action = ACTIONS[int(np.argmax(net.q_values(vec)))]
        state = env.step(state, action)
        m = state.merging
        result.waypoints.append(Waypoint(
            timestamp=m.timestamp, position=m.position, speed=m.speed,
            acceleration=m.acceleration))
        result.states.append(state)
        result.actions.append(action)
        result.rewards.append(reward(state, mode))
    result.outcome = state.outcome
    return result
