"""Offline DQN training: replay buffer, TD updates against a frozen target
network, reward-density bookkeeping and policy evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from typing import Optional, Sequence

import numpy as np

from .agent import (RewardMode, StateNorms, encode_state, policy_rollout,
                    reference_policy, reward, select_action, state_dim)
from .env import ACTIONS, EnvParams, MergeEnv, MergeInstance, Outcome
from .qnet import DUELING, MomentumSGD, PLAIN, QNetwork


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; training aborts with diagnostics."""


@dataclass
class TrainConfig:
    variant: str = DUELING
    reward_mode: RewardMode = RewardMode.POSITIVE
    seed: int = 0
    learning_rate: float = 1e-3
    momentum: float = 0.9
    # The textbook 0.99 makes loitering beat finishing under this shaped
    # reward; a short horizon keeps the merge itself the optimum.
    gamma: float = 0.45
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_sync: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 15_000
    total_steps: int = 200_000
    min_replay: int = 1_000
    train_every: int = 1
    hidden: tuple[int, int] = (128, 128)
    # replay warm-start from the hand-written reference controller; these
    # transitions never count toward steps, histograms or outcome tallies
    demo_prefill_steps: int = 10_000

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        for eps in (self.eps_start, self.eps_end):
            if not 0.0 <= eps <= 1.0:
                raise ValueError("epsilon must be in [0, 1]")
        if isinstance(self.reward_mode, str):
            self.reward_mode = RewardMode(self.reward_mode)
        if self.variant not in (PLAIN, DUELING):
            raise ValueError(f"unknown variant '{self.variant}'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reward_mode"] = self.reward_mode.value
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["hidden"] = tuple(d.get("hidden", (128, 128)))
        return cls(**d)


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, dim))
        self.dones = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, s, a: int, r: float, s2, done: bool) -> None:
        i = self._next
        self.states[i] = s
        self.actions[i] = a
        self.rewards[i] = r
        self.next_states[i] = s2
        self.dones[i] = 1.0 if done else 0.0
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        idx = rng.integers(0, self._size, size=batch_size)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.dones[idx])


def td_targets(target_net: QNetwork, rewards: np.ndarray,
               next_states: np.ndarray, dones: np.ndarray,
               gamma: float) -> np.ndarray:
    q_next, _ = target_net.forward(next_states)
    return rewards + gamma * q_next.max(axis=1) * (1.0 - dones)


def train_step(net: QNetwork, target_net: QNetwork, optimizer: MomentumSGD,
               batch, gamma: float) -> float:
    """One MSE TD step on a sampled batch; returns the scalar loss."""
    states, actions, rewards, next_states, dones = batch
    n = len(actions)
    if n == 0:
        raise ValueError("empty batch")
    y = td_targets(target_net, rewards, next_states, dones, gamma)
    q, cache = net.forward(states)
    picked = q[np.arange(n), actions]
    err = picked - y
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise TrainingDiverged(f"loss became {loss}")
    dq = np.zeros_like(q)
    dq[np.arange(n), actions] = 2.0 * err / n
    optimizer.step(net.backward(cache, dq))
    return loss


@dataclass
class RewardHistogram:
    """50 uniform bins over the reward mode's range; terminal-step rewards
    are kept in their own bins so the success spike is visible."""

    mode: RewardMode
    bins: int = 50
    nonterminal: np.ndarray = field(default=None)
    terminal: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.nonterminal is None:
            self.nonterminal = np.zeros(self.bins, dtype=np.int64)
        if self.terminal is None:
            self.terminal = np.zeros(self.bins, dtype=np.int64)

    @property
    def low(self) -> float:
        return 0.0 if self.mode is RewardMode.POSITIVE else -1.0

    def record(self, r: float, terminal: bool) -> None:
        frac = (r - self.low)  # both ranges have width 1
        idx = min(self.bins - 1, max(0, int(frac * self.bins)))
        (self.terminal if terminal else self.nonterminal)[idx] += 1

    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.low + 1.0, self.bins + 1)

    def to_csv(self, path: str) -> None:
        edges = self.edges()
        with open(path, "w") as fh:
            fh.write("bin_low,bin_high,nonterminal_count,terminal_count\n")
            for i in range(self.bins):
                fh.write(f"{edges[i]:.6f},{edges[i + 1]:.6f},"
                         f"{self.nonterminal[i]},{self.terminal[i]}\n")


@dataclass
class TrainResult:
    net: QNetwork
    config: TrainConfig
    histogram: RewardHistogram
    loss_curve: list[tuple[int, float]]
    episode_outcomes: list[Outcome]
    terminal_success_count: int
    env_steps: int
    eval_curve: list[tuple[int, float]] = field(default_factory=list)
    wall_seconds: float = 0.0

    @property
    def success_rate(self) -> float:
        if not self.episode_outcomes:
            return 0.0
        wins = sum(1 for o in self.episode_outcomes if o is Outcome.SUCCESS)
        return wins / len(self.episode_outcomes)


def _epsilon(cfg: TrainConfig, step: int) -> float:
    if step >= cfg.eps_decay_steps:
        return cfg.eps_end
    frac = step / cfg.eps_decay_steps
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


def train(instances: Sequence[MergeInstance], config: TrainConfig,
          env_params: EnvParams = EnvParams(),
          norms: StateNorms = StateNorms(),
          eval_instances: Optional[Sequence[MergeInstance]] = None,
          eval_every: int = 0,
          stop_at_success_rate: Optional[float] = None) -> TrainResult:
    """Train a Q-network over merge instances; deterministic per seed.

    When ``eval_instances`` and ``eval_every`` are set, the greedy policy is
    scored on them periodically and training stops early once
    ``stop_at_success_rate`` is reached.
    """
    if not instances:
        raise ValueError("no training instances")
    rng = np.random.default_rng(config.seed)
    dim = state_dim(norms)
    dims = (dim, *config.hidden)
    net = QNetwork(config.variant, dims, rng=rng)
    target = net.clone()
    optimizer = MomentumSGD(net, config.learning_rate, config.momentum)
    buffer = ReplayBuffer(config.replay_capacity, dim)
    histogram = RewardHistogram(config.reward_mode)
    result = TrainResult(net=net, config=config, histogram=histogram,
                         loss_curve=[], episode_outcomes=[],
                         terminal_success_count=0, env_steps=0)
    t0 = time.monotonic()
    _prefill_from_reference(buffer, instances, config, env_params, norms, rng)
    step = 0
    while step < config.total_steps:
        instance = instances[int(rng.integers(0, len(instances)))]
        env = MergeEnv(instance, params=env_params)
        state = env.reset()
        vec = encode_state(state.merging, state.preceding, state.following,
                           norms)
        while not state.done and step < config.total_steps:
            action_idx = select_action(net, vec, _epsilon(config, step), rng)
            state = env.step(state, ACTIONS[action_idx])
            r = reward(state, config.reward_mode)
            vec2 = encode_state(state.merging, state.preceding,
                                state.following, norms)
            buffer.add(vec, action_idx, r, vec2, state.done)
            histogram.record(r, state.done)
            if state.done and state.outcome is Outcome.SUCCESS:
                result.terminal_success_count += 1
            vec = vec2
            step += 1
            if len(buffer) >= config.min_replay and \
                    step % config.train_every == 0:
                loss = train_step(net, target, optimizer,
                                  buffer.sample(config.batch_size, rng),
                                  config.gamma)
                if step % 500 == 0:
                    result.loss_curve.append((step, loss))
            if step % config.target_sync == 0:
                target.copy_from(net)
            if eval_every and step % eval_every == 0 and eval_instances:
                score = evaluate(net, eval_instances, env_params, norms,
                                 config.reward_mode).success_rate
                result.eval_curve.append((step, score))
                if stop_at_success_rate is not None and \
                        score >= stop_at_success_rate:
                    result.env_steps = step
                    result.wall_seconds = time.monotonic() - t0
                    return result
        result.episode_outcomes.append(state.outcome)
    result.env_steps = step
    result.wall_seconds = time.monotonic() - t0
    return result


def _prefill_from_reference(buffer: ReplayBuffer,
                            instances: Sequence[MergeInstance],
                            config: TrainConfig, env_params: EnvParams,
                            norms: StateNorms,
                            rng: np.random.Generator) -> None:
    added = 0
    while added < config.demo_prefill_steps:
        instance = instances[int(rng.integers(0, len(instances)))]
        env = MergeEnv(instance, params=env_params)
        state = env.reset()
        vec = encode_state(state.merging, state.preceding, state.following,
                           norms)
        while not state.done and added < config.demo_prefill_steps:
            action = reference_policy(state, env_params)
            state = env.step(state, action)
            vec2 = encode_state(state.merging, state.preceding,
                                state.following, norms)
            buffer.add(vec, action.value, reward(state, config.reward_mode),
                       vec2, state.done)
            vec = vec2
            added += 1


@dataclass
class EvalResult:
    success_rate: float
    mean_reward: float
    outcomes: dict[str, int]
    mean_steps: float


def evaluate(net: QNetwork, instances: Sequence[MergeInstance],
             env_params: EnvParams = EnvParams(),
             norms: StateNorms = StateNorms(),
             mode: RewardMode = RewardMode.POSITIVE) -> EvalResult:
    """Greedy-policy scoring over held-out instances."""
    outcomes: dict[str, int] = {}
    rewards: list[float] = []
    wins = 0
    steps = 0
    for inst in instances:
        ro = policy_rollout(net, inst, params=env_params, norms=norms,
                            mode=mode)
        outcomes[ro.outcome.value] = outcomes.get(ro.outcome.value, 0) + 1
        rewards.extend(ro.rewards)
        steps += len(ro.actions)
        if ro.outcome is Outcome.SUCCESS:
            wins += 1
    n = max(1, len(instances))
    return EvalResult(success_rate=wins / n,
                      mean_reward=float(np.mean(rewards)) if rewards else 0.0,
                      outcomes=outcomes, mean_steps=steps / n)
