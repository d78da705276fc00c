"""Flat tabular Q-learning baseline on the blocks environment.

The training loop consumes randomness in the same pattern as the HAM
runner (one sub-seed per episode reset, one epsilon-greedy call per step),
so a run of the standard machine under choice learning reproduces this
baseline action for action.
"""
from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence

from .blocks_env import ACTIONS, BlocksConfig, BlocksEpisode, ObservationKey
from .qlearn import epsilon_greedy, q_backup


@dataclass
class FlatQTable:
    """Q over (observation, action); missing entries read 0. The action
    set is parametric so the update rule can be exercised on synthetic
    MDPs, defaulting to the five blocks actions in tie-break order."""

    alpha: float
    gamma: float
    epsilon: float = 0.0
    actions: tuple = ACTIONS
    values: dict = field(default_factory=dict)

    def q(self, s: ObservationKey, a: Hashable) -> float:
        return self.values.get((s, a), 0.0)

    def best_value(self, s: ObservationKey) -> float:
        return max(self.values.get((s, a), 0.0) for a in self.actions)

    def greedy_action(self, s: ObservationKey):
        best = self.actions[0]
        best_v = self.q(s, best)
        for a in self.actions[1:]:
            v = self.q(s, a)
            if v > best_v:
                best, best_v = a, v
        return best


def q_update(table: FlatQTable, s: ObservationKey, a: Hashable, r: float,
             s_next: ObservationKey | None) -> None:
    """Plain MDP backup; s_next=None marks a terminal transition."""
    best = None if s_next is None else table.best_value(s_next)
    key = (s, a)
    table.values[key] = q_backup(
        table.values.get(key, 0.0), table.alpha, r, table.gamma, best)


@dataclass(frozen=True)
class EpisodeRecord:
    episode: int
    reward: float
    steps: int
    normalized: float


@dataclass
class LearningCurve:
    records: list[EpisodeRecord] = field(default_factory=list)

    def append(self, episode: int, reward: float, steps: int,
               normalized: float) -> None:
        self.records.append(EpisodeRecord(episode, reward, steps, normalized))

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.records]

    def max_reward(self) -> float:
        return max(self.rewards, default=0.0)

    def mean_reward(self) -> float:
        if not self.records:
            return 0.0
        return sum(self.rewards) / len(self.records)

    def mean_normalized(self) -> float:
        if not self.records:
            return 0.0
        return sum(r.normalized for r in self.records) / len(self.records)

    def with_normalizer(self, scale: float) -> "LearningCurve":
        """Same rewards with the normalized column recomputed against scale
        (zeros when scale is not positive)."""
        curve = LearningCurve()
        for rec in self.records:
            curve.append(rec.episode, rec.reward, rec.steps,
                         rec.reward / scale if scale > 0 else 0.0)
        return curve

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "reward", "steps", "normalized"])
            for rec in self.records:
                writer.writerow([rec.episode, repr(rec.reward), rec.steps,
                                 repr(rec.normalized)])


def read_curve_csv(path: str | Path) -> LearningCurve:
    curve = LearningCurve()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            curve.append(int(row["episode"]), float(row["reward"]),
                         int(row["steps"]), float(row["normalized"]))
    return curve


def episode_epsilon(epsilon: float, episode: int, episodes: int,
                    decay: bool) -> float:
    """Constant by default; the optional schedule decays linearly to 0."""
    if not decay:
        return epsilon
    return epsilon * (episodes - episode) / episodes


def train(config: BlocksConfig, episodes: int, alpha: float, gamma: float,
          epsilon: float, seed: int, *, epsilon_decay: bool = False,
          normalizer: float | None = None,
          step_log: list | None = None) -> tuple[FlatQTable, LearningCurve]:
    """Epsilon-greedy Q-learning; the curve is fully determined by the seed.

    The normalized column is reward / normalizer; when no normalizer is
    given the run's own best episode reward is used (0 when the run never
    earns a positive reward).
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    table = FlatQTable(alpha=alpha, gamma=gamma, epsilon=epsilon)
    rng = random.Random(seed)
    curve = LearningCurve()
    totals: list[tuple[float, int]] = []
    for ep in range(episodes):
        eps = episode_epsilon(epsilon, ep, episodes, epsilon_decay)
        session = BlocksEpisode(config, rng.getrandbits(32))
        total = 0.0
        steps = 0
        while not session.done:
            s = session.observation()
            a = epsilon_greedy(rng, eps, table.actions,
                               lambda act: table.q(s, act))
            outcome = session.step(a)
            s_next = None if outcome.done else session.observation()
            q_update(table, s, a, outcome.reward, s_next)
            total += outcome.reward
            steps += 1
        totals.append((total, steps))
        if step_log is not None:
            step_log.extend(session.actions_taken)
    scale = normalizer if normalizer is not None else max(
        (t for t, _ in totals if t > 0), default=0.0)
    for ep, (total, steps) in enumerate(totals):
        curve.append(ep, total, steps, total / scale if scale > 0 else 0.0)
    return table, curve


def greedy_rollout(table: FlatQTable, config: BlocksConfig,
                   seed: int) -> tuple[float, int]:
    """One greedy episode under a frozen table; returns (reward, steps)."""
    session = BlocksEpisode(config, seed)
    total = 0.0
    steps = 0
    while not session.done:
        outcome = session.step(table.greedy_action(session.observation()))
        total += outcome.reward
        steps += 1
    return total, steps
