"""Shared tabular Q-learning primitives.

The flat learner and the HAM choice learner must consume randomness in the
same pattern and apply the same floating-point expression so their runs can
be compared step for step. Both route through the helpers here.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

T = TypeVar("T")


@dataclass(frozen=True)
class Hyper:
    """Learning hyperparameters shared by the flat and HAM learners."""

    alpha: float = 0.1
    gamma: float = 0.99
    epsilon: float = 0.1


def epsilon_greedy(rng: random.Random, epsilon: float,
                   candidates: Sequence[T],
                   value: Callable[[T], float]) -> T:
    """Pick a candidate epsilon-greedily.

    Draw pattern is fixed: one random() per call, plus one randrange on the
    explore branch. Greedy ties break toward the earliest candidate.
    """
    if not candidates:
        raise ValueError("epsilon_greedy needs at least one candidate")
    if rng.random() < epsilon:
        return candidates[rng.randrange(len(candidates))]
    best = candidates[0]
    best_value = value(best)
    for cand in candidates[1:]:
        v = value(cand)
        if v > best_value:
            best, best_value = cand, v
    return best


def q_backup(old: float, alpha: float, reward: float, gamma: float,
             best_next: float | None, tau: int = 1) -> float:
    """One Bellman backup: (1-a)*old + a*(r + gamma^tau * max_next).

    best_next=None means a terminal transition (target is the reward alone).
    tau is the number of primitive steps spanned; tau=1 reproduces the plain
    MDP update bit for bit.
    """
    if best_next is None:
        target = reward
    else:
        discount = gamma if tau == 1 else gamma ** tau
        target = reward + discount * best_next
    return (1 - alpha) * old + alpha * target


def derive_seed(master_seed: int, *tags: object) -> int:
    """Stable sub-seed for (master seed, stage tag, item index) streams.

    Hash-based so parallel scheduling or insertion order cannot change it;
    never uses Python's builtin hash().
    """
    blob = "/".join(str(t) for t in (master_seed, *tags)).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")
