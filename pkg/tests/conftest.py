"""Shared fixtures and independent oracles used across the test suite."""
from __future__ import annotations

import random

import pytest

from hamforge.blocks_env import BlocksAction, BlocksConfig

# The three published environments: two training, one held-out test.
ENV_TRAIN_1 = BlocksConfig(grid_height=4, grid_width=3, num_cubes=3,
                           episode_length=200, tower_target=3)
ENV_TRAIN_2 = BlocksConfig(grid_height=5, grid_width=4, num_cubes=4,
                           episode_length=500, tower_target=4)
ENV_TEST = BlocksConfig(grid_height=6, grid_width=4, num_cubes=5,
                        episode_length=800, tower_target=5)

A = BlocksAction
# Hand-coded 4x3 solution: stack the outer cubes onto column 1.
SCRIPTED_SOLUTION_4x3 = [
    A.DOWN, A.DOWN, A.TOGGLE_MAGNET, A.UP, A.UP, A.RIGHT, A.TOGGLE_MAGNET,
    A.RIGHT, A.DOWN, A.DOWN, A.TOGGLE_MAGNET, A.UP, A.UP, A.LEFT,
    A.TOGGLE_MAGNET,
]


@pytest.fixture
def rng():
    return random.Random(1234)


def chain_value_iteration(n_states: int = 5, gamma: float = 0.99,
                          tol: float = 1e-12) -> dict:
    """Exact Q for the deterministic chain: actions 0 (back) / 1 (forward),
    reward 1 on entering the terminal last state, 0 elsewhere."""
    states = range(n_states - 1)
    q = {(s, a): 0.0 for s in states for a in (0, 1)}
    while True:
        delta = 0.0
        for s in states:
            for a in (0, 1):
                s2 = min(s + 1, n_states - 1) if a == 1 else max(s - 1, 0)
                r = 1.0 if s2 == n_states - 1 else 0.0
                if s2 == n_states - 1:
                    target = r
                else:
                    target = r + gamma * max(q[(s2, 0)], q[(s2, 1)])
                delta = max(delta, abs(q[(s, a)] - target))
                q[(s, a)] = target
        if delta < tol:
            return q


def chain_step(s: int, a: int, n_states: int = 5) -> tuple[int, float, bool]:
    s2 = min(s + 1, n_states - 1) if a == 1 else max(s - 1, 0)
    done = s2 == n_states - 1
    return s2, (1.0 if done else 0.0), done
