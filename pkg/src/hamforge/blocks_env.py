"""Blocks-world manipulator environment.

A magnet-tipped manipulator moves on a grid of cells and stacks metal
cubes into a tower of a required height. Five actions: Left, Right, Up,
Down, ToggleMagnet. Horizontal carries succeed only from the top row;
anywhere lower the manipulator stays put and the cube drops. Building
the tower pays 100 and ends the episode; every other step costs 1e-5.

All transition logic is deterministic; the only randomness is the seeded
initial cube placement.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

STEP_PENALTY = -0.00001
TOWER_REWARD = 100.0


class BlocksAction(Enum):
    """The five primitive actions, in canonical tie-break order."""

    LEFT = "Left"
    RIGHT = "Right"
    UP = "Up"
    DOWN = "Down"
    TOGGLE_MAGNET = "ToggleMagnet"

    def __str__(self) -> str:
        return self.value


ACTIONS: tuple[BlocksAction, ...] = tuple(BlocksAction)
ACTION_BY_NAME = {a.value: a for a in BlocksAction}

Cell = tuple[int, int]  # (col, row), row 0 = floor


class BlocksEnvError(Exception):
    """Base error for the blocks environment."""


class ConfigError(BlocksEnvError):
    """Raised for configurations that cannot produce a legal initial state."""


class EpisodeOver(BlocksEnvError):
    """Raised when step() is applied to a terminated episode."""


@dataclass(frozen=True)
class BlocksConfig:
    grid_height: int
    grid_width: int
    num_cubes: int
    episode_length: int
    tower_target: int

    def validate(self) -> None:
        if min(self.grid_height, self.grid_width, self.num_cubes,
               self.episode_length, self.tower_target) < 1:
            raise ConfigError("all config fields must be positive")
        # Initial layout keeps the top row clear for the manipulator, so
        # capacity is width * (height - 1) cells.
        capacity = self.grid_width * (self.grid_height - 1)
        if self.num_cubes > capacity:
            raise ConfigError(
                f"{self.num_cubes} cubes exceed placement capacity {capacity}")
        if self.tower_target > min(self.num_cubes, self.grid_height):
            raise ConfigError(
                f"tower target {self.tower_target} exceeds "
                f"min(num_cubes, grid_height)")


@dataclass(frozen=True)
class BlocksState:
    cube_cells: frozenset[Cell]
    manip: Cell
    magnet_on: bool
    holding: bool
    steps_taken: int = 0

    @property
    def held_cell(self) -> Cell | None:
        if not self.holding:
            return None
        return (self.manip[0], self.manip[1] - 1)


@dataclass(frozen=True)
class ClusterKey:
    manip_height: int
    holding: bool

    def __str__(self) -> str:
        return f"h{self.manip_height}_{'hold' if self.holding else 'free'}"


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    done: bool
    state: BlocksState


# Observation keys are plain hashable tuples; decode_observation inverts them.
ObservationKey = tuple


def reset(config: BlocksConfig, seed: int) -> BlocksState:
    """Seeded initial state: cubes fill the bottom row first, any surplus is
    stacked on seeded columns below the top row; manipulator starts top-left
    with the magnet off."""
    config.validate()
    rng = random.Random(seed)
    w, h = config.grid_width, config.grid_height
    cubes: set[Cell] = set()
    if config.num_cubes <= w:
        cols = rng.sample(range(w), config.num_cubes)
        cubes.update((c, 0) for c in cols)
    else:
        cubes.update((c, 0) for c in range(w))
        heights = [1] * w
        for _ in range(config.num_cubes - w):
            open_cols = [c for c in range(w) if heights[c] < h - 1]
            col = open_cols[rng.randrange(len(open_cols))]
            cubes.add((col, heights[col]))
            heights[col] += 1
    return BlocksState(
        cube_cells=frozenset(cubes),
        manip=(0, h - 1),
        magnet_on=False,
        holding=False,
        steps_taken=0,
    )


def _landing_row(col: int, resting: set[Cell]) -> int:
    row = 0
    while (col, row) in resting:
        row += 1
    return row


def step(state: BlocksState, action: BlocksAction,
         config: BlocksConfig) -> StepOutcome:
    """Apply one primitive action. Illegal moves are no-ops except the
    below-top-row horizontal carry, which releases the cube."""
    if is_done(state, config):
        raise EpisodeOver("step() on a terminated episode")

    h, w = config.grid_height, config.grid_width
    col, row = state.manip
    cubes = set(state.cube_cells)
    magnet, holding = state.magnet_on, state.holding
    held = state.held_cell
    resting = cubes - {held} if held else cubes

    if action in (BlocksAction.LEFT, BlocksAction.RIGHT):
        dc = -1 if action is BlocksAction.LEFT else 1
        if holding and row < h - 1:
            # Carry attempted below the top row: manipulator stays, cube drops.
            cubes.discard(held)
            cubes.add((col, _landing_row(col, resting)))
            holding = False
        else:
            nc = col + dc
            manip_free = 0 <= nc < w and (nc, row) not in resting
            if holding:
                cube_free = (nc, row - 1) not in resting
                if manip_free and cube_free:
                    cubes.discard(held)
                    cubes.add((nc, row - 1))
                    col = nc
            elif manip_free:
                col = nc
    elif action in (BlocksAction.UP, BlocksAction.DOWN):
        dr = 1 if action is BlocksAction.UP else -1
        nr = row + dr
        if holding:
            cube_nr = nr - 1
            if 0 <= cube_nr and nr < h and (col, nr) not in resting \
                    and (col, cube_nr) not in resting:
                cubes.discard(held)
                cubes.add((col, cube_nr))
                row = nr
        else:
            if 0 <= nr < h and (col, nr) not in cubes:
                row = nr
    elif action is BlocksAction.TOGGLE_MAGNET:
        if magnet:
            magnet = False
            if holding:
                cubes.discard(held)
                cubes.add((col, _landing_row(col, resting)))
                holding = False
        else:
            magnet = True
            holding = (col, row - 1) in cubes

    new_state = BlocksState(
        cube_cells=frozenset(cubes),
        manip=(col, row),
        magnet_on=magnet,
        holding=holding,
        steps_taken=state.steps_taken + 1,
    )
    built = tower_built(new_state, config)
    reward = TOWER_REWARD if built else STEP_PENALTY
    done = built or new_state.steps_taken >= config.episode_length
    return StepOutcome(reward=reward, done=done, state=new_state)


def tower_built(state: BlocksState, config: BlocksConfig) -> bool:
    """True iff some column holds >= tower_target resting cubes contiguous
    from the floor. A held cube does not count."""
    held = state.held_cell
    resting = state.cube_cells - {held} if held else state.cube_cells
    by_col: dict[int, set[int]] = {}
    for c, r in resting:
        by_col.setdefault(c, set()).add(r)
    for rows in by_col.values():
        height = 0
        while height in rows:
            height += 1
        if height >= config.tower_target:
            return True
    return False


def is_done(state: BlocksState, config: BlocksConfig) -> bool:
    return state.steps_taken >= config.episode_length or tower_built(state, config)


def cluster_of(state: BlocksState) -> ClusterKey:
    return ClusterKey(manip_height=state.manip[1], holding=state.holding)


def observe(state: BlocksState) -> ObservationKey:
    """Injective, hashable encoding of everything but the step counter."""
    return (tuple(sorted(state.cube_cells)), state.manip,
            state.magnet_on, state.holding)


def decode_observation(key: ObservationKey) -> BlocksState:
    """Inverse of observe(); the step counter is not observed and reads 0."""
    cube_cells, manip, magnet_on, holding = key
    return BlocksState(
        cube_cells=frozenset(cube_cells),
        manip=manip,
        magnet_on=magnet_on,
        holding=holding,
        steps_taken=0,
    )


class BlocksEpisode:
    """One live episode: holds the current state and enforces termination.

    Visited clusters are recorded so callers can census which clusters an
    environment actually exposes."""

    def __init__(self, config: BlocksConfig, seed: int):
        self.config = config
        self.state = reset(config, seed)
        self.done = is_done(self.state, config)
        self.clusters_seen: set[ClusterKey] = {cluster_of(self.state)}
        self.actions_taken: list[BlocksAction] = []

    def step(self, action: BlocksAction) -> StepOutcome:
        outcome = step(self.state, action, self.config)
        self.state = outcome.state
        self.done = outcome.done
        self.clusters_seen.add(cluster_of(self.state))
        self.actions_taken.append(action)
        return outcome

    def cluster(self) -> ClusterKey:
        return cluster_of(self.state)

    def observation(self) -> ObservationKey:
        return observe(self.state)


ENV_CONFIG_KEYS = ("height", "width", "cubes", "episode_length",
                   "tower_target", "seed")


def parse_env_config(text: str) -> tuple[BlocksConfig, int]:
    """Parse a flat key-value env config (keys: height, width, cubes,
    episode_length, tower_target, seed). Accepts 'key value', 'key=value'
    or 'key: value' lines; '#' starts a comment."""
    values: dict[str, int] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, _, val = line.partition(sep)
                break
        else:
            key, _, val = line.partition(" ")
        key, val = key.strip(), val.strip()
        if key not in ENV_CONFIG_KEYS:
            raise ConfigError(f"unknown env config key: {key!r}")
        values[key] = int(val)
    missing = [k for k in ENV_CONFIG_KEYS if k not in values and k != "seed"]
    if missing:
        raise ConfigError(f"missing env config keys: {missing}")
    config = BlocksConfig(
        grid_height=values["height"],
        grid_width=values["width"],
        num_cubes=values["cubes"],
        episode_length=values["episode_length"],
        tower_target=values["tower_target"],
    )
    config.validate()
    return config, values.get("seed", 0)


def load_env_config(path: str | Path) -> tuple[BlocksConfig, int]:
    return parse_env_config(Path(path).read_text())


def format_env_config(config: BlocksConfig, seed: int = 0) -> str:
    return "".join(
        f"{k} = {v}\n" for k, v in (
            ("height", config.grid_height),
            ("width", config.grid_width),
            ("cubes", config.num_cubes),
            ("episode_length", config.episode_length),
            ("tower_target", config.tower_target),
            ("seed", seed),
        ))


@dataclass(frozen=True)
class TraceRecord:
    t: int
    action: BlocksAction
    reward: float
    done: bool
    cluster: ClusterKey


def format_trace(records: Iterable[TraceRecord]) -> str:
    """One line per step: `t action reward done cluster`."""
    lines = []
    for rec in records:
        lines.append(
            f"{rec.t} {rec.action.value} {rec.reward!r} "
            f"{int(rec.done)} {rec.cluster.manip_height} "
            f"{int(rec.cluster.holding)}")
    return "\n".join(lines) + ("\n" if lines else "")


def write_trace(path: str | Path, records: Sequence[TraceRecord]) -> None:
    Path(path).write_text(format_trace(records))
