"""The internal environment: states are machine graphs, actions edit them.

An internal episode starts by selecting a vertex multiset, then adds edges
one at a time. Whenever an edit yields a structurally valid machine it is
evaluated by actually training it in its cluster against the frozen
baseline; the averaged normalized return is the internal reward. Invalid
intermediates earn a large negative penalty. A Q-learner over
(canonical graph form, edit action, outcome indicator) drives the search
for better machines, seeded from the pruned set for the cluster.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

from .blocks_env import BlocksConfig, ClusterKey
from .ham_core import MachineGraph, Vertex, VertexType, validate
from .machine_gen import build_standard_machine, canonical_form, vertex_sort_key
from .pruning import BaselineResult, PrunedSet, run_solution_training
from .qlearn import Hyper, derive_seed, epsilon_greedy, q_backup


class FIndicator(Enum):
    SUCCESS = "success"
    FAIL = "fail"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class SelectVertexSet:
    """First action of an episode: pick the vertex multiset to build on."""

    index: int

    def __str__(self) -> str:
        return f"select:{self.index}"


@dataclass(frozen=True)
class AddEdge:
    from_id: int
    to_id: int

    def __str__(self) -> str:
        return f"edge:{self.from_id}>{self.to_id}"


InternalAction = SelectVertexSet | AddEdge


@dataclass(frozen=True)
class InternalState:
    graph: MachineGraph | None
    canonical_hash: str
    f_value: FIndicator | None


EMPTY_STATE = InternalState(graph=None, canonical_hash="", f_value=None)


@dataclass(frozen=True)
class EpisodeContext:
    """Budgets for one cluster's structure search: n_steps edits per
    internal episode, n_episodes external training episodes per evaluation,
    averaged over reward_trials repeats."""

    cluster: ClusterKey
    envs: tuple[BlocksConfig, ...]
    n_steps: int = 8
    n_episodes: int = 100
    reward_trials: int = 5

    def check(self) -> None:
        if min(self.n_steps, self.n_episodes, self.reward_trials) < 1:
            raise ValueError("all context counts must be positive")
        if not self.envs:
            raise ValueError("context needs at least one environment")


@dataclass(frozen=True)
class InternalParams:
    penalty: float = -1e6
    f_threshold: float = 0.95
    epsilon: float = 0.1
    alpha: float = 0.1
    gamma: float = 0.99


@dataclass
class InternalQTable:
    """Q over (canonical hash, action, indicator); missing entries read 0."""

    alpha: float
    gamma: float
    values: dict = field(default_factory=dict)

    def q(self, state_hash: str, a: InternalAction, f: FIndicator) -> float:
        return self.values.get((state_hash, a, f), 0.0)

    def action_value(self, state_hash: str, a: InternalAction) -> float:
        """Selection score: optimistic over the not-yet-known indicator."""
        return max(self.q(state_hash, a, FIndicator.SUCCESS),
                   self.q(state_hash, a, FIndicator.FAIL))


def internal_q_update(table: InternalQTable, s: InternalState,
                      a: InternalAction, f: FIndicator, r_int: float,
                      s_next: InternalState,
                      next_actions: Sequence[InternalAction]) -> None:
    """Forward Q-learning over graph-edit transitions; an empty next-action
    list marks a terminal step (no bootstrap)."""
    if next_actions:
        best = max(table.q(s_next.canonical_hash, a2, f2)
                   for a2 in next_actions for f2 in FIndicator)
    else:
        best = None
    key = (s.canonical_hash, a, f)
    table.values[key] = q_backup(
        table.values.get(key, 0.0), table.alpha, r_int, table.gamma, best)


def compute_F(graph: MachineGraph | None, r_int: float,
              threshold: float = 0.95) -> FIndicator:
    """Binary indicator: did the machine collect enough of the normalized
    baseline return? Invalid graphs (and so the penalty reward) fail."""
    if graph is None or not validate(graph).ok:
        return FIndicator.FAIL
    return FIndicator.SUCCESS if r_int >= threshold else FIndicator.FAIL


_OUT_CAPS = {
    VertexType.START: 1,
    VertexType.ACTION: 1,
    VertexType.CALL: 1,
}


class InternalEnv:
    """Episodic graph-editing environment for one cluster.

    multisets are the vertex bags offered on the first step; when an edge
    whitelist is given (edge sets of proven machines per multiset), only
    edits that stay inside some proven machine are offered.
    """

    def __init__(self, ctx: EpisodeContext, baseline: BaselineResult,
                 hyper: Hyper, multisets: Sequence[tuple[Vertex, ...]],
                 *, whitelist: dict[tuple[Vertex, ...],
                                    list[frozenset]] | None = None,
                 params: InternalParams = InternalParams(),
                 eval_seed: int = 0):
        ctx.check()
        self.ctx = ctx
        self.baseline = baseline
        self.hyper = hyper
        self.multisets = list(multisets)
        self.whitelist = whitelist
        self.params = params
        self.eval_seed = eval_seed
        self._eval_cache: dict[str, float] = {}

    @classmethod
    def from_pruned(cls, ctx: EpisodeContext, baseline: BaselineResult,
                    hyper: Hyper, pruned: PrunedSet, *,
                    params: InternalParams = InternalParams(),
                    eval_seed: int = 0) -> "InternalEnv":
        """Seed the action space from the cluster's applicable machines:
        their multisets select the vertices, their edge sets bound the
        reachable structures."""
        multisets: list[tuple[Vertex, ...]] = []
        whitelist: dict[tuple[Vertex, ...], list[frozenset]] = {}
        for graph in pruned.machines(ctx.cluster):
            key = graph.vertices
            if key not in whitelist:
                whitelist[key] = []
                multisets.append(key)
            whitelist[key].append(frozenset(graph.edges))
        multisets.sort(key=lambda ms: (len(ms), tuple(map(vertex_sort_key, ms))))
        return cls(ctx, baseline, hyper, multisets, whitelist=whitelist,
                   params=params, eval_seed=eval_seed)

    def get_possible_actions(self, state: InternalState) -> list[InternalAction]:
        if state.graph is None:
            return [SelectVertexSet(i) for i in range(len(self.multisets))]
        graph = state.graph
        n = len(graph.vertices)
        out_deg = [0] * n
        for f, _ in graph.edges:
            out_deg[f] += 1
        allowed_sets = None
        if self.whitelist is not None:
            allowed_sets = self.whitelist.get(graph.vertices, [])
        actions: list[InternalAction] = []
        for u in range(n):
            u_type = graph.vertices[u].type
            if u_type is VertexType.STOP:
                continue
            cap = _OUT_CAPS.get(u_type)
            if cap is not None and out_deg[u] >= cap:
                continue
            for v in range(n):
                if v == u or (u, v) in graph.edges:
                    continue
                v_type = graph.vertices[v].type
                if v_type is VertexType.START:
                    continue
                if u_type is VertexType.CHOICE and v_type is VertexType.STOP:
                    continue
                if allowed_sets is not None and not any(
                        (u, v) in allowed and graph.edges <= allowed
                        for allowed in allowed_sets):
                    continue
                actions.append(AddEdge(u, v))
        return actions

    def evaluate(self, graph: MachineGraph) -> float:
        """Mean normalized return of training the machine in its cluster
        (frozen baseline elsewhere), averaged over reward_trials repeats.
        Deterministic per canonical form, so repeats are cached."""
        key = canonical_form(graph)
        if key in self._eval_cache:
            return self._eval_cache[key]
        total = 0.0
        for trial in range(self.ctx.reward_trials):
            run = run_solution_training(
                {self.ctx.cluster: graph}, self.baseline, self.ctx.envs,
                self.ctx.n_episodes, self.hyper,
                derive_seed(self.eval_seed, "eval", key, trial))
            total += run.mean_normalized()
        r_int = total / self.ctx.reward_trials
        self._eval_cache[key] = r_int
        return r_int

    def internal_step(self, state: InternalState, action: InternalAction
                      ) -> tuple[list[InternalAction], InternalState,
                                 float, FIndicator]:
        """Apply one edit; evaluate if the result is a complete valid
        machine, otherwise charge the invalid-structure penalty."""
        if isinstance(action, SelectVertexSet):
            if state.graph is not None:
                raise ValueError("vertex set already selected this episode")
            if not 0 <= action.index < len(self.multisets):
                raise ValueError(f"no vertex multiset {action.index}")
            graph = MachineGraph(self.multisets[action.index], frozenset())
        else:
            if state.graph is None:
                raise ValueError("select a vertex set before adding edges")
            if action not in self.get_possible_actions(state):
                raise ValueError(f"illegal edge action {action}")
            graph = replace(
                state.graph,
                edges=state.graph.edges | {(action.from_id, action.to_id)})

        if validate(graph).ok:
            r_int = self.evaluate(graph)
        else:
            r_int = self.params.penalty
        f = compute_F(graph, r_int, self.params.f_threshold)
        next_state = InternalState(graph=graph,
                                   canonical_hash=canonical_form(graph),
                                   f_value=f)
        return self.get_possible_actions(next_state), next_state, r_int, f


@dataclass(frozen=True)
class SearchLogEntry:
    episode: int
    step: int
    action: str
    r_int: float
    f: FIndicator
    best_so_far: float

    def line(self) -> str:
        return (f"{self.episode} {self.step} {self.action} {self.r_int!r} "
                f"{self.f} {self.best_so_far!r}")


@dataclass
class SearchOutcome:
    cluster: ClusterKey
    best_graph: MachineGraph
    best_mean: float
    log: list[SearchLogEntry]


def search_cluster(env: InternalEnv, search_episodes: int,
                   seed: int) -> SearchOutcome:
    """Epsilon-greedy internal Q-learning over graph edits; tracks the best
    valid machine by mean internal reward. The standard machine is the
    incumbent, so the result can only match or beat it."""
    mstd = build_standard_machine()
    if search_episodes <= 0:
        return SearchOutcome(env.ctx.cluster, mstd, 0.0, [])
    table = InternalQTable(env.params.alpha, env.params.gamma)
    rng = random.Random(seed)

    stats: dict[str, list] = {}  # hash -> [sum, count, graph]
    best_graph, best_mean = mstd, env.evaluate(mstd)
    log: list[SearchLogEntry] = []
    for episode in range(search_episodes):
        state = EMPTY_STATE
        actions = env.get_possible_actions(state)
        for step_i in range(env.ctx.n_steps):
            if not actions:
                break
            action = epsilon_greedy(
                rng, env.params.epsilon, actions,
                lambda a: table.action_value(state.canonical_hash, a))
            next_actions, next_state, r_int, f = env.internal_step(
                state, action)
            terminal = step_i == env.ctx.n_steps - 1 or not next_actions
            internal_q_update(table, state, action, f, r_int, next_state,
                              [] if terminal else next_actions)
            if validate(next_state.graph).ok:
                entry = stats.setdefault(
                    next_state.canonical_hash, [0.0, 0, next_state.graph])
                entry[0] += r_int
                entry[1] += 1
                mean = entry[0] / entry[1]
                if mean > best_mean:
                    best_mean = mean
                    best_graph = entry[2]
            log.append(SearchLogEntry(episode, step_i, str(action), r_int,
                                      f, best_mean))
            state, actions = next_state, next_actions
    return SearchOutcome(env.ctx.cluster, best_graph, best_mean, log)


def search_structure(cluster: ClusterKey, ctx: EpisodeContext,
                     pruned_seed: PrunedSet, search_episodes: int,
                     seed: int, *, baseline: BaselineResult,
                     hyper: Hyper = Hyper(),
                     params: InternalParams = InternalParams()) -> MachineGraph:
    """Best machine found for the cluster (the standard machine when the
    search cannot improve on it)."""
    ctx = replace(ctx, cluster=cluster)
    env = InternalEnv.from_pruned(ctx, baseline, hyper, pruned_seed,
                                  params=params, eval_seed=seed)
    return search_cluster(env, search_episodes, seed).best_graph


def write_search_log(path, outcome: SearchOutcome) -> None:
    """One line per internal step: `episode step action r_int F best_so_far`."""
    lines = [entry.line() for entry in outcome.log]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))
