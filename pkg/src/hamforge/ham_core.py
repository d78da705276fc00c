"""Abstract-machine data model, validation, execution and choice learning.

A machine is a directed graph of typed vertices: Start, Stop, Choice,
Action (runs one primitive action on entry), Call (suspends and runs
another machine to its Stop), plus Dispatch, the deterministic
cluster-keyed branch used only by root machines. The Choice vertices are
the only learned decision points: a tabular Q-function over
(observation, choice, outgoing edge) is updated between consecutive
Choice visits with the semi-Markov backup, so a single-Choice machine
degenerates exactly to flat Q-learning.
"""
from __future__ import annotations

import functools
import random
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .blocks_env import (
    ACTION_BY_NAME,
    BlocksAction,
    BlocksEpisode,
    ClusterKey,
    ObservationKey,
)
from .qlearn import epsilon_greedy, q_backup

M_STD_ID = "m_std"


class MachineError(Exception):
    """Structural or usage error around machine execution."""


class LibraryError(MachineError):
    """A Call vertex references a machine id the library does not hold."""


class MachineStall(MachineError):
    """A dispatched machine returned without consuming any environment step,
    so the episode can never progress. Carries the partial run result so
    callers can score the episode up to the stall."""

    def __init__(self, message: str, partial: "RunResult | None" = None):
        super().__init__(message)
        self.partial = partial


class VertexType(Enum):
    START = "start"
    STOP = "stop"
    CHOICE = "choice"
    ACTION = "action"
    CALL = "call"
    DISPATCH = "dispatch"


@dataclass(frozen=True)
class Vertex:
    type: VertexType
    action: BlocksAction | None = None
    machine: str | None = None

    def __post_init__(self):
        if self.type is VertexType.ACTION and self.action is None:
            raise MachineError("action vertex needs an action")
        if self.type is VertexType.CALL and not self.machine:
            raise MachineError("call vertex needs a machine id")

    @property
    def arg(self) -> str:
        if self.type is VertexType.ACTION:
            return self.action.value
        if self.type is VertexType.CALL:
            return self.machine
        return ""


def start() -> Vertex:
    return Vertex(VertexType.START)


def stop() -> Vertex:
    return Vertex(VertexType.STOP)


def choice() -> Vertex:
    return Vertex(VertexType.CHOICE)


def action(a: BlocksAction) -> Vertex:
    return Vertex(VertexType.ACTION, action=a)


def call(machine_id: str) -> Vertex:
    return Vertex(VertexType.CALL, machine=machine_id)


def dispatch() -> Vertex:
    return Vertex(VertexType.DISPATCH)


@dataclass(frozen=True)
class DispatchTable:
    """Deterministic cluster -> Call-vertex routing for a root machine."""

    entries: tuple[tuple[ClusterKey, int], ...]
    fallback: int

    def target(self, cluster: ClusterKey) -> int:
        for key, vertex_id in self.entries:
            if key == cluster:
                return vertex_id
        return self.fallback


@dataclass(frozen=True)
class MachineGraph:
    """Vertices are identified by position; edges are (from_id, to_id).

    episode_bounded marks machines that run until the episode ends instead
    of reaching Stop (the root dispatcher); Stop-side validation rules are
    waived for them.
    """

    vertices: tuple[Vertex, ...]
    edges: frozenset[tuple[int, int]]
    episode_bounded: bool = False
    dispatch: DispatchTable | None = None

    def successors(self, vertex_id: int) -> list[int]:
        return sorted(t for f, t in self.edges if f == vertex_id)

    def single_successor(self, vertex_id: int) -> int:
        succ = self.successors(vertex_id)
        if len(succ) != 1:
            raise MachineError(
                f"vertex {vertex_id} expected exactly one successor, "
                f"has {len(succ)}")
        return succ[0]

    def start_vertex(self) -> int:
        for i, v in enumerate(self.vertices):
            if v.type is VertexType.START:
                return i
        raise MachineError("machine has no Start vertex")


@dataclass(frozen=True)
class ValidationReport:
    """Violations are data, not errors; empty = valid. Strict findings
    (Stop in-degree above one) are tracked separately so the paper's
    stricter rule can be enforced by callers that want it."""

    violations: tuple[str, ...]
    strict_violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def strict_ok(self) -> bool:
        return self.ok and not self.strict_violations


def _weakly_connected(n: int, edges: Iterable[tuple[int, int]]) -> bool:
    if n == 0:
        return True
    adj = defaultdict(set)
    for f, t in edges:
        adj[f].add(t)
        adj[t].add(f)
    seen = {0}
    stack = [0]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == n


def _reachable(sources: Iterable[int], adj: Mapping[int, list[int]]) -> set[int]:
    seen = set(sources)
    stack = list(seen)
    while stack:
        for nxt in adj.get(stack.pop(), ()):
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return seen


def _has_choice_cycle(graph: MachineGraph) -> bool:
    choice_ids = {i for i, v in enumerate(graph.vertices)
                  if v.type is VertexType.CHOICE}
    adj = {i: [t for f, t in graph.edges if f == i and t in choice_ids]
           for i in choice_ids}
    color: dict[int, int] = {}

    def dfs(u: int) -> bool:
        color[u] = 1
        for w in adj[u]:
            if color.get(w, 0) == 1:
                return True
            if color.get(w, 0) == 0 and dfs(w):
                return True
        color[u] = 2
        return False

    return any(color.get(u, 0) == 0 and dfs(u) for u in choice_ids)


@functools.lru_cache(maxsize=4096)
def validate(graph: MachineGraph) -> ValidationReport:
    """Check every structural constraint; returns all violations found."""
    violations: list[str] = []
    strict: list[str] = []
    n = len(graph.vertices)
    out_deg = [0] * n
    in_deg = [0] * n
    adj: dict[int, list[int]] = defaultdict(list)
    radj: dict[int, list[int]] = defaultdict(list)
    for f, t in graph.edges:
        if not (0 <= f < n and 0 <= t < n):
            violations.append(f"edge-range: ({f},{t}) outside vertex ids")
            continue
        out_deg[f] += 1
        in_deg[t] += 1
        adj[f].append(t)
        radj[t].append(f)
        if f == t:
            violations.append(f"self-loop: vertex {f}")

    starts = [i for i, v in enumerate(graph.vertices)
              if v.type is VertexType.START]
    stops = [i for i, v in enumerate(graph.vertices)
             if v.type is VertexType.STOP]
    if len(starts) != 1:
        violations.append(f"start-count: {len(starts)} Start vertices")
    if graph.episode_bounded:
        if len(stops) > 1:
            violations.append(f"stop-count: {len(stops)} Stop vertices")
    elif len(stops) != 1:
        violations.append(f"stop-count: {len(stops)} Stop vertices")

    dispatch_ids = []
    for i, v in enumerate(graph.vertices):
        if v.type is VertexType.START:
            if out_deg[i] != 1:
                violations.append(f"start-out: vertex {i} out-degree {out_deg[i]}")
            if in_deg[i] != 0:
                violations.append(f"start-in: vertex {i} in-degree {in_deg[i]}")
        elif v.type is VertexType.STOP:
            if out_deg[i] != 0:
                violations.append(f"stop-out: vertex {i} out-degree {out_deg[i]}")
            if in_deg[i] < 1 and not graph.episode_bounded:
                violations.append(f"stop-in: vertex {i} has no incoming edge")
            if in_deg[i] > 1:
                strict.append(f"stop-in-strict: vertex {i} in-degree {in_deg[i]}")
        elif v.type in (VertexType.ACTION, VertexType.CALL):
            if out_deg[i] != 1:
                violations.append(
                    f"{v.type.value}-out: vertex {i} out-degree {out_deg[i]}")
        elif v.type is VertexType.CHOICE:
            if out_deg[i] < 2:
                violations.append(f"choice-out: vertex {i} out-degree {out_deg[i]}")
            for t in adj.get(i, ()):
                if graph.vertices[t].type is VertexType.STOP:
                    violations.append(f"choice-to-stop: edge ({i},{t})")
        elif v.type is VertexType.DISPATCH:
            dispatch_ids.append(i)
            if out_deg[i] < 1:
                violations.append(f"dispatch-out: vertex {i} out-degree {out_deg[i]}")

    if dispatch_ids and graph.dispatch is None:
        violations.append("dispatch-table: Dispatch vertex without routing table")
    if graph.dispatch is not None:
        targets = {t for _, t in graph.dispatch.entries}
        targets.add(graph.dispatch.fallback)
        routed = set()
        for d in dispatch_ids:
            routed.update(adj.get(d, ()))
        for t in sorted(targets):
            if not (0 <= t < n) or graph.vertices[t].type is not VertexType.CALL:
                violations.append(f"dispatch-target: {t} is not a Call vertex")
            elif dispatch_ids and t not in routed:
                violations.append(f"dispatch-target: {t} not a Dispatch successor")

    if not _weakly_connected(n, [(f, t) for f, t in graph.edges
                                 if 0 <= f < n and 0 <= t < n]):
        violations.append("connectivity: more than one weak component")
    if len(starts) == 1:
        reach = _reachable([starts[0]], adj)
        if len(reach) != n:
            missing = sorted(set(range(n)) - reach)
            violations.append(f"reachability: {missing} unreachable from Start")
    if len(stops) == 1 and not graph.episode_bounded:
        coreach = _reachable([stops[0]], radj)
        if len(coreach) != n:
            missing = sorted(set(range(n)) - coreach)
            violations.append(f"co-reachability: {missing} cannot reach Stop")
    if _has_choice_cycle(graph):
        violations.append("choice-cycle: cycle through Choice vertices only")

    return ValidationReport(tuple(violations), tuple(strict))


# ---------------------------------------------------------------------------
# Serialization: canonical line format and DOT export.

def format_machine_text(graph: MachineGraph) -> str:
    """Canonical line format: `v <id> <kind> [arg]`, `e <from> <to>`, plus
    `flag`/`d` lines for the episode flag and dispatch routing."""
    lines = []
    for i, v in enumerate(graph.vertices):
        arg = f" {v.arg}" if v.arg else ""
        lines.append(f"v {i} {v.type.value}{arg}")
    for f, t in sorted(graph.edges):
        lines.append(f"e {f} {t}")
    if graph.episode_bounded:
        lines.append("flag episode_bounded")
    if graph.dispatch is not None:
        for key, target in sorted(
                graph.dispatch.entries,
                key=lambda e: (e[0].manip_height, e[0].holding)):
            lines.append(f"d {key.manip_height} {int(key.holding)} {target}")
        lines.append(f"d * * {graph.dispatch.fallback}")
    return "\n".join(lines) + "\n"


def parse_machine_text(text: str) -> MachineGraph:
    vertices: list[Vertex] = []
    edges: set[tuple[int, int]] = set()
    episode_bounded = False
    entries: list[tuple[ClusterKey, int]] = []
    fallback: int | None = None
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "v":
            vid = int(parts[1])
            if vid != len(vertices):
                raise MachineError(f"vertex ids must be 0..n-1 in order, got {vid}")
            kind = VertexType(parts[2])
            if kind is VertexType.ACTION:
                vertices.append(action(ACTION_BY_NAME[parts[3]]))
            elif kind is VertexType.CALL:
                vertices.append(call(parts[3]))
            else:
                vertices.append(Vertex(kind))
        elif parts[0] == "e":
            edges.add((int(parts[1]), int(parts[2])))
        elif parts[0] == "flag":
            if parts[1] != "episode_bounded":
                raise MachineError(f"unknown flag {parts[1]!r}")
            episode_bounded = True
        elif parts[0] == "d":
            if parts[1] == "*":
                fallback = int(parts[3])
            else:
                entries.append(
                    (ClusterKey(int(parts[1]), bool(int(parts[2]))),
                     int(parts[3])))
        else:
            raise MachineError(f"unknown machine line: {line!r}")
    table = None
    if fallback is not None or entries:
        if fallback is None:
            raise MachineError("dispatch entries without a fallback line")
        table = DispatchTable(tuple(entries), fallback)
    return MachineGraph(tuple(vertices), frozenset(edges),
                        episode_bounded=episode_bounded, dispatch=table)


_DOT_LABELS = {
    VertexType.START: "Start",
    VertexType.STOP: "Stop",
    VertexType.CHOICE: "Choice",
    VertexType.DISPATCH: "Dispatch",
}

_DOT_SHAPES = {
    VertexType.START: "circle",
    VertexType.STOP: "doublecircle",
    VertexType.CHOICE: "diamond",
    VertexType.ACTION: "box",
    VertexType.CALL: "box3d",
    VertexType.DISPATCH: "hexagon",
}


def to_dot(graph: MachineGraph, name: str = "machine") -> str:
    """DOT export; labels carry enough to reconstruct the graph."""
    lines = [f"digraph {name} {{", "  rankdir=LR;"]
    if graph.episode_bounded:
        lines.append("  // flag episode_bounded")
    for i, v in enumerate(graph.vertices):
        if v.type is VertexType.ACTION:
            label = v.action.value
        elif v.type is VertexType.CALL:
            label = f"Call {v.machine}"
        else:
            label = _DOT_LABELS[v.type]
        lines.append(f'  v{i} [label="{label}", shape={_DOT_SHAPES[v.type]}];')
    for f, t in sorted(graph.edges):
        lines.append(f"  v{f} -> v{t};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def from_dot(text: str) -> MachineGraph:
    """Parse DOT produced by to_dot (vertex labels identify the kinds)."""
    vertices: list[Vertex] = []
    edges: set[tuple[int, int]] = set()
    episode_bounded = False
    label_kinds = {v: k for k, v in _DOT_LABELS.items()}
    for raw in text.splitlines():
        line = raw.strip()
        if line == "// flag episode_bounded":
            episode_bounded = True
        elif "->" in line:
            f, _, t = line.rstrip(";").partition("->")
            edges.add((int(f.strip().lstrip("v")), int(t.strip().lstrip("v"))))
        elif line.startswith("v") and "[label=" in line:
            vid = int(line.split("[", 1)[0].strip().lstrip("v"))
            if vid != len(vertices):
                raise MachineError("DOT vertex ids must appear in order")
            label = line.split('label="', 1)[1].split('"', 1)[0]
            if label in label_kinds:
                vertices.append(Vertex(label_kinds[label]))
            elif label.startswith("Call "):
                vertices.append(call(label[len("Call "):]))
            elif label in ACTION_BY_NAME:
                vertices.append(action(ACTION_BY_NAME[label]))
            else:
                raise MachineError(f"unrecognized DOT label {label!r}")
    return MachineGraph(tuple(vertices), frozenset(edges),
                        episode_bounded=episode_bounded)


# ---------------------------------------------------------------------------
# Machine library and choice-point Q-learning.

class MachineLibrary:
    """Named machines that Call vertices and dispatch tables refer to."""

    def __init__(self, machines: Mapping[str, MachineGraph] | None = None):
        self._machines: dict[str, MachineGraph] = dict(machines or {})

    def add(self, machine_id: str, graph: MachineGraph) -> None:
        self._machines[machine_id] = graph

    def get(self, machine_id: str) -> MachineGraph:
        try:
            return self._machines[machine_id]
        except KeyError:
            raise LibraryError(f"unknown machine id {machine_id!r}") from None

    def __contains__(self, machine_id: str) -> bool:
        return machine_id in self._machines

    def ids(self) -> list[str]:
        return sorted(self._machines)


ChoiceRef = tuple[str, int]  # (machine id, choice vertex id)


@dataclass
class ChoiceQTable:
    """Tabular Q over (observation, choice vertex, outgoing edge).

    Missing entries read 0. Successor lists are registered per choice so
    the bootstrap max is well defined without consulting the graph.
    """

    alpha: float
    gamma: float
    values: dict = field(default_factory=dict)
    choice_successors: dict = field(default_factory=dict)

    def q(self, obs: ObservationKey, choice_ref: ChoiceRef, edge: int) -> float:
        return self.values.get((obs, choice_ref, edge), 0.0)

    def register_choice(self, choice_ref: ChoiceRef,
                        successors: Sequence[int]) -> None:
        self.choice_successors[choice_ref] = tuple(successors)

    def best_value(self, obs: ObservationKey, choice_ref: ChoiceRef) -> float:
        try:
            successors = self.choice_successors[choice_ref]
        except KeyError:
            raise MachineError(
                f"choice {choice_ref} has no registered successors") from None
        return max(self.values.get((obs, choice_ref, e), 0.0)
                   for e in successors)

    def copy(self) -> "ChoiceQTable":
        return ChoiceQTable(self.alpha, self.gamma, dict(self.values),
                            dict(self.choice_successors))


def choice_update(qtable: ChoiceQTable, s: ObservationKey, c: ChoiceRef,
                  edge: int, r_c: float, tau: int, s_next: ObservationKey,
                  c_next: ChoiceRef | None) -> None:
    """Semi-Markov backup between consecutive Choice visits.

    r_c must already be the discounted sum of the tau step rewards in
    between; c_next=None marks the end of the episode (no bootstrap).
    """
    if tau < 1:
        raise MachineError("tau must be at least 1")
    best = None if c_next is None else qtable.best_value(s_next, c_next)
    key = (s, c, edge)
    qtable.values[key] = q_backup(
        qtable.values.get(key, 0.0), qtable.alpha, r_c, qtable.gamma,
        best, tau)


@dataclass(frozen=True)
class MachinePolicy:
    epsilon: float
    learn: bool


@dataclass
class _Pending:
    obs: ObservationKey
    choice_ref: ChoiceRef
    edge: int
    reward: float = 0.0
    discount: float = 1.0
    tau: int = 0


class ChoiceLearner:
    """Carries the between-Choice learning state across machine invocations
    within one episode. Frozen machines (learn=False) still provide the
    bootstrap target but their own choices are never updated."""

    def __init__(self, qtable: ChoiceQTable, rng: random.Random,
                 epsilon: float, learn: bool = True,
                 policies: Mapping[str, MachinePolicy] | None = None):
        self.qtable = qtable
        self.rng = rng
        self.default = MachinePolicy(epsilon=epsilon, learn=learn)
        self.policies = dict(policies or {})
        self.pending: _Pending | None = None

    def policy_for(self, machine_id: str) -> MachinePolicy:
        return self.policies.get(machine_id, self.default)

    def begin_episode(self) -> None:
        self.pending = None

    def on_choice(self, machine_id: str, vertex_id: int,
                  successors: Sequence[int], obs: ObservationKey) -> int:
        ref = (machine_id, vertex_id)
        self.qtable.register_choice(ref, successors)
        if self.pending is not None:
            p = self.pending
            if p.tau == 0:
                # Back-to-back Choice visits with no action in between:
                # undiscounted backup, outside choice_update's tau >= 1 domain.
                key = (p.obs, p.choice_ref, p.edge)
                self.qtable.values[key] = q_backup(
                    self.qtable.values.get(key, 0.0), self.qtable.alpha,
                    p.reward, self.qtable.gamma,
                    self.qtable.best_value(obs, ref), tau=0)
            else:
                choice_update(self.qtable, p.obs, p.choice_ref, p.edge,
                              p.reward, p.tau, obs, ref)
            self.pending = None
        policy = self.policy_for(machine_id)
        edge = epsilon_greedy(
            self.rng, policy.epsilon, list(successors),
            lambda e: self.qtable.q(obs, ref, e))
        if policy.learn:
            self.pending = _Pending(obs=obs, choice_ref=ref, edge=edge)
        return edge

    def on_reward(self, reward: float) -> None:
        if self.pending is not None:
            p = self.pending
            p.reward += p.discount * reward
            p.discount *= self.qtable.gamma
            p.tau += 1

    def finish_episode(self) -> None:
        if self.pending is not None:
            p = self.pending
            choice_update(self.qtable, p.obs, p.choice_ref, p.edge,
                          p.reward, max(p.tau, 1), p.obs, None)
            self.pending = None


@dataclass(frozen=True)
class RunResult:
    total_reward: float
    discounted_return: float
    steps: int
    terminated: bool  # True: environment done; False: machine reached Stop


class _Walker:
    def __init__(self, library: MachineLibrary, session: BlocksEpisode,
                 learner: ChoiceLearner):
        self.library = library
        self.session = session
        self.learner = learner
        self.total_reward = 0.0
        self.discounted = 0.0
        self.discount = 1.0
        self.steps = 0

    def run(self, graph: MachineGraph, machine_id: str) -> bool:
        """Walk a machine; True means the environment episode ended."""
        v = graph.start_vertex()
        steps_at_dispatch: int | None = None
        while True:
            vert = graph.vertices[v]
            if vert.type is VertexType.STOP:
                return False
            if vert.type is VertexType.START:
                v = graph.single_successor(v)
            elif vert.type is VertexType.ACTION:
                outcome = self.session.step(vert.action)
                self.total_reward += outcome.reward
                self.discounted += self.discount * outcome.reward
                self.discount *= self.learner.qtable.gamma
                self.steps += 1
                self.learner.on_reward(outcome.reward)
                if outcome.done:
                    return True
                v = graph.single_successor(v)
            elif vert.type is VertexType.CHOICE:
                obs = self.session.observation()
                v = self.learner.on_choice(
                    machine_id, v, graph.successors(v), obs)
            elif vert.type is VertexType.CALL:
                callee = self.library.get(vert.machine)
                _require_valid(callee)
                if self.run(callee, vert.machine):
                    return True
                v = graph.single_successor(v)
            elif vert.type is VertexType.DISPATCH:
                if graph.dispatch is None:
                    raise MachineError("Dispatch vertex without routing table")
                if steps_at_dispatch == self.steps:
                    raise MachineStall(
                        "dispatched machine made no environment progress")
                steps_at_dispatch = self.steps
                v = graph.dispatch.target(self.session.cluster())
            else:  # pragma: no cover - enum is closed
                raise MachineError(f"unhandled vertex type {vert.type}")


def _require_valid(graph: MachineGraph) -> None:
    report = validate(graph)
    if not report.ok:
        raise MachineError(
            "run_machine on invalid graph: " + "; ".join(report.violations))


def run_machine(graph: MachineGraph, library: MachineLibrary,
                env_session: BlocksEpisode, qtable: ChoiceQTable,
                epsilon: float, rng: random.Random, learn: bool = True,
                *, machine_id: str = "machine",
                learner: ChoiceLearner | None = None) -> RunResult:
    """Execute a machine on a live episode, learning at its Choice points.

    A persistent learner may be passed so the between-Choice update window
    spans repeated invocations within one episode; otherwise a throwaway
    learner is used and any reward after the final Choice flows into the
    terminal update only when the episode actually ends here.
    """
    _require_valid(graph)
    if env_session.done:
        raise MachineError("run_machine on a terminated episode")
    if learner is None:
        learner = ChoiceLearner(qtable, rng, epsilon, learn)
    walker = _Walker(library, env_session, learner)
    try:
        ended = walker.run(graph, machine_id)
    except MachineStall as exc:
        raise MachineStall(
            str(exc),
            RunResult(walker.total_reward, walker.discounted, walker.steps,
                      terminated=False)) from None
    if ended:
        # Pending updates exist only for learn-enabled machines, so the
        # terminal backup is safe to flush unconditionally.
        learner.finish_episode()
    return RunResult(
        total_reward=walker.total_reward,
        discounted_return=walker.discounted,
        steps=walker.steps,
        terminated=ended,
    )


def run_episode(graph: MachineGraph, library: MachineLibrary,
                session: BlocksEpisode, learner: ChoiceLearner,
                machine_id: str = "root") -> RunResult:
    """Drive a machine until the episode ends, re-invoking it each time it
    stops. Guards against machines that stop without acting."""
    total = 0.0
    discounted = 0.0
    steps = 0
    while not session.done:
        try:
            result = run_machine(
                graph, library, session, learner.qtable, 0.0, learner.rng,
                machine_id=machine_id, learner=learner)
        except MachineStall as exc:
            partial = exc.partial or RunResult(0.0, 0.0, 0, False)
            raise MachineStall(
                str(exc),
                RunResult(total + partial.total_reward,
                          discounted + partial.discounted_return,
                          steps + partial.steps, terminated=False)) from None
        total += result.total_reward
        discounted += result.discounted_return
        steps += result.steps
        if not result.terminated and result.steps == 0:
            raise MachineStall(
                f"machine {machine_id!r} stopped without acting",
                RunResult(total, discounted, steps, terminated=False))
    return RunResult(total, discounted, steps, terminated=True)


def build_root(cluster_map: Mapping[ClusterKey, str],
               library: MachineLibrary) -> MachineGraph:
    """Dispatcher machine: Start -> Dispatch -> Call(machine for the current
    cluster) -> Dispatch, until the episode ends. Clusters without a machine
    fall back to the standard machine, which must be in the library."""
    if M_STD_ID not in library:
        raise LibraryError(f"library must contain {M_STD_ID!r} for fallback")
    for cluster, machine_id in cluster_map.items():
        if machine_id not in library:
            raise LibraryError(
                f"cluster {cluster} maps to unknown machine {machine_id!r}")
    machine_ids = sorted(set(cluster_map.values()) | {M_STD_ID})
    vertices = [start(), dispatch()]
    call_vertex: dict[str, int] = {}
    for mid in machine_ids:
        call_vertex[mid] = len(vertices)
        vertices.append(call(mid))
    edges = {(0, 1)}
    for mid in machine_ids:
        edges.add((1, call_vertex[mid]))
        edges.add((call_vertex[mid], 1))
    entries = tuple(
        (cluster, call_vertex[cluster_map[cluster]])
        for cluster in sorted(cluster_map,
                              key=lambda c: (c.manip_height, c.holding)))
    return MachineGraph(
        vertices=tuple(vertices),
        edges=frozenset(edges),
        episode_bounded=True,
        dispatch=DispatchTable(entries=entries, fallback=call_vertex[M_STD_ID]),
    )
