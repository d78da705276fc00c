"""Exhaustive generation of candidate machines under vertex budgets.

Machines are enumerated multiset-by-multiset: for every admissible bag of
vertex kinds, every per-vertex successor assignment satisfying the degree
rules is produced, filtered through full structural validation, and
deduplicated by canonical form (kind-preserving relabelings collapse to
one representative). Streams are lazy and deterministic.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

from .blocks_env import ACTIONS, BlocksAction
from .ham_core import (
    MachineError,
    MachineGraph,
    Vertex,
    VertexType,
    action,
    call,
    choice,
    format_machine_text,
    start,
    stop,
    validate,
)

_KIND_RANK = {
    VertexType.START: 0,
    VertexType.CHOICE: 1,
    VertexType.ACTION: 2,
    VertexType.CALL: 3,
    VertexType.DISPATCH: 4,
    VertexType.STOP: 5,
}


def vertex_sort_key(v: Vertex) -> tuple:
    action_rank = ACTIONS.index(v.action) if v.action is not None else -1
    return (_KIND_RANK[v.type], action_rank, v.machine or "")


@dataclass(frozen=True)
class GenParams:
    """Budgets for the search space: one Start and one Stop are implicit.

    Per-action caps default to max_per_action; action_caps overrides
    individual kinds. Call vertices join the pool only when include_call
    is set and call_targets names the callable machines.
    """

    max_vertices: int
    actions: tuple[BlocksAction, ...] = ACTIONS
    max_per_action: int = 1
    action_caps: tuple[tuple[BlocksAction, int], ...] = ()
    max_choice: int = 1
    include_call: bool = False
    call_targets: tuple[str, ...] = ()

    def action_cap(self, a: BlocksAction) -> int:
        for kind, cap in self.action_caps:
            if kind is a:
                return cap
        return self.max_per_action

    def check(self) -> None:
        if self.max_vertices < 2:
            raise MachineError("max_vertices must be at least 2")
        if self.include_call and not self.call_targets:
            raise MachineError("include_call requires call_targets")


def enumerate_vertex_sets(params: GenParams) -> Iterator[tuple[Vertex, ...]]:
    """All admissible vertex multisets, smallest first, each sorted into
    canonical vertex order (Start, Choices, Actions, Calls, Stop)."""
    params.check()
    pool: list[tuple[Vertex, int]] = [(choice(), params.max_choice)]
    for a in sorted(params.actions, key=ACTIONS.index):
        pool.append((action(a), params.action_cap(a)))
    if params.include_call:
        for target in sorted(params.call_targets):
            pool.append((call(target), 1))

    budget = params.max_vertices - 2
    ranges = [range(min(cap, budget) + 1) for _, cap in pool]
    multisets = []
    for counts in itertools.product(*ranges):
        if sum(counts) > budget:
            continue
        extras: list[Vertex] = []
        for (vertex, _), count in zip(pool, counts):
            extras.extend([vertex] * count)
        members = tuple(
            sorted([start(), stop(), *extras], key=vertex_sort_key))
        multisets.append(members)
    multisets.sort(key=lambda ms: (len(ms), tuple(map(vertex_sort_key, ms))))
    yield from multisets


def _successor_options(vertices: Sequence[Vertex]) -> list[list[tuple[int, ...]]]:
    """Per-vertex lists of admissible successor tuples, in sorted order."""
    n = len(vertices)
    options: list[list[tuple[int, ...]]] = []
    for i, v in enumerate(vertices):
        if v.type is VertexType.STOP:
            options.append([()])
            continue
        targets = [j for j in range(n)
                   if j != i and vertices[j].type is not VertexType.START]
        if v.type is VertexType.CHOICE:
            cands = [j for j in targets
                     if vertices[j].type is not VertexType.STOP]
            opts = []
            for size in range(2, len(cands) + 1):
                opts.extend(itertools.combinations(cands, size))
            options.append(opts)
        else:  # START, ACTION, CALL: exactly one outgoing edge
            options.append([(j,) for j in targets])
    return options


def enumerate_machines(params: GenParams) -> Iterator[MachineGraph]:
    """Lazy, deterministic stream of all valid machines within the budget,
    one representative per canonical form."""
    seen: set[str] = set()
    for vertices in enumerate_vertex_sets(params):
        options = _successor_options(vertices)
        for assignment in itertools.product(*options):
            edges = frozenset(
                (i, t) for i, succs in enumerate(assignment) for t in succs)
            graph = MachineGraph(vertices=vertices, edges=edges)
            if not validate(graph).ok:
                continue
            form = canonical_form(graph)
            if form in seen:
                continue
            seen.add(form)
            yield graph


def build_standard_machine(
        actions: Sequence[BlocksAction] = ACTIONS) -> MachineGraph:
    """Single-Choice machine: one Action successor per primitive action,
    each leading to Stop. Invoked repeatedly it is flat action selection."""
    kinds = sorted(set(actions), key=ACTIONS.index)
    if len(kinds) < 2:
        raise MachineError(
            "standard machine needs at least two actions for the Choice")
    vertices = [start(), choice()]
    vertices.extend(action(a) for a in kinds)
    stop_id = len(vertices)
    vertices.append(stop())
    edges = {(0, 1)}
    for i in range(len(kinds)):
        edges.add((1, 2 + i))
        edges.add((2 + i, stop_id))
    graph = MachineGraph(tuple(vertices), frozenset(edges))
    report = validate(graph)
    if not report.ok:  # pragma: no cover - construction is fixed
        raise MachineError("standard machine failed validation: "
                           + "; ".join(report.violations))
    return graph


def canonicalize(graph: MachineGraph) -> MachineGraph:
    """Relabel vertices into canonical order, minimizing the edge list over
    the automorphisms of equal-kind blocks, so isomorphic machines collide."""
    if graph.dispatch is not None:
        raise MachineError("dispatch graphs are not canonicalized")
    n = len(graph.vertices)
    order = sorted(range(n), key=lambda i: vertex_sort_key(graph.vertices[i]))

    blocks: list[list[int]] = []
    for i, old in enumerate(order):
        key = vertex_sort_key(graph.vertices[old])
        if i and key == vertex_sort_key(graph.vertices[order[i - 1]]):
            blocks[-1].append(old)
        else:
            blocks.append([old])

    block_starts = []
    pos = 0
    for block in blocks:
        block_starts.append(pos)
        pos += len(block)

    best_edges: tuple[tuple[int, int], ...] | None = None
    for perms in itertools.product(*[itertools.permutations(b) for b in blocks]):
        new_id = {}
        for block_pos, perm in zip(block_starts, perms):
            for offset, old in enumerate(perm):
                new_id[old] = block_pos + offset
        relabeled = tuple(sorted((new_id[f], new_id[t]) for f, t in graph.edges))
        if best_edges is None or relabeled < best_edges:
            best_edges = relabeled

    vertices = tuple(graph.vertices[old] for old in order)
    return MachineGraph(vertices, frozenset(best_edges or ()),
                        episode_bounded=graph.episode_bounded)


def canonical_form(graph: MachineGraph) -> str:
    """Canonical text encoding; equal exactly for isomorphic machines."""
    return format_machine_text(canonicalize(graph))
