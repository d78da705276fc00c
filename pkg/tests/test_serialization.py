"""Canonical text format, DOT export, and the appendix machine fixtures."""
from __future__ import annotations

from pathlib import Path

import pytest

from hamforge.blocks_env import BlocksAction, ClusterKey
from hamforge.ham_core import (
    M_STD_ID,
    DispatchTable,
    MachineError,
    MachineGraph,
    MachineLibrary,
    action,
    build_root,
    call,
    choice,
    format_machine_text,
    from_dot,
    parse_machine_text,
    start,
    stop,
    to_dot,
    validate,
)
from hamforge.machine_gen import (
    GenParams,
    build_standard_machine,
    canonical_form,
    canonicalize,
    enumerate_machines,
)

A = BlocksAction
FIXTURES = Path(__file__).parent / "fixtures"


def fixture_graphs():
    return {path.stem: parse_machine_text(path.read_text())
            for path in sorted(FIXTURES.glob("*.machine"))}


class TestTextFormat:
    def test_round_trip_every_enumerated_machine(self):
        for graph in enumerate_machines(GenParams(max_vertices=4)):
            text = format_machine_text(graph)
            assert parse_machine_text(text) == graph
            assert format_machine_text(parse_machine_text(text)) == text

    def test_round_trip_with_flag_and_dispatch(self):
        root = build_root(
            {ClusterKey(2, True): M_STD_ID},
            MachineLibrary({M_STD_ID: build_standard_machine()}))
        text = format_machine_text(root)
        assert "flag episode_bounded" in text
        assert parse_machine_text(text) == root

    def test_call_vertex_round_trip(self):
        g = MachineGraph(
            (start(), call("helper"), stop()),
            frozenset([(0, 1), (1, 2)]))
        assert parse_machine_text(format_machine_text(g)) == g

    def test_bad_lines_rejected(self):
        with pytest.raises(MachineError):
            parse_machine_text("v 1 start\n")  # ids must start at 0
        with pytest.raises(MachineError):
            parse_machine_text("v 0 start\nx nonsense\n")
        with pytest.raises(MachineError):
            parse_machine_text("v 0 start\nflag wat\n")


class TestDotExport:
    def test_dot_contains_labels_and_edges(self):
        mstd = build_standard_machine()
        dot = to_dot(mstd, "mstd")
        assert dot.startswith("digraph mstd {")
        assert '[label="Choice", shape=diamond]' in dot
        assert '[label="ToggleMagnet"' in dot
        assert "v0 -> v1;" in dot

    def test_dot_round_trip(self):
        for graph in enumerate_machines(GenParams(max_vertices=4)):
            assert from_dot(to_dot(graph)) == graph

    def test_dot_round_trip_with_call(self):
        g = MachineGraph(
            (start(), call("sub_machine"), stop()),
            frozenset([(0, 1), (1, 2)]))
        assert from_dot(to_dot(g)) == g


class TestAppendixFixtures:
    def test_standard_machine_shape_matches_figure(self):
        mstd = build_standard_machine()
        kinds = [v.type.value for v in mstd.vertices]
        assert kinds.count("start") == 1
        assert kinds.count("choice") == 1
        assert kinds.count("action") == 5
        assert kinds.count("stop") == 1
        assert validate(mstd).ok

    def test_cluster_fixtures_validate_in_relaxed_mode(self):
        graphs = fixture_graphs()
        assert set(graphs) == {"cluster_h0_free", "cluster_h1_hold",
                               "cluster_h2_hold"}
        for name, graph in graphs.items():
            assert validate(graph).ok, name

    def test_fixtures_round_trip_text_and_dot(self):
        for name, graph in fixture_graphs().items():
            text = format_machine_text(graph)
            assert parse_machine_text(text) == graph, name
            assert from_dot(to_dot(graph)) == graph, name

    def test_fixture_files_are_canonical(self):
        for path in sorted(FIXTURES.glob("*.machine")):
            graph = parse_machine_text(path.read_text())
            assert canonical_form(graph) == path.read_text()


class TestCanonicalize:
    def test_relabeling_same_kind_vertices_collides(self):
        # two Right actions in a chain: identity of the two vertices is
        # interchangeable once edges are relabeled
        g1 = MachineGraph(
            (start(), action(A.RIGHT), action(A.RIGHT), stop()),
            frozenset([(0, 1), (1, 2), (2, 3)]))
        g2 = MachineGraph(
            (start(), action(A.RIGHT), action(A.RIGHT), stop()),
            frozenset([(0, 2), (2, 1), (1, 3)]))
        assert canonical_form(g1) == canonical_form(g2)

    def test_different_actions_stay_distinct(self):
        g1 = MachineGraph((start(), action(A.RIGHT), stop()),
                          frozenset([(0, 1), (1, 2)]))
        g2 = MachineGraph((start(), action(A.DOWN), stop()),
                          frozenset([(0, 1), (1, 2)]))
        assert canonical_form(g1) != canonical_form(g2)

    def test_vertex_order_normalized(self):
        scrambled = MachineGraph(
            (stop(), start(), action(A.UP)),
            frozenset([(1, 2), (2, 0)]))
        canon = canonicalize(scrambled)
        assert [v.type.value for v in canon.vertices] == \
            ["start", "action", "stop"]
        assert canon.edges == {(0, 1), (1, 2)}

    def test_dispatch_graphs_not_canonicalized(self):
        root = build_root({}, MachineLibrary(
            {M_STD_ID: build_standard_machine()}))
        with pytest.raises(MachineError):
            canonicalize(root)
