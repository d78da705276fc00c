"""Baseline training, applicability checks, and the pruning stage."""
from __future__ import annotations

import pytest

from hamforge.blocks_env import BlocksAction, ClusterKey
from hamforge.flat_q import train as flat_train
from hamforge.ham_core import (
    MachineGraph,
    action,
    start,
    stop,
)
from hamforge.machine_gen import build_standard_machine, canonical_form
from hamforge.pruning import (
    ApplicabilityBudget,
    NormalizationError,
    check_applicability,
    ham_train,
    normalize,
    prune,
    read_pruned_manifest,
    train_baseline,
    write_pruned_manifest,
)
from hamforge.qlearn import Hyper
from conftest import ENV_TRAIN_1

A = BlocksAction
HYPER = Hyper(alpha=0.1, gamma=0.99, epsilon=0.1)
BUDGET = ApplicabilityBudget(train_episodes=150, eval_episodes=10,
                             convergence_window=30, success_fraction=0.7)


def chain(*actions: BlocksAction) -> MachineGraph:
    vertices = [start(), *(action(a) for a in actions), stop()]
    edges = {(i, i + 1) for i in range(len(vertices) - 1)}
    return MachineGraph(tuple(vertices), frozenset(edges))


@pytest.fixture(scope="module")
def baseline():
    return train_baseline([ENV_TRAIN_1], BUDGET, HYPER, seed=0)


class TestTrainBaseline:
    def test_baseline_solves_training_env(self, baseline):
        assert baseline.env_max[0] > 99

    def test_equals_flat_q_learning(self, baseline):
        # the all-standard dispatcher is flat Q-learning in disguise
        from hamforge.qlearn import derive_seed
        _, flat_curve = flat_train(
            ENV_TRAIN_1, BUDGET.train_episodes, HYPER.alpha, HYPER.gamma,
            HYPER.epsilon, seed=derive_seed(0, "baseline", 0))
        assert [r.reward for r in flat_curve.records] == \
            [r.reward for r in baseline.curves[0].records]

    def test_represented_clusters_gathered(self, baseline):
        clusters = baseline.common_clusters()
        assert ClusterKey(3, False) in clusters  # the start cluster
        assert all(c.manip_height < 4 for c in clusters)
        assert ClusterKey(0, True) not in clusters  # holding needs height>=1

    def test_determinism(self):
        small = ApplicabilityBudget(train_episodes=30, eval_episodes=5,
                                    convergence_window=10,
                                    success_fraction=0.7)
        b1 = train_baseline([ENV_TRAIN_1], small, HYPER, seed=5)
        b2 = train_baseline([ENV_TRAIN_1], small, HYPER, seed=5)
        assert b1.qtable.values == b2.qtable.values
        b3 = train_baseline([ENV_TRAIN_1], small, HYPER, seed=6)
        assert b3.qtable.values != b1.qtable.values


class TestNormalize:
    def test_scaling(self):
        assert normalize(50.0, 100.0) == 0.5
        assert normalize(100.0, 100.0) == 1.0
        assert normalize(0.0, 100.0) == 0.0

    def test_unsolved_env_errors(self):
        with pytest.raises(NormalizationError):
            normalize(10.0, 0.0)
        with pytest.raises(NormalizationError):
            normalize(10.0, -0.002)


class TestCheckApplicability:
    def test_standard_machine_applies_to_itself(self, baseline):
        ok = check_applicability(
            build_standard_machine(), ClusterKey(3, False), baseline,
            [ENV_TRAIN_1], BUDGET, HYPER, seed=1)
        assert ok

    def test_toggle_forever_machine_rejected(self, baseline):
        # in the start cluster this machine toggles in place and the
        # episode can never build a tower
        toggler = chain(A.TOGGLE_MAGNET)
        ok = check_applicability(
            toggler, ClusterKey(3, False), baseline, [ENV_TRAIN_1],
            BUDGET, HYPER, seed=1)
        assert not ok

    def test_noop_machine_stalls_and_fails(self, baseline):
        noop = MachineGraph((start(), stop()), frozenset([(0, 1)]))
        ok = check_applicability(
            noop, ClusterKey(3, False), baseline, [ENV_TRAIN_1],
            BUDGET, HYPER, seed=1)
        assert not ok

    def test_baseline_entries_never_written(self, baseline):
        before = dict(baseline.qtable.values)
        check_applicability(
            chain(A.DOWN, A.TOGGLE_MAGNET), ClusterKey(2, False), baseline,
            [ENV_TRAIN_1], BUDGET, HYPER, seed=2)
        assert baseline.qtable.values == before

    def test_descend_and_grab_macro_applies(self, baseline):
        # from the start cluster: drop two rows toward the cubes; the rest
        # of the episode runs on the expert baseline
        macro = chain(A.DOWN, A.DOWN)
        ok = check_applicability(
            macro, ClusterKey(3, False), baseline, [ENV_TRAIN_1],
            BUDGET, HYPER, seed=3)
        assert ok


class TestPrune:
    def test_prune_keeps_workers_and_drops_junk(self, baseline):
        mstd = build_standard_machine()
        noop = MachineGraph((start(), stop()), frozenset([(0, 1)]))
        candidates = [mstd, noop]
        pruned = prune(candidates, baseline.common_clusters(), baseline,
                       [ENV_TRAIN_1], BUDGET, HYPER, seed=0)
        assert pruned.clusters() == baseline.common_clusters()
        start_cluster = ClusterKey(3, False)
        kept = {canonical_form(g) for g in pruned.machines(start_cluster)}
        assert canonical_form(mstd) in kept
        assert canonical_form(noop) not in kept

    def test_empty_candidate_stream(self, baseline):
        pruned = prune([], baseline.common_clusters(), baseline,
                       [ENV_TRAIN_1], BUDGET, HYPER, seed=0)
        assert all(pruned.machines(c) == [] for c in pruned.clusters())

    def test_unrepresented_clusters_skipped(self, baseline):
        ghost = ClusterKey(9, False)
        pruned = prune([build_standard_machine()], [ghost], baseline,
                       [ENV_TRAIN_1], BUDGET, HYPER, seed=0)
        assert ghost not in pruned.by_cluster

    def test_rerun_reproducible(self, baseline):
        small = ApplicabilityBudget(train_episodes=40, eval_episodes=5,
                                    convergence_window=10,
                                    success_fraction=0.7)
        candidates = [build_standard_machine(), chain(A.DOWN, A.DOWN)]
        clusters = [ClusterKey(3, False)]
        p1 = prune(candidates, clusters, baseline, [ENV_TRAIN_1], small,
                   HYPER, seed=4)
        p2 = prune(candidates, clusters, baseline, [ENV_TRAIN_1], small,
                   HYPER, seed=4)
        assert {c: [canonical_form(g) for g in p1.machines(c)]
                for c in p1.clusters()} == \
               {c: [canonical_form(g) for g in p2.machines(c)]
                for c in p2.clusters()}

    def test_parallel_jobs_match_serial(self, baseline):
        small = ApplicabilityBudget(train_episodes=30, eval_episodes=5,
                                    convergence_window=10,
                                    success_fraction=0.7)
        candidates = [build_standard_machine(),
                      MachineGraph((start(), stop()), frozenset([(0, 1)]))]
        clusters = [ClusterKey(3, False), ClusterKey(2, False)]
        serial = prune(candidates, clusters, baseline, [ENV_TRAIN_1],
                       small, HYPER, seed=4, jobs=1)
        parallel = prune(candidates, clusters, baseline, [ENV_TRAIN_1],
                         small, HYPER, seed=4, jobs=2)
        for cluster in serial.clusters():
            assert [canonical_form(g) for g in serial.machines(cluster)] == \
                [canonical_form(g) for g in parallel.machines(cluster)]


class TestManifest:
    def test_round_trip(self, tmp_path, baseline):
        mstd = build_standard_machine()
        macro = chain(A.DOWN, A.TOGGLE_MAGNET)
        pruned = prune([], [], baseline, [ENV_TRAIN_1], BUDGET, HYPER)
        pruned.by_cluster = {
            ClusterKey(3, False): [mstd],
            ClusterKey(1, True): [macro, mstd],
        }
        manifest = write_pruned_manifest(pruned, tmp_path)
        text = manifest.read_text()
        assert "cluster 3 0 machine" in text
        assert "cluster 1 1 machine" in text
        back = read_pruned_manifest(manifest)
        for cluster in pruned.clusters():
            assert [canonical_form(g) for g in back.machines(cluster)] == \
                [canonical_form(g) for g in pruned.machines(cluster)]
