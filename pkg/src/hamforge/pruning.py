"""Training harness and applicability pruning for candidate machines.

A frozen all-standard baseline is trained first; a candidate is applicable
to a cluster when substituting it for the standard machine in that cluster
alone still lets learning converge within a small budget. Returns are
normalized per environment against the best episode reward the baseline
achieved there.
"""
from __future__ import annotations

import hashlib
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .blocks_env import BlocksConfig, BlocksEpisode, ClusterKey
from .flat_q import LearningCurve, episode_epsilon
from .ham_core import (
    M_STD_ID,
    ChoiceLearner,
    ChoiceQTable,
    MachineGraph,
    MachineLibrary,
    MachinePolicy,
    MachineStall,
    build_root,
    parse_machine_text,
    run_episode,
)
from .machine_gen import build_standard_machine, canonical_form
from .qlearn import Hyper, derive_seed


class NormalizationError(Exception):
    """Raised when an environment has no positive baseline reward to
    normalize against (the baseline never solved it)."""


def normalize(reward: float, baseline_max: float) -> float:
    if baseline_max <= 0:
        raise NormalizationError(
            f"baseline max {baseline_max!r} is not positive; "
            "environment unsolved by baseline")
    return reward / baseline_max


def ham_train(root: MachineGraph, library: MachineLibrary,
              config: BlocksConfig, episodes: int, qtable: ChoiceQTable,
              epsilon: float, seed: int, *,
              policies: Mapping[str, MachinePolicy] | None = None,
              epsilon_decay: bool = False,
              normalizer: float | None = None,
              root_id: str = "root",
              census: set[ClusterKey] | None = None,
              step_log: list | None = None) -> LearningCurve:
    """Run HAM learning episodes; mirrors flat_q.train's seed and draw
    discipline exactly (one sub-seed per reset, one epsilon-greedy draw
    pattern per step) so all-standard dispatch reproduces the flat run.

    Episodes that stall (a dispatched machine stops without acting) are
    recorded with the reward accumulated up to the stall.
    """
    rng = random.Random(seed)
    learner = ChoiceLearner(qtable, rng, epsilon, learn=True,
                            policies=policies)
    totals: list[tuple[float, int]] = []
    for ep in range(episodes):
        learner.default = MachinePolicy(
            episode_epsilon(epsilon, ep, episodes, epsilon_decay), True)
        session = BlocksEpisode(config, rng.getrandbits(32))
        learner.begin_episode()
        try:
            result = run_episode(root, library, session, learner,
                                 machine_id=root_id)
        except MachineStall as exc:
            result = exc.partial
        totals.append((result.total_reward, result.steps))
        if census is not None:
            census.update(session.clusters_seen)
        if step_log is not None:
            step_log.extend(session.actions_taken)
    scale = normalizer if normalizer is not None else max(
        (t for t, _ in totals if t > 0), default=0.0)
    curve = LearningCurve()
    for ep, (total, steps) in enumerate(totals):
        curve.append(ep, total, steps, total / scale if scale > 0 else 0.0)
    return curve


@dataclass(frozen=True)
class ApplicabilityBudget:
    """train_episodes of learning per env; converged when the mean
    normalized return over the trailing convergence_window meets
    success_fraction, confirmed over eval_episodes more episodes."""

    train_episodes: int = 500
    eval_episodes: int = 10
    convergence_window: int = 50
    success_fraction: float = 0.95

    def check(self) -> None:
        if min(self.train_episodes, self.eval_episodes,
               self.convergence_window) < 1:
            raise ValueError("budget counts must be positive")
        if self.convergence_window > self.train_episodes:
            raise ValueError("convergence_window exceeds train_episodes")
        if not 0 < self.success_fraction <= 1:
            raise ValueError("success_fraction must be in (0, 1]")


@dataclass
class BaselineResult:
    """Frozen product of all-standard training: the Q-table, per-env best
    episode rewards (the normalization constants), training curves, and
    the clusters each environment exposed."""

    qtable: ChoiceQTable
    env_max: list[float]
    curves: list[LearningCurve]
    represented: list[set[ClusterKey]]

    def common_clusters(self) -> list[ClusterKey]:
        """Clusters represented in every training environment."""
        if not self.represented:
            return []
        common = set.intersection(*self.represented)
        return sorted(common, key=lambda c: (c.manip_height, c.holding))


def standard_library() -> MachineLibrary:
    return MachineLibrary({M_STD_ID: build_standard_machine()})


def train_baseline(envs: Sequence[BlocksConfig], budget: ApplicabilityBudget,
                   hyper: Hyper = Hyper(), seed: int = 0) -> BaselineResult:
    """Train the all-standard dispatcher on every env with one shared table.
    Equals flat Q-learning trajectory for trajectory."""
    if not envs:
        raise ValueError("need at least one training environment")
    budget.check()
    library = standard_library()
    root = build_root({}, library)
    qtable = ChoiceQTable(alpha=hyper.alpha, gamma=hyper.gamma)
    env_max: list[float] = []
    curves: list[LearningCurve] = []
    represented: list[set[ClusterKey]] = []
    for env_i, config in enumerate(envs):
        census: set[ClusterKey] = set()
        curve = ham_train(
            root, library, config, budget.train_episodes, qtable,
            hyper.epsilon, derive_seed(seed, "baseline", env_i),
            census=census)
        env_max.append(curve.max_reward())
        curves.append(curve)
        represented.append(census)
    return BaselineResult(qtable=qtable, env_max=env_max, curves=curves,
                          represented=represented)


@dataclass
class SolutionRun:
    """Outcome of training a cluster->machine solution over the envs."""

    per_env_normalized: list[list[float]]
    qtable: ChoiceQTable
    library: MachineLibrary
    root: MachineGraph

    def all_normalized(self) -> list[float]:
        return [x for env in self.per_env_normalized for x in env]

    def mean_normalized(self) -> float:
        values = self.all_normalized()
        return sum(values) / len(values) if values else 0.0


def machine_file_id(graph: MachineGraph) -> str:
    digest = hashlib.blake2b(
        canonical_form(graph).encode(), digest_size=6).hexdigest()
    return f"m_{digest}"


def run_solution_training(cluster_map: Mapping[ClusterKey, MachineGraph],
                          baseline: BaselineResult,
                          envs: Sequence[BlocksConfig], episodes: int,
                          hyper: Hyper, seed: int, *,
                          qtable: ChoiceQTable | None = None) -> SolutionRun:
    """Train a dispatch solution starting from the trained baseline.

    Clusters outside cluster_map fall back to the standard machine, whose
    choice values are warm-started from the baseline table; learning runs
    on a working copy, so the baseline's own entries are never touched.
    Per-episode returns are normalized by the baseline max of each env.
    """
    library = standard_library()
    assignment: dict[ClusterKey, str] = {}
    for cluster in sorted(cluster_map, key=lambda c: (c.manip_height, c.holding)):
        graph = cluster_map[cluster]
        mid = machine_file_id(graph)
        library.add(mid, graph)
        assignment[cluster] = mid
    root = build_root(assignment, library)
    if qtable is None:
        qtable = baseline.qtable.copy()
    per_env: list[list[float]] = []
    for env_i, config in enumerate(envs):
        scale = baseline.env_max[env_i]
        if scale <= 0:
            raise NormalizationError(
                f"training env {env_i} has no positive baseline reward")
        curve = ham_train(
            root, library, config, episodes, qtable, hyper.epsilon,
            derive_seed(seed, "env", env_i), normalizer=scale)
        per_env.append([rec.normalized for rec in curve.records])
    return SolutionRun(per_env_normalized=per_env, qtable=qtable,
                       library=library, root=root)


def check_applicability(candidate: MachineGraph, cluster: ClusterKey,
                        baseline: BaselineResult,
                        envs: Sequence[BlocksConfig],
                        budget: ApplicabilityBudget,
                        hyper: Hyper = Hyper(), seed: int = 0) -> bool:
    """True when learning with the candidate dispatched for this cluster
    (all other clusters warm-started on the baseline standard machine)
    converges within the budget and holds up over the confirmation
    episodes. The baseline table itself is read-only throughout."""
    budget.check()
    run = run_solution_training(
        {cluster: candidate}, baseline, envs, budget.train_episodes,
        hyper, derive_seed(seed, "train"))
    window_means = []
    for values in run.per_env_normalized:
        window = values[-budget.convergence_window:]
        window_means.append(sum(window) / len(window))
    if sum(window_means) / len(window_means) < budget.success_fraction:
        return False

    confirm = []
    for env_i, config in enumerate(envs):
        curve = ham_train(
            run.root, run.library, config, budget.eval_episodes, run.qtable,
            hyper.epsilon, derive_seed(seed, "confirm", env_i),
            normalizer=baseline.env_max[env_i])
        confirm.extend(rec.normalized for rec in curve.records)
    return sum(confirm) / len(confirm) >= budget.success_fraction


@dataclass
class PrunedSet:
    """Applicable machines per cluster, each list in canonical-form order."""

    by_cluster: dict[ClusterKey, list[MachineGraph]] = field(
        default_factory=dict)

    def clusters(self) -> list[ClusterKey]:
        return sorted(self.by_cluster, key=lambda c: (c.manip_height, c.holding))

    def machines(self, cluster: ClusterKey) -> list[MachineGraph]:
        return self.by_cluster.get(cluster, [])


def _check_one(args) -> tuple[int, int, bool]:
    (cluster_i, cand_i, candidate, cluster, baseline, envs, budget, hyper,
     seed) = args
    ok = check_applicability(candidate, cluster, baseline, envs, budget,
                             hyper, seed)
    return cluster_i, cand_i, ok


def prune(candidates: Iterable[MachineGraph], clusters: Iterable[ClusterKey],
          baseline: BaselineResult, envs: Sequence[BlocksConfig],
          budget: ApplicabilityBudget, hyper: Hyper = Hyper(),
          seed: int = 0, jobs: int = 1) -> PrunedSet:
    """Applicability-filter the candidate stream for every cluster that is
    represented in all training environments; the rest are skipped."""
    candidate_list = list(candidates)
    common = set(baseline.common_clusters())
    eligible = sorted((c for c in set(clusters) if c in common),
                      key=lambda c: (c.manip_height, c.holding))
    work = []
    for cluster_i, cluster in enumerate(eligible):
        for cand_i, candidate in enumerate(candidate_list):
            work.append((cluster_i, cand_i, candidate, cluster, baseline,
                         envs, budget, hyper,
                         derive_seed(seed, "prune", str(cluster), cand_i)))
    if jobs > 1 and work:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_check_one, work, chunksize=4))
    else:
        results = [_check_one(item) for item in work]

    passed: dict[int, list[int]] = {}
    for cluster_i, cand_i, ok in results:
        if ok:
            passed.setdefault(cluster_i, []).append(cand_i)
    pruned = PrunedSet()
    for cluster_i, cluster in enumerate(eligible):
        machines = [candidate_list[i] for i in sorted(passed.get(cluster_i, []))]
        machines.sort(key=canonical_form)
        pruned.by_cluster[cluster] = machines
    return pruned


def write_pruned_manifest(pruned: PrunedSet, out_dir: str | Path,
                          machines_dir: str = "machines") -> Path:
    """Write one canonical machine file per machine plus the manifest
    (`cluster <height> <hold> machine <file>` lines)."""
    out = Path(out_dir)
    mdir = out / machines_dir
    mdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for cluster in pruned.clusters():
        for graph in pruned.machines(cluster):
            name = machine_file_id(graph) + ".machine"
            (mdir / name).write_text(canonical_form(graph))
            lines.append(
                f"cluster {cluster.manip_height} {int(cluster.holding)} "
                f"machine {machines_dir}/{name}")
    manifest = out / "pruned_manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_pruned_manifest(manifest_path: str | Path) -> PrunedSet:
    manifest = Path(manifest_path)
    pruned = PrunedSet()
    for raw in manifest.read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] != "cluster" or parts[3] != "machine":
            raise ValueError(f"bad manifest line: {line!r}")
        cluster = ClusterKey(int(parts[1]), bool(int(parts[2])))
        graph = parse_machine_text(
            (manifest.parent / parts[4]).read_text())
        pruned.by_cluster.setdefault(cluster, []).append(graph)
    return pruned
