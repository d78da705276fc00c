"""End-to-end experiment driver: generate, prune, search, combine, evaluate.

Reproduces the training protocol: train the flat and all-standard baselines,
filter candidate machines per cluster, improve each cluster's machine in the
internal environment, greedily merge the winners, then compare the combined
dispatcher against flat Q-learning on the held-out test environment. Every
stage writes its artifacts (machine files, manifests, CSV curves, a summary,
and rendered figures); all randomness derives from the config seeds, so two
runs produce byte-identical delimited output.
"""
from __future__ import annotations

import configparser
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .blocks_env import ACTION_BY_NAME, BlocksConfig, ClusterKey
from .flat_q import LearningCurve, read_curve_csv, train as flat_train
from .ham_core import (
    M_STD_ID,
    ChoiceQTable,
    MachineGraph,
    build_root,
    parse_machine_text,
)
from .internal_env import (
    EpisodeContext,
    InternalEnv,
    InternalParams,
    SearchOutcome,
    search_cluster,
    write_search_log,
)
from .machine_gen import (
    GenParams,
    build_standard_machine,
    canonical_form,
    enumerate_machines,
)
from .pruning import (
    ApplicabilityBudget,
    BaselineResult,
    MachineLibrary,
    NormalizationError,
    PrunedSet,
    ham_train,
    machine_file_id,
    prune,
    run_solution_training,
    train_baseline,
    write_pruned_manifest,
)
from .qlearn import Hyper, derive_seed

AUC_FLOOR = 1e-6


class StageError(Exception):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def normalize(reward: float, env: BlocksConfig, baseline_max: float) -> float:
    """Reward scaled by the env's best baseline episode; errors when the
    baseline never earned a positive reward there."""
    if baseline_max <= 0:
        raise NormalizationError(
            f"env {env.grid_height}x{env.grid_width} unsolved by baseline "
            f"(max reward {baseline_max!r})")
    return reward / baseline_max


@dataclass
class ExperimentConfig:
    training_envs: list[BlocksConfig]
    test_env: BlocksConfig
    gen: GenParams = field(default_factory=lambda: GenParams(max_vertices=5))
    prune_budget: ApplicabilityBudget = field(
        default_factory=ApplicabilityBudget)
    baseline_episodes: int | None = None  # None: prune_budget.train_episodes
    internal: InternalParams = field(default_factory=InternalParams)
    n_steps: int = 0  # 0 = auto: one select plus the max addable edges
    n_episodes: int = 100
    reward_trials: int = 5
    search_episodes: int = 10
    combine_episodes: int = 50
    eval_episodes: int = 500
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    hyper: Hyper = field(default_factory=Hyper)
    master_seed: int = 0
    auc_margin: float = 0.2
    epsilon_decay: bool = False

    def check(self) -> None:
        if not self.training_envs:
            raise ValueError("need at least one training env")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for env in (*self.training_envs, self.test_env):
            env.validate()


def _parse_env_line(value: str) -> BlocksConfig:
    parts = value.replace(",", " ").split()
    if len(parts) != 5:
        raise ValueError(
            f"env line needs 5 numbers (height width cubes episode_length "
            f"tower_target), got {value!r}")
    h, w, c, length, target = (int(p) for p in parts)
    return BlocksConfig(h, w, c, length, target)


def parse_experiment_config(text: str) -> ExperimentConfig:
    """Flat key-value sections: experiment, envs, gen, prune, internal,
    combine. Env lines are `height width cubes episode_length tower_target`;
    [envs] keys starting with `train` are the training set, `test` is the
    held-out env."""
    parser = configparser.ConfigParser()
    parser.read_string(text)
    envs = parser["envs"]
    training = [_parse_env_line(envs[k]) for k in sorted(envs)
                if k.startswith("train")]
    if "test" not in envs:
        raise ValueError("[envs] must define a test env")
    test = _parse_env_line(envs["test"])

    exp = parser["experiment"] if parser.has_section("experiment") else {}
    hyper = Hyper(
        alpha=float(exp.get("alpha", 0.1)),
        gamma=float(exp.get("gamma", 0.99)),
        epsilon=float(exp.get("epsilon", 0.1)),
    )
    seeds = [int(s) for s in exp.get("seeds", "0 1 2 3 4").split()]

    gen = GenParams(max_vertices=5)
    if parser.has_section("gen"):
        g = parser["gen"]
        actions = tuple(ACTION_BY_NAME[name]
                        for name in g.get("actions", "").split()) or None
        gen = GenParams(
            max_vertices=int(g.get("max_vertices", 5)),
            actions=actions if actions else GenParams(5).actions,
            max_per_action=int(g.get("max_per_action", 1)),
            max_choice=int(g.get("max_choice", 1)),
        )

    budget = ApplicabilityBudget()
    baseline_episodes = None
    if parser.has_section("prune"):
        p = parser["prune"]
        budget = ApplicabilityBudget(
            train_episodes=int(p.get("train_episodes", 500)),
            eval_episodes=int(p.get("eval_episodes", 10)),
            convergence_window=int(p.get("convergence_window", 50)),
            success_fraction=float(p.get("threshold", 0.95)),
        )
        if "baseline_episodes" in p:
            baseline_episodes = int(p["baseline_episodes"])

    internal = InternalParams()
    n_steps, n_episodes, reward_trials, search_episodes = 0, 100, 5, 10
    if parser.has_section("internal"):
        i = parser["internal"]
        internal = InternalParams(
            penalty=float(i.get("penalty", -1e6)),
            f_threshold=float(i.get("f_threshold", 0.95)),
            epsilon=float(i.get("epsilon", 0.1)),
            alpha=float(i.get("alpha", 0.1)),
            gamma=float(i.get("gamma", 0.99)),
        )
        n_steps = int(i.get("n_steps", 0))
        n_episodes = int(i.get("n_episodes", 100))
        reward_trials = int(i.get("reward_trials", 5))
        search_episodes = int(i.get("search_episodes", 10))

    combine_episodes = 50
    if parser.has_section("combine"):
        combine_episodes = int(parser["combine"].get("episodes", 50))

    config = ExperimentConfig(
        training_envs=training,
        test_env=test,
        gen=gen,
        prune_budget=budget,
        baseline_episodes=baseline_episodes,
        internal=internal,
        n_steps=n_steps,
        n_episodes=n_episodes,
        reward_trials=reward_trials,
        search_episodes=search_episodes,
        combine_episodes=combine_episodes,
        eval_episodes=int(exp.get("eval_episodes", 500)),
        seeds=seeds,
        hyper=hyper,
        master_seed=int(exp.get("master_seed", 0)),
        auc_margin=float(exp.get("auc_margin", 0.2)),
        epsilon_decay=exp.get("epsilon_decay", "0") in ("1", "true", "yes"),
    )
    config.check()
    return config


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    return parse_experiment_config(Path(path).read_text())


@dataclass
class CombinedSolution:
    """Final cluster -> machine assignment with per-cluster provenance
    (searched machine kept, or standard machine retained)."""

    cluster_map: dict[ClusterKey, MachineGraph]
    provenance: dict[ClusterKey, str]

    def clusters(self) -> list[ClusterKey]:
        return sorted(self.cluster_map,
                      key=lambda c: (c.manip_height, c.holding))


@dataclass
class CombineContext:
    baseline: BaselineResult
    envs: Sequence[BlocksConfig]
    episodes: int
    hyper: Hyper
    seed: int


def combine(per_cluster_best: Mapping[ClusterKey, SearchOutcome],
            ctx: CombineContext) -> CombinedSolution:
    """Greedy merge: clusters in descending searched score; each searched
    machine is kept only if the combined solution trains better with it
    than with the standard machine retained (ties keep the standard)."""
    mstd = build_standard_machine()
    order = sorted(
        per_cluster_best,
        key=lambda c: (-per_cluster_best[c].best_mean,
                       c.manip_height, c.holding))
    current: dict[ClusterKey, MachineGraph] = {
        c: mstd for c in per_cluster_best}
    provenance: dict[ClusterKey, str] = {}
    mstd_form = canonical_form(mstd)
    for cluster in order:
        candidate = per_cluster_best[cluster].best_graph
        if canonical_form(candidate) == mstd_form:
            provenance[cluster] = "standard"
            continue
        seed = derive_seed(ctx.seed, "combine", str(cluster))
        with_candidate = run_solution_training(
            {**current, cluster: candidate}, ctx.baseline, ctx.envs,
            ctx.episodes, ctx.hyper, seed).mean_normalized()
        with_standard = run_solution_training(
            {**current, cluster: mstd}, ctx.baseline, ctx.envs,
            ctx.episodes, ctx.hyper, seed).mean_normalized()
        if with_candidate > with_standard:
            current[cluster] = candidate
            provenance[cluster] = "searched"
        else:
            provenance[cluster] = "standard"
    return CombinedSolution(cluster_map=current, provenance=provenance)


def solution_library(solution: CombinedSolution
                     ) -> tuple[MachineLibrary, dict[ClusterKey, str]]:
    library = MachineLibrary({M_STD_ID: build_standard_machine()})
    assignment: dict[ClusterKey, str] = {}
    for cluster in solution.clusters():
        graph = solution.cluster_map[cluster]
        mid = machine_file_id(graph)
        library.add(mid, graph)
        assignment[cluster] = mid
    return library, assignment


def evaluate(solution: CombinedSolution, env: BlocksConfig, episodes: int,
             seeds: Sequence[int], hyper: Hyper = Hyper(), *,
             normalizer: float | None = None,
             epsilon_decay: bool = False) -> dict[int, LearningCurve]:
    """Train the solution's choice values from scratch on the env, once per
    seed; dispatch stays fixed, every machine's Choice vertices learn."""
    library, assignment = solution_library(solution)
    root = build_root(assignment, library)
    curves: dict[int, LearningCurve] = {}
    for seed in seeds:
        qtable = ChoiceQTable(alpha=hyper.alpha, gamma=hyper.gamma)
        curves[seed] = ham_train(
            root, library, env, episodes, qtable, hyper.epsilon, seed,
            normalizer=normalizer, epsilon_decay=epsilon_decay)
    return curves


def area_under_curve(curve: LearningCurve) -> float:
    """Mean per-episode reward: the scale-free convergence-rate statistic."""
    return curve.mean_reward()


def auc_improvement(ham_median: float, flat_median: float) -> float:
    """Relative improvement, floored so a near-zero flat baseline cannot
    blow up or flip sign."""
    return (ham_median - flat_median) / max(abs(flat_median), AUC_FLOOR)


def write_combined_manifest(solution: CombinedSolution, out_dir: str | Path,
                            machines_dir: str = "machines") -> Path:
    out = Path(out_dir)
    mdir = out / machines_dir
    mdir.mkdir(parents=True, exist_ok=True)
    lines = []
    for cluster in solution.clusters():
        graph = solution.cluster_map[cluster]
        name = machine_file_id(graph) + ".machine"
        (mdir / name).write_text(canonical_form(graph))
        lines.append(
            f"cluster {cluster.manip_height} {int(cluster.holding)} "
            f"machine {machines_dir}/{name} "
            f"provenance {solution.provenance[cluster]}")
    manifest = out / "combined_manifest.txt"
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_combined_manifest(path: str | Path) -> CombinedSolution:
    manifest = Path(path)
    cluster_map: dict[ClusterKey, MachineGraph] = {}
    provenance: dict[ClusterKey, str] = {}
    for raw in manifest.read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        if parts[0] != "cluster" or parts[3] != "machine" \
                or parts[5] != "provenance":
            raise ValueError(f"bad combined manifest line: {raw!r}")
        cluster = ClusterKey(int(parts[1]), bool(int(parts[2])))
        cluster_map[cluster] = parse_machine_text(
            (manifest.parent / parts[4]).read_text())
        provenance[cluster] = parts[6]
    return CombinedSolution(cluster_map=cluster_map, provenance=provenance)


def render_comparison_figure(flat_curves: Mapping[int, LearningCurve],
                             ham_curves: Mapping[int, LearningCurve],
                             path: str | Path, smooth: int = 15) -> None:
    """Per-episode reward for both algorithms: faint per-seed traces plus
    the across-seed median, written to an image file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    def smoothed(values: list[float]) -> list[float]:
        if smooth <= 1:
            return values
        out = []
        for i in range(len(values)):
            lo = max(0, i - smooth + 1)
            out.append(sum(values[lo:i + 1]) / (i + 1 - lo))
        return out

    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    for label, curves, color in (("flat Q", flat_curves, "tab:red"),
                                 ("HAM", ham_curves, "tab:blue")):
        series = [smoothed(c.rewards) for _, c in sorted(curves.items())]
        if not series:
            continue
        for s in series:
            ax.plot(range(len(s)), s, color=color, alpha=0.2, linewidth=0.8)
        n = min(len(s) for s in series)
        median = [statistics.median(s[i] for s in series) for i in range(n)]
        ax.plot(range(n), median, color=color, linewidth=2.0, label=label)
    ax.set_xlabel("episode")
    ax.set_ylabel(f"episode reward (smoothed, window {smooth})")
    ax.set_title("Convergence on the test environment")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def auto_n_steps(multisets: Sequence[tuple]) -> int:
    """One select action plus the most edges any multiset can take."""
    best = 1
    for vertices in multisets:
        graph = MachineGraph(tuple(vertices), frozenset())
        env_edges = 0
        n = len(vertices)
        for u in range(n):
            kind = graph.vertices[u].type.value
            if kind == "stop":
                continue
            if kind in ("start", "action", "call"):
                env_edges += 1
            else:  # choice: anything but self, Start, Stop
                env_edges += max(
                    0, n - 1 - sum(1 for v in graph.vertices
                                   if v.type.value in ("start", "stop")))
        best = max(best, 1 + env_edges)
    return best


@dataclass
class ExperimentResult:
    out_dir: Path
    flat_curves: dict[int, LearningCurve]
    ham_curves: dict[int, LearningCurve]
    solution: CombinedSolution
    flat_auc_median: float
    ham_auc_median: float
    improvement: float
    dominance_pass: bool


def run_experiment(config: ExperimentConfig, out_dir: str | Path,
                   jobs: int = 1) -> ExperimentResult:
    """Execute the full pipeline, writing all artifacts under out_dir."""
    config.check()
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "baseline").mkdir(exist_ok=True)
    (out / "search").mkdir(exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    hyper = config.hyper

    def stage(name):
        def wrap(fn, *args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as exc:
                raise StageError(name, exc) from exc
        return wrap

    # Flat baseline on the test env, one run per seed.
    def _flat():
        curves = {}
        for seed in config.seeds:
            _, curve = flat_train(
                config.test_env, config.eval_episodes, hyper.alpha,
                hyper.gamma, hyper.epsilon, seed,
                epsilon_decay=config.epsilon_decay)
            curves[seed] = curve
        return curves
    flat_curves = stage("flat")(_flat)
    test_scale = max((c.max_reward() for c in flat_curves.values()),
                     default=0.0)
    for seed, curve in sorted(flat_curves.items()):
        curve.with_normalizer(test_scale).write_csv(
            out / "curves" / f"flat_seed{seed}.csv")

    # All-standard baseline on the training envs.
    def _baseline():
        budget = config.prune_budget
        if config.baseline_episodes is not None:
            from dataclasses import replace as _replace
            budget = _replace(budget,
                              train_episodes=config.baseline_episodes)
        return train_baseline(config.training_envs, budget, hyper,
                              derive_seed(config.master_seed, "base"))
    baseline = stage("baseline")(_baseline)
    for i, curve in enumerate(baseline.curves):
        curve.write_csv(out / "baseline" / f"curve_env{i}.csv")
    summary: list[tuple[str, str]] = []
    for i, m in enumerate(baseline.env_max):
        summary.append((f"train_env_{i}_baseline_max", repr(m)))
    summary.append(("test_env_flat_max", repr(test_scale)))

    # Candidate generation and per-cluster applicability pruning.
    candidates = stage("generate")(
        lambda: list(enumerate_machines(config.gen)))
    summary.append(("candidate_count", str(len(candidates))))

    def _prune():
        return prune(candidates, baseline.common_clusters(), baseline,
                     config.training_envs, config.prune_budget, hyper,
                     derive_seed(config.master_seed, "prune"), jobs=jobs)
    pruned = stage("prune")(_prune)
    write_pruned_manifest(pruned, out)

    # Structure search per cluster in the internal environment.
    def _discover():
        outcomes: dict[ClusterKey, SearchOutcome] = {}
        for cluster in pruned.clusters():
            ctx = EpisodeContext(
                cluster=cluster, envs=tuple(config.training_envs),
                n_steps=config.n_steps or 1, n_episodes=config.n_episodes,
                reward_trials=config.reward_trials)
            env = InternalEnv.from_pruned(
                ctx, baseline, hyper, pruned, params=config.internal,
                eval_seed=derive_seed(config.master_seed, "discover",
                                      str(cluster)))
            if config.n_steps == 0:
                ctx = EpisodeContext(
                    cluster=cluster, envs=tuple(config.training_envs),
                    n_steps=auto_n_steps(env.multisets),
                    n_episodes=config.n_episodes,
                    reward_trials=config.reward_trials)
                env.ctx = ctx
            outcome = search_cluster(
                env, config.search_episodes,
                derive_seed(config.master_seed, "search", str(cluster)))
            outcomes[cluster] = outcome
            write_search_log(out / "search" / f"{cluster}.log", outcome)
            (out / "search" / f"{cluster}.machine").write_text(
                canonical_form(outcome.best_graph))
        return outcomes
    outcomes = stage("discover")(_discover)
    for cluster in sorted(outcomes, key=lambda c: (c.manip_height, c.holding)):
        summary.append((f"search_{cluster}_mean",
                        repr(outcomes[cluster].best_mean)))

    # Greedy combination over training envs.
    def _combine():
        ctx = CombineContext(
            baseline=baseline, envs=config.training_envs,
            episodes=config.combine_episodes, hyper=hyper,
            seed=config.master_seed)
        return combine(outcomes, ctx)
    solution = stage("combine")(_combine)
    write_combined_manifest(solution, out)

    # Final comparison on the held-out test env.
    def _eval():
        return evaluate(
            solution, config.test_env, config.eval_episodes, config.seeds,
            hyper, normalizer=test_scale if test_scale > 0 else None,
            epsilon_decay=config.epsilon_decay)
    ham_curves = stage("eval")(_eval)
    for seed, curve in sorted(ham_curves.items()):
        curve.write_csv(out / "curves" / f"ham_seed{seed}.csv")

    flat_aucs = [area_under_curve(flat_curves[s]) for s in config.seeds]
    ham_aucs = [area_under_curve(ham_curves[s]) for s in config.seeds]
    flat_med = statistics.median(flat_aucs)
    ham_med = statistics.median(ham_aucs)
    improvement = auc_improvement(ham_med, flat_med)
    dominance = improvement >= config.auc_margin

    for seed, auc in zip(config.seeds, flat_aucs):
        summary.append((f"flat_auc_seed_{seed}", repr(auc)))
    for seed, auc in zip(config.seeds, ham_aucs):
        summary.append((f"ham_auc_seed_{seed}", repr(auc)))
    summary.extend([
        ("flat_auc_median", repr(flat_med)),
        ("ham_auc_median", repr(ham_med)),
        ("auc_improvement", repr(improvement)),
        ("auc_margin", repr(config.auc_margin)),
        ("dominance_pass", str(int(dominance))),
    ])
    for cluster in solution.clusters():
        summary.append((f"cluster_{cluster}_provenance",
                        solution.provenance[cluster]))
    (out / "summary.txt").write_text(
        "".join(f"{k} {v}\n" for k, v in summary))

    stage("report")(render_comparison_figure, flat_curves, ham_curves,
                    out / "figures" / "comparison.png")

    return ExperimentResult(
        out_dir=out, flat_curves=flat_curves, ham_curves=ham_curves,
        solution=solution, flat_auc_median=flat_med, ham_auc_median=ham_med,
        improvement=improvement, dominance_pass=dominance)


def tidy_curve_rows(artifact_dir: str | Path) -> list[tuple]:
    """Long-format rows (algo, seed, episode, reward, steps, normalized)
    from every curve CSV in an artifact directory."""
    rows: list[tuple] = []
    curves_dir = Path(artifact_dir) / "curves"
    for path in sorted(curves_dir.glob("*.csv")):
        stem = path.stem  # e.g. flat_seed3
        algo, _, seed_part = stem.partition("_seed")
        curve = read_curve_csv(path)
        for rec in curve.records:
            rows.append((algo, int(seed_part), rec.episode, rec.reward,
                         rec.steps, rec.normalized))
    return rows
