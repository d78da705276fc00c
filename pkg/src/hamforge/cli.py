"""Command line interface: the `run` pipeline plus its individual stages."""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from .blocks_env import ACTION_BY_NAME, ClusterKey
from .harness import (
    CombineContext,
    CombinedSolution,
    combine,
    evaluate,
    load_experiment_config,
    read_combined_manifest,
    render_comparison_figure,
    run_experiment,
    tidy_curve_rows,
    write_combined_manifest,
)
from .internal_env import (
    EpisodeContext,
    InternalEnv,
    SearchOutcome,
    search_cluster,
    write_search_log,
)
from .machine_gen import GenParams, canonical_form, enumerate_machines
from .ham_core import parse_machine_text, to_dot
from .pruning import (
    machine_file_id,
    prune,
    read_pruned_manifest,
    train_baseline,
    write_pruned_manifest,
)
from .qlearn import derive_seed


def _parse_actions(spec: str):
    names = spec.replace(",", " ").split()
    return tuple(ACTION_BY_NAME[name] for name in names)


def _gen_params(args) -> GenParams:
    actions = _parse_actions(args.actions) if args.actions else None
    kwargs = dict(
        max_vertices=args.max_vertices,
        max_per_action=args.max_per_action,
        max_choice=args.max_choice,
    )
    if actions:
        kwargs["actions"] = actions
    return GenParams(**kwargs)


def cmd_generate(args) -> int:
    params = _gen_params(args)
    if args.count:
        per_size: dict[int, int] = {}
        total = 0
        for graph in enumerate_machines(params):
            per_size[len(graph.vertices)] = per_size.get(
                len(graph.vertices), 0) + 1
            total += 1
        for size in sorted(per_size):
            print(f"vertices {size}: {per_size[size]}")
        print(f"total: {total}")
        return 0
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for graph in enumerate_machines(params):
        name = machine_file_id(graph)
        (out / f"{name}.machine").write_text(canonical_form(graph))
        if args.dot:
            (out / f"{name}.dot").write_text(to_dot(graph, name))
        count += 1
    print(f"wrote {count} machines to {out}")
    return 0


def _load_machine_dir(path: Path):
    machines = []
    for file in sorted(path.glob("*.machine")):
        machines.append(parse_machine_text(file.read_text()))
    return machines


def cmd_prune(args) -> int:
    config = load_experiment_config(args.config)
    candidates = _load_machine_dir(Path(args.machines))
    if not candidates:
        print(f"no .machine files in {args.machines}", file=sys.stderr)
        return 2
    baseline = train_baseline(
        config.training_envs, config.prune_budget, config.hyper,
        derive_seed(config.master_seed, "base"))
    pruned = prune(
        candidates, baseline.common_clusters(), baseline,
        config.training_envs, config.prune_budget, config.hyper,
        derive_seed(config.master_seed, "prune"), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_pruned_manifest(pruned, out)
    kept = sum(len(pruned.machines(c)) for c in pruned.clusters())
    print(f"kept {kept} (cluster, machine) pairs across "
          f"{len(pruned.clusters())} clusters -> {manifest}")
    return 0


def _parse_cluster(spec: str) -> ClusterKey:
    height, hold = spec.split()
    return ClusterKey(int(height), hold.lower() in ("1", "true", "hold"))


SCORES_FILE = "scores.txt"


def _write_scores(search_dir: Path,
                  outcomes: dict[ClusterKey, SearchOutcome]) -> None:
    lines = []
    for cluster in sorted(outcomes, key=lambda c: (c.manip_height, c.holding)):
        o = outcomes[cluster]
        lines.append(f"cluster {cluster.manip_height} {int(cluster.holding)} "
                     f"mean {o.best_mean!r} machine {cluster}.machine")
    (search_dir / SCORES_FILE).write_text(
        "\n".join(lines) + ("\n" if lines else ""))


def _read_scores(search_dir: Path) -> dict[ClusterKey, SearchOutcome]:
    outcomes: dict[ClusterKey, SearchOutcome] = {}
    for raw in (search_dir / SCORES_FILE).read_text().splitlines():
        parts = raw.split()
        if not parts:
            continue
        cluster = ClusterKey(int(parts[1]), bool(int(parts[2])))
        graph = parse_machine_text((search_dir / parts[6]).read_text())
        outcomes[cluster] = SearchOutcome(
            cluster=cluster, best_graph=graph, best_mean=float(parts[4]),
            log=[])
    return outcomes


def cmd_discover(args) -> int:
    config = load_experiment_config(args.config)
    baseline = train_baseline(
        config.training_envs, config.prune_budget, config.hyper,
        derive_seed(config.master_seed, "base"))
    pruned = read_pruned_manifest(args.pruned)
    clusters = ([_parse_cluster(args.cluster)] if args.cluster
                else pruned.clusters())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    search_episodes = args.search_episodes or config.search_episodes
    outcomes: dict[ClusterKey, SearchOutcome] = {}
    for cluster in clusters:
        ctx = EpisodeContext(
            cluster=cluster, envs=tuple(config.training_envs),
            n_steps=config.n_steps or 12, n_episodes=config.n_episodes,
            reward_trials=config.reward_trials)
        seed = (args.seed if args.seed is not None
                else derive_seed(config.master_seed, "search", str(cluster)))
        env = InternalEnv.from_pruned(
            ctx, baseline, config.hyper, pruned, params=config.internal,
            eval_seed=derive_seed(config.master_seed, "discover",
                                  str(cluster)))
        outcome = search_cluster(env, search_episodes, seed)
        outcomes[cluster] = outcome
        (out / f"{cluster}.machine").write_text(
            canonical_form(outcome.best_graph))
        write_search_log(out / f"{cluster}.log", outcome)
        print(f"{cluster}: best mean {outcome.best_mean:.4f}")
    _write_scores(out, outcomes)
    return 0


def cmd_combine(args) -> int:
    config = load_experiment_config(args.config)
    baseline = train_baseline(
        config.training_envs, config.prune_budget, config.hyper,
        derive_seed(config.master_seed, "base"))
    outcomes = _read_scores(Path(args.search_dir))
    ctx = CombineContext(
        baseline=baseline, envs=config.training_envs,
        episodes=config.combine_episodes, hyper=config.hyper,
        seed=config.master_seed)
    solution = combine(outcomes, ctx)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = write_combined_manifest(solution, out)
    for cluster in solution.clusters():
        print(f"{cluster}: {solution.provenance[cluster]}")
    print(f"wrote {manifest}")
    return 0


def cmd_eval(args) -> int:
    config = load_experiment_config(args.config)
    solution = read_combined_manifest(args.solution)
    episodes = args.episodes or config.eval_episodes
    curves = evaluate(solution, config.test_env, episodes, config.seeds,
                      config.hyper, epsilon_decay=config.epsilon_decay)
    out = Path(args.out)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "figures").mkdir(exist_ok=True)
    for seed, curve in sorted(curves.items()):
        curve.write_csv(out / "curves" / f"ham_seed{seed}.csv")
    render_comparison_figure({}, curves, out / "figures" / "eval.png")
    mean_auc = sum(c.mean_reward() for c in curves.values()) / len(curves)
    print(f"mean AUC over {len(curves)} seeds: {mean_auc:.6f}")
    return 0


def cmd_run(args) -> int:
    config = load_experiment_config(args.config)
    if args.seeds is not None:
        config = replace(config, seeds=list(range(args.seeds)))
    result = run_experiment(config, args.out, jobs=args.jobs)
    print(f"flat AUC median: {result.flat_auc_median:.6f}")
    print(f"ham AUC median:  {result.ham_auc_median:.6f}")
    print(f"improvement:     {result.improvement:.3f} "
          f"(margin {config.auc_margin}, "
          f"{'PASS' if result.dominance_pass else 'FAIL'})")
    print(f"artifacts in {result.out_dir}")
    return 0


def cmd_plotdata(args) -> int:
    rows = tidy_curve_rows(args.artifacts)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(["algo", "seed", "episode", "reward", "steps",
                         "normalized"])
        for row in rows:
            writer.writerow([row[0], row[1], row[2], repr(row[3]), row[4],
                             repr(row[5])])
    finally:
        if args.out:
            out.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hamforge",
        description="Discover abstract-machine hierarchies on a blocks world")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=None,
                   help="override: use seeds 0..N-1")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("generate", help="enumerate candidate machines")
    p.add_argument("--max-vertices", type=int, required=True)
    p.add_argument("--actions", default="",
                   help="action names (default: all five)")
    p.add_argument("--max-choice", type=int, default=1)
    p.add_argument("--max-per-action", type=int, default=1)
    p.add_argument("--out", default="machines")
    p.add_argument("--count", action="store_true",
                   help="print totals per multiset size instead of writing")
    p.add_argument("--dot", action="store_true", help="also write DOT files")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("prune", help="applicability-filter a machine dir")
    p.add_argument("--config", required=True)
    p.add_argument("--machines", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("discover", help="internal-environment search")
    p.add_argument("--config", required=True)
    p.add_argument("--pruned", required=True,
                   help="pruned manifest file")
    p.add_argument("--cluster", default=None,
                   help='single cluster as "HEIGHT HOLD" (default: all)')
    p.add_argument("--search-episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("combine", help="greedy combination of searched machines")
    p.add_argument("--config", required=True)
    p.add_argument("--search-dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("eval", help="train a combined solution on the test env")
    p.add_argument("--config", required=True)
    p.add_argument("--solution", required=True,
                   help="combined manifest file")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plotdata", help="tidy CSV of all curves in a run dir")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plotdata)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
