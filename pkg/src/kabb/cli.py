"""Batch experiment harness: validate, simulate, sweep, route.

Config files are JSON with an explicit version field. Every resolved value
(defaults included) is echoed to resolved_config.json in the output
directory so no default is applied silently. Reals in CSV output use 9
significant digits; files are written atomically (temp + rename).

Exit codes: 0 success, 1 validation/config, 2 I/O, 3 budget.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bandit import BanditConfig, PosteriorStore, restore, snapshot_json
from .defaults import default_graph_path, default_lexicon_path
from .distance import DistanceWeights
from .errors import (
    BudgetError,
    ConfigError,
    GraphParseError,
    GraphValidationError,
    KabbError,
    RoutingError,
    SnapshotError,
)
from .graph import KnowledgeGraph, load_graph_file
from .router import ConceptLexicon, Router
from .sim import (
    EnvironmentSpec,
    PolicySpec,
    EpisodeLog,
    RegretCurve,
    episode_to_csv,
    generate_environment,
    loglog_slope,
    run,
    summarize,
)

FLOAT_FMT = "%.9g"

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_BUDGET = 3

CONFIG_VERSION = 1

SWEEP_PARAMS = (
    "lam",
    "kappa",
    "decay_factor",
    "eta",
    "delta",
    "dist_threshold",
    "omega1",
    "omega2",
    "omega3",
    "omega4",
)

SUMMARY_COLUMNS = [
    "policy",
    "n_seeds",
    "T",
    "mean_terminal_regret",
    "std_terminal_regret",
    "q0",
    "q25",
    "q50",
    "q75",
    "q100",
    "loglog_slope",
    "mean_success_rate",
]


def _atomic_write(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class ExperimentConfig:
    """Fully-resolved experiment description (defaults already applied)."""

    graph_path: Path
    bandit: BanditConfig
    weights: DistanceWeights
    environment: dict
    policies: list[PolicySpec]
    T: int
    seeds: list[int]
    output_dir: Path
    sweep_axes: list[tuple[str, list[float]]] = field(default_factory=list)
    workers: int = 1

    def resolved_dict(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "graph": str(self.graph_path),
            "bandit": self.bandit.to_dict(),
            "weights": list(self.weights.as_tuple()),
            "environment": self.environment,
            "policies": [
                {"kind": p.kind, "epsilon": p.epsilon, "exploration": p.exploration}
                for p in self.policies
            ],
            "T": self.T,
            "seeds": self.seeds,
            "output_dir": str(self.output_dir),
            "sweep": [{"param": name, "grid": grid} for name, grid in self.sweep_axes],
            "workers": self.workers,
        }


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    version = raw.get("version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {version!r}")

    graph_raw = raw.get("graph", "default")
    graph_path = Path(str(default_graph_path())) if graph_raw == "default" else Path(graph_raw)
    if not graph_path.exists():
        raise ConfigError(f"graph file does not exist: {graph_path}")

    try:
        bandit = BanditConfig.from_dict({**BanditConfig().to_dict(), **raw.get("bandit", {})})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad bandit config: {exc}") from exc
    try:
        weights = DistanceWeights(*raw.get("weights", DistanceWeights().as_tuple()))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad distance weights: {exc}") from exc

    environment = raw.get("environment", {})
    if not isinstance(environment, dict):
        raise ConfigError("'environment' must be an object")

    policies = []
    for entry in raw.get("policies", ["kabb"]):
        if isinstance(entry, str):
            policies.append(PolicySpec(kind=entry))
        elif isinstance(entry, dict):
            policies.append(
                PolicySpec(
                    kind=entry.get("kind", ""),
                    epsilon=entry.get("epsilon", 0.1),
                    exploration=entry.get("exploration", 1.0),
                )
            )
        else:
            raise ConfigError(f"bad policy entry {entry!r}")
    if not policies:
        raise ConfigError("at least one policy is required")

    T = raw.get("T", 1000)
    if not isinstance(T, int) or T < 1:
        raise ConfigError("T must be a positive integer")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")

    out_raw = os.environ.get("KABB_OUTPUT_DIR") or raw.get("output_dir", "kabb_out")
    output_dir = Path(out_raw)

    sweep_axes: list[tuple[str, list[float]]] = []
    for axis in raw.get("sweep", []):
        name = axis.get("param")
        grid = axis.get("grid")
        if name not in SWEEP_PARAMS:
            raise ConfigError(
                f"unknown sweep parameter {name!r}; valid names: {', '.join(SWEEP_PARAMS)}"
            )
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"sweep axis {name!r} needs a non-empty grid")
        sweep_axes.append((name, [float(v) for v in grid]))

    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        raise ConfigError("workers must be a positive integer")

    return ExperimentConfig(
        graph_path=graph_path,
        bandit=bandit,
        weights=weights,
        environment=environment,
        policies=policies,
        T=T,
        seeds=seeds,
        output_dir=output_dir,
        sweep_axes=sweep_axes,
        workers=workers,
    )


def build_environment_spec(config: ExperimentConfig, graph: KnowledgeGraph) -> EnvironmentSpec:
    env = dict(config.environment)
    return EnvironmentSpec(
        graph=graph,
        base_skills=env.get("base_skills"),
        noise_scale=env.get("noise_scale", 0.05),
        skill_range=tuple(env.get("skill_range", (0.3, 0.95))),
        min_concepts=env.get("min_concepts", 2),
        max_concepts=env.get("max_concepts", 3),
        fixed_concepts=env.get("fixed_concepts"),
        drift=env.get("drift", ()),
        routing_concepts=config.bandit.m,
        team_size=config.bandit.k,
    )


def _run_one(config: ExperimentConfig, policy: PolicySpec, seed: int) -> tuple[EpisodeLog, RegretCurve]:
    graph = load_graph_file(config.graph_path)
    spec = build_environment_spec(config, graph)
    if policy.kind == "kabb":
        policy = PolicySpec(kind="kabb", bandit=config.bandit, weights=config.weights)
    env = generate_environment(spec, seed)
    return run(policy, env, config.T, seed)


def _run_one_to_csv(args: tuple) -> tuple[str, int, str, float, float]:
    """Worker entry: run one (policy, seed) and return its CSV plus stats."""
    config, policy, seed = args
    log, curve = _run_one(config, policy, seed)
    return (policy.kind, seed, episode_to_csv(log, curve, FLOAT_FMT), curve.terminal, log.success_rate)


def _execute_runs(config: ExperimentConfig, jobs: list[tuple]) -> list[tuple]:
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            return list(pool.map(_run_one_to_csv, jobs))
    return [_run_one_to_csv(job) for job in jobs]


def cmd_validate(args) -> int:
    path = Path(args.graph)
    if not path.exists():
        print(f"error: graph file not found: {path}", file=sys.stderr)
        return EXIT_IO
    checks: list[tuple[str, str]] = []
    try:
        graph = load_graph_file(path, strict=args.strict)
    except GraphParseError as exc:
        print(f"check parse: FAIL ({exc})")
        return EXIT_VALIDATION
    except GraphValidationError as exc:
        print("check parse: ok")
        print(f"check invariants: FAIL ({exc})")
        return EXIT_VALIDATION
    checks.append(("parse", "ok"))
    checks.append(("invariants", "ok"))
    checks.append(("concepts", f"ok ({graph.n_concepts})"))
    checks.append(("edges", f"ok ({len(graph.edges)})"))
    checks.append(("experts", f"ok ({graph.n_experts})"))
    checks.append(("diameter_cap", f"ok ({graph.diameter_cap})"))
    inactive = [e.expert_id for e in graph.experts if not e.concept_set]
    checks.append(("expert_coverage", "ok" if not inactive else f"warn (inactive experts: {inactive})"))
    for name, status in checks:
        print(f"check {name}: {status}")
    return EXIT_OK


def _write_summary_csv(path: Path, rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUMMARY_COLUMNS)
    writer.writerows(rows)
    _atomic_write(path, buf.getvalue())


def cmd_simulate(args) -> int:
    config = load_experiment_config(args.config)
    out = config.output_dir
    _atomic_write(out / "resolved_config.json", json.dumps(config.resolved_dict(), indent=1) + "\n")

    jobs = [(config, policy, seed) for policy in config.policies for seed in config.seeds]
    results = _execute_runs(config, jobs)

    curves: dict[str, list[RegretCurve]] = {}
    stats: dict[str, list[tuple[float, float]]] = {}
    for (kind, seed, csv_text, terminal, success), job in zip(results, jobs):
        _atomic_write(out / f"curve_{kind}_{seed}.csv", csv_text)
        stats.setdefault(kind, []).append((terminal, success))
        cum = _cumulative_from_csv(csv_text)
        curves.setdefault(kind, []).append(cum)

    rows = []
    for policy in config.policies:
        kind = policy.kind
        terminals = np.array([t for t, _ in stats[kind]])
        successes = np.array([s for _, s in stats[kind]])
        stacked = np.vstack(curves[kind])
        mean_curve = stacked.mean(axis=0)
        quants = np.quantile(terminals, [0.0, 0.25, 0.5, 0.75, 1.0])
        rows.append(
            [
                kind,
                len(config.seeds),
                config.T,
                FLOAT_FMT % terminals.mean(),
                FLOAT_FMT % terminals.std(),
                *[FLOAT_FMT % q for q in quants],
                FLOAT_FMT % loglog_slope(mean_curve),
                FLOAT_FMT % successes.mean(),
            ]
        )
    _write_summary_csv(out / "summary.csv", rows)
    print(f"wrote {len(jobs)} curve files and summary.csv to {out}")
    return EXIT_OK


def _cumulative_from_csv(csv_text: str) -> np.ndarray:
    reader = csv.DictReader(io.StringIO(csv_text))
    return np.array([float(row["cum_regret"]) for row in reader])


def apply_sweep_point(
    bandit: BanditConfig, weights: DistanceWeights, assignment: dict[str, float]
) -> tuple[BanditConfig, DistanceWeights]:
    """Apply one grid point to the bandit config / distance weights.

    ``decay_factor`` g sets kappa = -ln(g). Setting one omega component
    rescales the other three so the weights still sum to 1.
    """
    bd = bandit.to_dict()
    w = list(weights.as_tuple())
    for name, value in assignment.items():
        if name == "decay_factor":
            if not (0.0 < value <= 1.0):
                raise ConfigError("decay_factor values must lie in (0, 1]")
            bd["kappa"] = -math.log(value)
        elif name in ("lam", "kappa", "eta", "delta", "dist_threshold"):
            bd[name] = value
        elif name.startswith("omega"):
            idx = int(name[-1]) - 1
            if not (0.0 <= value <= 1.0):
                raise ConfigError(f"{name} must lie in [0, 1]")
            others = sum(w) - w[idx]
            scale = (1.0 - value) / others if others > 0 else 0.0
            for j in range(4):
                w[j] = w[j] * scale if j != idx else value
        else:
            raise ConfigError(f"unknown sweep parameter {name!r}")
    return BanditConfig.from_dict(bd), DistanceWeights(*w)


def cmd_sweep(args) -> int:
    config = load_experiment_config(args.config)
    if not config.sweep_axes:
        raise ConfigError("sweep requires a non-empty 'sweep' section in the config")
    out = config.output_dir
    _atomic_write(out / "resolved_config.json", json.dumps(config.resolved_dict(), indent=1) + "\n")

    axis_names = [name for name, _ in config.sweep_axes]
    grids = [grid for _, grid in config.sweep_axes]

    def cartesian(level: int) -> list[dict[str, float]]:
        if level == len(grids):
            return [{}]
        rest = cartesian(level + 1)
        return [{axis_names[level]: v, **tail} for v in grids[level] for tail in rest]

    points = cartesian(0)
    rows: list[list] = []
    for assignment in points:
        bandit, weights = apply_sweep_point(config.bandit, config.weights, assignment)
        point_config = ExperimentConfig(
            graph_path=config.graph_path,
            bandit=bandit,
            weights=weights,
            environment=config.environment,
            policies=[PolicySpec(kind="kabb")],
            T=config.T,
            seeds=config.seeds,
            output_dir=config.output_dir,
            workers=config.workers,
        )
        jobs = [(point_config, PolicySpec(kind="kabb"), seed) for seed in config.seeds]
        results = _execute_runs(point_config, jobs)
        terminals = np.array([r[3] for r in results])
        successes = np.array([r[4] for r in results])
        base = [FLOAT_FMT % assignment[name] for name in axis_names]
        rows.append([*base, "terminal_regret", FLOAT_FMT % terminals.mean(), FLOAT_FMT % terminals.std()])
        rows.append([*base, "success_rate", FLOAT_FMT % successes.mean(), FLOAT_FMT % successes.std()])

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([*axis_names, "metric", "mean", "std"])
    writer.writerows(rows)
    _atomic_write(out / "sweep.csv", buf.getvalue())
    print(f"wrote sweep.csv ({len(points)} grid points) to {out}")
    return EXIT_OK


def cmd_route(args) -> int:
    graph_path = Path(args.graph)
    if not graph_path.exists():
        print(f"error: graph file not found: {graph_path}", file=sys.stderr)
        return EXIT_IO
    graph = load_graph_file(graph_path)
    lexicon_path = Path(args.lexicon) if args.lexicon else Path(str(default_lexicon_path()))
    if not lexicon_path.exists():
        print(f"error: lexicon file not found: {lexicon_path}", file=sys.stderr)
        return EXIT_IO
    lexicon = ConceptLexicon.from_file(lexicon_path)
    config = BanditConfig()

    if args.snapshot:
        snap_path = Path(args.snapshot)
        if not snap_path.exists():
            print(f"error: snapshot file not found: {snap_path}", file=sys.stderr)
            return EXIT_IO
        store = restore(snap_path.read_text(encoding="utf-8"), config)
    else:
        store = PosteriorStore(config)

    router = Router(graph, lexicon, config=config, store=store, adapter_seed=args.seed)
    decision, answer = router.answer(args.text, seed=args.seed)

    concept_names = [graph.concepts[c].name for c in decision.selection.selected_concepts]
    print(f"task_id: {decision.task_id}")
    print(f"selected_concepts: {decision.selection.selected_concepts} {concept_names}")
    member_conf = decision.member_confidences()
    for eid in decision.selection.subset:
        name = graph.expert_by_id[eid].name
        print(f"expert {eid} ({name}): confidence {FLOAT_FMT % member_conf[eid]}")
    print(f"km_index: {FLOAT_FMT % decision.selection.km}")
    print(f"fusion_weights: {[FLOAT_FMT % w for w in answer.weights]}")
    print(f"weights_sum: {FLOAT_FMT % sum(answer.weights)}")
    print(f"rng: {decision.selection.rng_tag}")
    print("answer:")
    print(answer.final_text)

    if args.write_snapshot:
        # Simulated feedback: reuse the fused self-score mass as a graded outcome.
        reward = float(max(w for w in answer.weights))
        router.ingest_feedback(decision.task_id, reward)
        _atomic_write(Path(args.write_snapshot), snapshot_json(router.store))
        print(f"feedback {FLOAT_FMT % reward} ingested; snapshot written to {args.write_snapshot}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kabb", description="Knowledge-aware bandit experiment harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_val = sub.add_parser("validate", help="validate a graph document")
    p_val.add_argument("graph")
    p_val.add_argument("--strict", action="store_true", help="reject unknown document keys")
    p_val.set_defaults(func=cmd_validate)

    p_sim = sub.add_parser("simulate", help="run policies over seeds, emit regret CSVs")
    p_sim.add_argument("config")
    p_sim.set_defaults(func=cmd_simulate)

    p_sweep = sub.add_parser("sweep", help="run the parameter-sensitivity grid")
    p_sweep.add_argument("config")
    p_sweep.set_defaults(func=cmd_sweep)

    p_route = sub.add_parser("route", help="route one instruction and print the decision trace")
    p_route.add_argument("graph")
    p_route.add_argument("text")
    p_route.add_argument("--lexicon", default=None)
    p_route.add_argument("--snapshot", default=None)
    p_route.add_argument("--seed", type=int, default=0)
    p_route.add_argument("--write-snapshot", default=None)
    p_route.set_defaults(func=cmd_route)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BudgetError as exc:
        print(f"budget error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, GraphParseError, GraphValidationError, RoutingError, SnapshotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except KabbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
