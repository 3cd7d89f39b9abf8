#!/usr/bin/env python3
"""
Kähler-Ricci Flow Lab
Config-driven runner: flows, distances, estimate checks and the counterexample,
with artifacts written to an output directory.
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from krflow.config import ConfigError, apply_overrides, config_hash, load_scenario, log, settings
from krflow.models import ScenarioConfig, TorusGrid
from krflow.services.artifact_service import ArtifactService
from krflow.services.flow_service import FlowService
from krflow.services.metric_service import MetricService
from krflow.services.potential_service import PotentialService
from krflow.services.verify_service import VerifyService

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_INPUT = 2
EXIT_NUMERICS = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="krflow", description="Twisted Kähler-Ricci flow lab on the flat torus")
    parser.add_argument("--config", required=True, help="scenario TOML file")
    parser.add_argument("--out", help="output directory (overrides [output].directory)")
    parser.add_argument("--seed", type=int, help="sampling seed (overrides [sampling].seed)")
    parser.add_argument("--threads", type=int, help="worker threads / processes")
    parser.add_argument("--strict", action="store_true", help="optional checks become mandatory")
    parser.add_argument("--force", action="store_true", help="replace outputs of a different config")
    parser.add_argument("--quiet", action="store_true", help="silence progress lines")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("run", help="integrate the matched ladder, write checkpoints and diagnostics.csv")
    dist = commands.add_parser("dist", help="distance fields at a ladder time or for the limit current")
    when = dist.add_mutually_exclusive_group(required=True)
    when.add_argument("--t", type=float, help="ladder time of a stored checkpoint")
    when.add_argument("--limit", action="store_true", help="distances of the limit metric d_T")
    commands.add_parser("verify", help="run the check battery, write report.csv")
    counter = commands.add_parser("counterexample", help="weak-convergence counterexample")
    counter.add_argument("--level", type=int, action="append", help="net level j (repeatable)")
    commands.add_parser("report", help="print the summary of report.csv and write heatmaps")
    return parser


def load(args) -> ScenarioConfig:
    config = load_scenario(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"sampling": config.sampling.model_copy(update={"seed": args.seed})})
    return config


def artifacts_for(args, config: ScenarioConfig) -> ArtifactService:
    directory = args.out or config.output.directory
    return ArtifactService(directory, config_hash(config), config.sampling.seed, force=args.force)


def cmd_run(args, config: ScenarioConfig) -> int:
    grid = TorusGrid(config.grid.n)
    plus, minus = PotentialService(grid).from_config(config)
    artifacts = artifacts_for(args, config)
    trajectory = FlowService(grid).run_matched_ladder(plus, minus, config.flow.t_end, config.flow.ladder_depth)
    for index, state in enumerate(trajectory.states):
        artifacts.write_checkpoint(index, state)
    artifacts.write_diagnostics(trajectory.rows)
    log(f"✅ Run complete: {len(trajectory.states)} ladder states in {artifacts.directory}")
    return EXIT_OK


def cmd_dist(args, config: ScenarioConfig) -> int:
    grid = TorusGrid(config.grid.n)
    artifacts = artifacts_for(args, config)
    sources = VerifyService(config).sources
    metrics = MetricService(grid)
    if args.limit:
        plus, minus = PotentialService(grid).from_config(config)
        fields = metrics.dT_distance(plus, minus, sources)
        artifacts.write_distances(fields, "limit")
        pairs = holder_pairs(metrics, sources, config)
        try:
            fit = metrics.holder_fit(metrics.pair_values(fields, pairs), metrics.flat_pair_values(fields, pairs))
            artifacts.append_holder("d_T vs d_S", fit)
        except ValueError as e:
            log(f"⚠️ Hölder fit skipped: {e}")
        return EXIT_OK
    state = artifacts.checkpoint_at(args.t)
    m = metrics.from_field(state.u, f"t={state.t!r}")
    fields = metrics.eikonal_distance(m, sources) + metrics.lattice_distance(m, sources)
    artifacts.write_distances(fields, repr(state.t))
    return EXIT_OK


def holder_pairs(metrics: MetricService, sources, config: ScenarioConfig) -> np.ndarray:
    """Random pairs plus radial pairs from every source (spans the decades a Hölder fit needs)."""
    per_source = max(1, config.sampling.pairs // len(sources))
    radial = [metrics.radial_pairs(k, s, 0.5) for k, s in enumerate(sources)]
    return np.concatenate([metrics.random_pairs(len(sources), per_source, config.sampling.seed)] + radial)


def cmd_verify(args, config: ScenarioConfig) -> int:
    artifacts = artifacts_for(args, config)
    service = VerifyService(config, scenario=Path(args.config).stem)
    report = service.battery()
    artifacts.write_report(report)
    if report.rows:
        artifacts.write_diagnostics(report.rows)
    print(report.summary())
    return EXIT_OK if report.passed(settings.strict) else EXIT_CHECKS_FAILED


def cmd_counterexample(args, config: ScenarioConfig) -> int:
    artifacts = artifacts_for(args, config)
    service = VerifyService(config, scenario=Path(args.config).stem)
    report = service.counterexample_run(args.level or config.checks.counterexample_levels)
    artifacts.write_report(report, "counterexample.csv")
    print(report.summary())
    return EXIT_OK if report.passed(settings.strict) else EXIT_CHECKS_FAILED


def cmd_report(args, config: ScenarioConfig) -> int:
    artifacts = artifacts_for(args, config)
    report = artifacts.read_report()
    print(report.summary())
    states = artifacts.load_checkpoints()
    if states:
        last = states[-1]
        artifacts.write_heatmap("u_last.pgm", last.u.values)
        metrics = MetricService(last.grid)
        source = VerifyService(config).sources[0]
        field = metrics.lattice_distance(metrics.from_field(last.u), [source])[0]
        artifacts.write_heatmap("distance_last.pgm", field.values)
    else:
        log("⚠️ No checkpoints found, heatmaps skipped")
    return EXIT_OK if report.passed(settings.strict) else EXIT_CHECKS_FAILED


COMMANDS = {
    "run": cmd_run,
    "dist": cmd_dist,
    "verify": cmd_verify,
    "counterexample": cmd_counterexample,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    apply_overrides(threads=args.threads, seed=args.seed, output_dir=args.out, strict=args.strict or None)
    if args.quiet:
        settings.quiet = True
    try:
        config = load(args)
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        print(f"❌ {args.config}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (ValueError, FileNotFoundError) as e:
        print(f"❌ {args.command}: {e}", file=sys.stderr)
        return EXIT_INPUT
    except RuntimeError as e:
        print(f"❌ {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
