"""
Command-line entry point.

    v2x_stack gen     write a generated scenario
    v2x_stack run     rolling-horizon days for chosen modes
    v2x_stack sweep   forecast-error sweeps
    v2x_stack compare every stacking mode and the aggregate report

Exit codes: 0 success, 1 invalid input, 2 solver failure, 3 I/O error.
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import argparse
import json
import logging
import os
import sys

from v2x_stack.db import ResultStore
from v2x_stack.forecast import make_forecaster
from v2x_stack.helper import band_label, configure_logging
from v2x_stack.rho import (
    DayResult,
    aggregate_report,
    foresight_gap,
    run_many,
    solve_offline,
    sweep_runs,
    summarize_sweep,
)
from v2x_stack.scenario import (
    FleetParams,
    default_scenario,
    dump_scenario,
    load_scenario,
    scenario_hash,
    validate_scenario,
)
from v2x_stack.solver.miqp import BranchRule, MiqpOptions
from v2x_stack.solver.qpcore import QpOptions
from v2x_stack.types import Channel, PeakScope, Scenario, StackingMode, TariffKind

logger = logging.getLogger(__name__)

OUTPUT_ENV = "V2X_STACK_OUTPUT_DIR"
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_SOLVER = 2
EXIT_IO = 3
FORESIGHT_TOLERANCE = 1e-6


@dataclass(frozen=True)
class RunConfig:
    command: str
    scenario: str = ""
    modes: Tuple[StackingMode, ...] = (StackingMode.full_stacking,)
    forecaster: str = "truth"
    channels: Tuple[Channel, ...] = ()
    targets: Tuple[float, ...] = ()
    seeds: Tuple[int, ...] = (0,)
    output_dir: str = "results"
    gap: float = 1e-4
    node_limit: int = 50_000
    int_tol: float = 1e-5
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    max_iter: int = 20_000
    branch_rule: str = BranchRule.most_fractional.name
    workers: int = 1
    check_foresight: bool = False
    store: str = ""

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        output_dir = os.environ.get(OUTPUT_ENV) or args.output_dir
        return cls(
            command=args.command,
            scenario=getattr(args, "scenario", "") or "",
            modes=tuple(StackingMode[m] for m in getattr(args, "modes", None) or ["full_stacking"]),
            forecaster=getattr(args, "forecaster", "truth"),
            channels=tuple(Channel[c] for c in getattr(args, "channels", None) or ()),
            targets=tuple(getattr(args, "targets", None) or ()),
            seeds=tuple(getattr(args, "seeds", None) or (0,)),
            output_dir=output_dir,
            gap=args.gap,
            node_limit=args.node_limit,
            int_tol=args.int_tol,
            eps_abs=args.eps_abs,
            eps_rel=args.eps_rel,
            max_iter=args.max_iter,
            branch_rule=args.branch_rule,
            workers=args.workers,
            check_foresight=getattr(args, "check_foresight", False),
            store=args.store or str(Path(output_dir) / "results.sqlite"),
        )

    def validate(self):
        if self.scenario and not os.path.isfile(self.scenario):
            raise ValueError(f"Scenario file {self.scenario} does not exist.")
        bad = [t for t in self.targets if not 0.0 <= t <= 1.0]
        if bad:
            raise ValueError(f"Error targets {bad} are outside [0, 1].")
        if self.workers < 1:
            raise ValueError("At least one worker is required.")

    def miqp_options(self) -> MiqpOptions:
        return MiqpOptions(
            gap=self.gap,
            node_limit=self.node_limit,
            int_tol=self.int_tol,
            branch_rule=BranchRule[self.branch_rule],
            qp=QpOptions(eps_abs=self.eps_abs, eps_rel=self.eps_rel, max_iter=self.max_iter),
        )

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["modes"] = [m.name for m in self.modes]
        out["channels"] = [c.name for c in self.channels]
        return out


def _add_solver_arguments(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("solver")
    group.add_argument("--gap", type=float, default=1e-4, help="relative optimality gap (default 1e-4)")
    group.add_argument("--node-limit", type=int, default=50_000, help="branch-and-bound node limit")
    group.add_argument("--int-tol", type=float, default=1e-5, help="integrality tolerance")
    group.add_argument("--eps-abs", type=float, default=1e-6, help="QP absolute tolerance")
    group.add_argument("--eps-rel", type=float, default=1e-6, help="QP relative tolerance")
    group.add_argument("--max-iter", type=int, default=20_000, help="QP iteration limit")
    group.add_argument(
        "--branch-rule",
        choices=[r.name for r in BranchRule],
        default=BranchRule.most_fractional.name,
    )
    group.add_argument("--workers", type=int, default=1, help="parallel day runs")


def _add_output_arguments(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--output-dir",
        default="results",
        help=f"output directory (overridden by ${OUTPUT_ENV})",
    )
    parser.add_argument("--store", default="", help="sqlite result store (default OUTPUT_DIR/results.sqlite)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="v2x_stack", description="Network-constrained V2X value stacking.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="count", default=0)
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", help="write a generated scenario")
    gen.add_argument("output", help="scenario JSON path")
    gen.add_argument("--evs-per-community", type=int, default=50)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--tariff", choices=[k.name for k in TariffKind], default=TariffKind.tou.name)
    gen.add_argument("--peak-scope", choices=[s.name for s in PeakScope], default=PeakScope.community.name)
    gen.add_argument("--horizon", type=int, default=24)
    gen.add_argument("--start-hour", type=int, default=12)
    gen.add_argument("--name", default=None)

    rolling = commands.add_parser("run", help="rolling-horizon days")
    rolling.add_argument("scenario")
    rolling.add_argument(
        "--modes", nargs="+", choices=[m.name for m in StackingMode], default=["full_stacking", "charge_only"]
    )
    rolling.add_argument("--forecaster", choices=["truth", "seasonal_naive"], default="truth")
    rolling.add_argument(
        "--check-foresight",
        action="store_true",
        help="compare truth-forecast full stacking with the offline optimum",
    )
    _add_output_arguments(rolling)
    _add_solver_arguments(rolling)

    sweep = commands.add_parser("sweep", help="forecast-error sweeps")
    sweep.add_argument("scenario")
    sweep.add_argument("--channels", nargs="+", choices=[c.name for c in Channel], default=["load"])
    sweep.add_argument("--targets", nargs="+", type=float, default=[0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35])
    sweep.add_argument("--seeds", nargs="+", type=int, default=list(range(5)))
    sweep.add_argument("--modes", nargs=1, choices=[m.name for m in StackingMode], default=["full_stacking"])
    _add_output_arguments(sweep)
    _add_solver_arguments(sweep)

    compare = commands.add_parser("compare", help="every stacking mode on one scenario")
    compare.add_argument("scenario")
    compare.add_argument(
        "--from-store",
        action="store_true",
        help="report from stored runs instead of solving",
    )
    _add_output_arguments(compare)
    _add_solver_arguments(compare)
    return parser


def _write_json(path: Path, value: Any):
    path.write_text(json.dumps(value, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _result_stem(digest: str, result: DayResult) -> str:
    f = result.forecaster
    parts = [digest, result.mode.name, str(f.get("provenance", "truth"))]
    if f.get("channel"):
        parts += [f["channel"], band_label(float(f.get("target_re") or 0.0)), f"s{f.get('seed')}"]
    return "_".join(parts)


def write_result(result: DayResult, out: Path) -> List[Path]:
    """Costs, decisions and slot diagnostics of one day as CSV."""
    stem = _result_stem(result.scenario_hash, result)
    written = []
    for suffix, frame in (
        ("costs", result.costs_frame()),
        ("decisions", result.day_decisions().to_frame()),
        ("slots", result.records_frame()),
    ):
        path = out / f"{stem}_{suffix}.csv"
        frame.to_csv(path, index=False)
        written.append(path)
    return written


def _load_valid(path: str) -> Scenario:
    scenario = load_scenario(path)
    problems = validate_scenario(scenario)
    if problems:
        for problem in problems:
            print(problem, file=sys.stderr)
        raise ValueError(f"Scenario {path} failed validation with {len(problems)} problems.")
    return scenario


def _manifest(config: RunConfig, scenario: Optional[Scenario], files: Sequence[Path]) -> Dict[str, Any]:
    manifest = {"config": config.to_dict(), "solver": asdict(config.miqp_options()), "files": [p.name for p in files]}
    manifest["solver"]["branch_rule"] = config.branch_rule
    if scenario is not None:
        manifest["scenario"] = {
            "name": scenario.name,
            "hash": scenario_hash(scenario),
            "battery_degradation_coeff": scenario.battery_degradation_coeff,
            "discomfort_coeffs": [c.building.discomfort_coeff for c in scenario.communities],
            "big_m": scenario.big_m,
            "tariff": {
                "kind": scenario.tariff.kind.name,
                "tou_prices": list(scenario.tariff.tou_prices),
                "tpt_energy_price": scenario.tariff.tpt_energy_price,
                "tpt_peak_price": scenario.tariff.tpt_peak_price,
                "peak_scope": scenario.peak_scope.name,
            },
        }
    return manifest


def cmd_gen(args: argparse.Namespace) -> int:
    scenario = default_scenario(
        args.evs_per_community,
        args.seed,
        TariffKind[args.tariff],
        horizon=args.horizon,
        start_hour=args.start_hour,
        peak_scope=PeakScope[args.peak_scope],
        fleet=FleetParams(horizon=args.horizon, start_hour=args.start_hour),
        name=args.name,
    )
    problems = validate_scenario(scenario)
    for problem in problems:
        logger.warning("%s", problem)
    target = Path(args.output)
    target.parent.mkdir(parents=True, exist_ok=True)
    dump_scenario(scenario, str(target))
    logger.info("wrote %s (%s)", target, scenario_hash(scenario))
    return EXIT_VALIDATION if problems else EXIT_OK


def _store_results(config: RunConfig, results: Sequence[DayResult]):
    store = ResultStore(config.store)
    try:
        for result in results:
            store.record(result)
    finally:
        store.close()


def cmd_run(config: RunConfig) -> int:
    scenario = _load_valid(config.scenario)
    digest = scenario_hash(scenario)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    options = config.miqp_options()
    tasks = [(scenario, make_forecaster(config.forecaster), mode, options) for mode in config.modes]
    results = run_many(tasks, config.workers)
    files: List[Path] = []
    for result in results:
        files += write_result(result, out)
    report = aggregate_report(results)
    if config.check_foresight and config.forecaster == "truth":
        rolling = next((r for r in results if r.mode is StackingMode.full_stacking), None)
        if rolling is not None:
            offline = solve_offline(scenario, StackingMode.full_stacking, options)
            gap = foresight_gap(rolling, offline)
            report["foresight"] = {
                "rolling_cost": rolling.total_cost,
                "offline_cost": offline.total_cost,
                "relative_gap": gap,
                "pass": gap <= FORESIGHT_TOLERANCE,
            }
            if gap > FORESIGHT_TOLERANCE:
                logger.warning("rolling cost differs from the offline optimum by %.3g", gap)
    report_path = out / f"{digest}_report.json"
    _write_json(report_path, report)
    files.append(report_path)
    _store_results(config, results)
    _write_json(out / "manifest.json", _manifest(config, scenario, files))
    return EXIT_OK


def cmd_sweep(config: RunConfig) -> int:
    scenario = _load_valid(config.scenario)
    if not config.channels or not config.targets:
        raise ValueError("A sweep needs at least one channel and one target.")
    digest = scenario_hash(scenario)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    options = config.miqp_options()
    mode = config.modes[0]
    baseline = run_many([(scenario, make_forecaster("truth"), mode, options)])[0]
    files: List[Path] = []
    for channel in config.channels:
        runs = sweep_runs(
            scenario,
            channel,
            config.targets,
            config.seeds,
            mode,
            options,
            baseline=baseline,
            workers=config.workers,
        )
        table = summarize_sweep(runs)
        for suffix, frame in (("runs", runs), ("table", table)):
            path = out / f"{digest}_{mode.name}_sweep_{channel.name}_{suffix}.csv"
            frame.to_csv(path, index=False)
            files.append(path)
        logger.info("sweep %s written to %s", channel.name, files[-1])
    _store_results(config, [baseline])
    _write_json(out / "manifest.json", _manifest(config, scenario, files))
    return EXIT_OK


def cmd_compare(config: RunConfig, from_store: bool = False) -> int:
    scenario = _load_valid(config.scenario)
    digest = scenario_hash(scenario)
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: List[Path] = []
    if from_store:
        store = ResultStore(config.store)
        try:
            report = store.report(digest)
        finally:
            store.close()
    else:
        options = config.miqp_options()
        tasks = [(scenario, make_forecaster("truth"), mode, options) for mode in StackingMode]
        results = run_many(tasks, config.workers)
        for result in results:
            files += write_result(result, out)
        report = aggregate_report(results)
        _store_results(config, results)
    report_path = out / f"{digest}_compare.json"
    _write_json(report_path, report)
    files.append(report_path)
    _write_json(out / "manifest.json", _manifest(config, scenario, files))
    return EXIT_OK


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, dispatch the subcommand and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose - args.quiet)
    try:
        if args.command == "gen":
            return cmd_gen(args)
        config = RunConfig.from_args(args)
        config.validate()
        if args.command == "run":
            return cmd_run(config)
        if args.command == "sweep":
            return cmd_sweep(config)
        return cmd_compare(config, args.from_store)
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER


def main():
    sys.exit(run())
