"""
Dynamic rolling-horizon operation over one day.

At every slot t the scheduler re-plans the shrinking window t..H with
realized data at t and forecasts after it, executes only slot t, and
advances EV energies, indoor temperatures and import peaks with the
realized dynamics.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from v2x_stack.forecast import (
    ForecastBundle,
    Forecaster,
    InjectedErrorForecaster,
    TruthForecaster,
    ZeroReferenceError,
    bundle_errors,
    merge_realized,
    truth_bundle,
)
from v2x_stack.helper import band_label
from v2x_stack.scenario import scenario_hash
from v2x_stack.solver.miqp import MiqpOptions, MiqpSolution, MiqpStatus, solve_miqp
from v2x_stack.stackmodel import (
    RECOURSE_BEST_EFFORT,
    RECOURSE_NONE,
    CostBreakdown,
    DayState,
    DecisionSet,
    ModelInfeasibleError,
    advance_peak,
    audit_decisions,
    battery_step,
    build_model,
    costs_frame,
    decode,
    evaluate_community_costs,
    terminal_shortfalls,
    thermal_step,
)
from v2x_stack.types import LEAVE_ONE_OUT, Channel, Scenario, StackingMode, Violation

logger = logging.getLogger(__name__)


class WindowError(ValueError):
    pass


class ScenarioMismatchError(ValueError):
    pass


class NoDecisionError(RuntimeError):
    """No recourse level produced an executable decision for a slot."""

    def __init__(self, message: str, slot: int):
        super().__init__(message)
        self.slot = slot


def shrink_window(t: int, horizon: int) -> Tuple[int, ...]:
    if not 1 <= t <= horizon:
        raise WindowError(f"Slot {t} is outside 1..{horizon}.")
    return tuple(range(t, horizon + 1))


@dataclass(frozen=True)
class SlotRecord:
    """Solver outcome and diagnostics of one executed slot."""

    slot: int
    status: str
    recourse: int = RECOURSE_NONE
    nodes: int = 0
    gap: float = 0.0
    violations: Tuple[Violation, ...] = ()
    shortfalls: Tuple[Tuple[str, float], ...] = ()


@dataclass(frozen=True, eq=False)
class DayResult:
    scenario_name: str
    scenario_hash: str
    mode: StackingMode
    forecaster: Dict[str, Any]
    node_ids: Tuple[int, ...]
    decisions: Tuple[DecisionSet, ...]
    slot_costs: Tuple[Tuple[CostBreakdown, ...], ...]
    bundles: Tuple[ForecastBundle, ...]
    records: Tuple[SlotRecord, ...]

    @property
    def window(self) -> Tuple[int, ...]:
        return tuple(record.slot for record in self.records)

    @property
    def total(self) -> CostBreakdown:
        total = CostBreakdown()
        for per_community in self.slot_costs:
            for cost in per_community:
                total = total + cost
        return total

    @property
    def total_cost(self) -> float:
        return self.total.total

    def cost_matrix(self) -> np.ndarray:
        """Total cost per community (rows) and slot (columns)."""
        return np.array([[c.total for c in per_community] for per_community in self.slot_costs]).T

    @property
    def violations(self) -> List[Violation]:
        return [v for record in self.records for v in record.violations]

    @property
    def recourse_slots(self) -> List[int]:
        return [record.slot for record in self.records if record.recourse > RECOURSE_NONE]

    def day_decisions(self) -> DecisionSet:
        ev_ids: List[str] = []
        ev_nodes: List[int] = []
        for part in self.decisions:
            for ev_id, node in zip(part.ev_ids, part.ev_nodes):
                if ev_id not in ev_ids:
                    ev_ids.append(ev_id)
                    ev_nodes.append(node)
        return DecisionSet.concat(self.decisions, ev_ids, ev_nodes)

    def costs_frame(self) -> pd.DataFrame:
        return costs_frame(self.slot_costs, self.window, self.node_ids)

    def records_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "slot": r.slot,
                    "status": r.status,
                    "recourse": r.recourse,
                    "nodes": r.nodes,
                    "gap": r.gap,
                    "violations": len(r.violations),
                    "shortfall_kwh": sum(kwh for _, kwh in r.shortfalls),
                }
                for r in self.records
            ]
        )

    def summary(self) -> Dict[str, Any]:
        total = self.total
        return {
            "scenario": self.scenario_name,
            "scenario_hash": self.scenario_hash,
            "mode": self.mode.name,
            "forecaster": dict(self.forecaster),
            "total_cost": total.total,
            "grid_cost": total.grid,
            "battery_cost": total.battery,
            "discomfort": total.discomfort,
            "v2g_revenue": total.v2g_revenue,
            "trade_settlement": total.trade_settlement,
            "grid_energy": total.grid_energy,
            "hvac_energy": total.hvac_energy,
            "violations": len(self.violations),
            "recourse_slots": self.recourse_slots,
        }


def totals_from_costs(frame: pd.DataFrame) -> CostBreakdown:
    """Sum a cost table written by DayResult.costs_frame."""
    return CostBreakdown(**{f.name: float(frame[f.name].sum()) for f in fields(CostBreakdown)})


def _solve_window(
    scenario: Scenario,
    state: DayState,
    window: Tuple[int, ...],
    mode: StackingMode,
    bundle: ForecastBundle,
    options: MiqpOptions,
) -> Tuple[DecisionSet, MiqpSolution, int, Dict[str, float]]:
    """Solve with the lowest recourse level that yields a decision."""
    slot = window[0]
    for level in range(RECOURSE_NONE, RECOURSE_BEST_EFFORT + 1):
        if level > RECOURSE_NONE:
            logger.warning("slot %d: recourse level %d", slot, level)
        try:
            model = build_model(scenario, state, window, mode, bundle, recourse=level)
        except ModelInfeasibleError as e:
            logger.warning("slot %d: %s", slot, e)
            continue
        solution = solve_miqp(model, options)
        if solution.x is None:
            logger.warning("slot %d: solver stopped at %s without a decision", slot, solution.status.name)
            continue
        if solution.status is not MiqpStatus.optimal:
            logger.warning("slot %d: solver stopped at %s, gap %.3g", slot, solution.status.name, solution.gap)
        shortfalls = terminal_shortfalls(model, solution.x)
        for ev_id, kwh in shortfalls.items():
            logger.warning("slot %d: EV %s departs %.4f kWh short", slot, ev_id, kwh)
        return decode(model, solution.x), solution, level, shortfalls
    raise NoDecisionError(f"No executable decision for slot {slot} in {mode.name}.", slot)


def _executed(plan: DecisionSet, scenario: Scenario, state: DayState, slot: int) -> DecisionSet:
    """Slot decisions of the realized EVs with realized battery and thermal dynamics."""
    step = plan.take(slot)
    specs = {ev.id: ev for ev in scenario.evs}
    keep = [u for u, ev_id in enumerate(step.ev_ids) if ev_id in specs]
    step = DecisionSet.concat([step], [step.ev_ids[u] for u in keep], [step.ev_nodes[u] for u in keep])
    energy = np.full(len(step.ev_ids), np.nan)
    for u, ev_id in enumerate(step.ev_ids):
        ev = specs[ev_id]
        if ev.present(slot):
            energy[u] = battery_step(
                state.energy_of(ev),
                step.charge[u, 0],
                step.discharge[u, 0],
                ev.charge_eff,
                ev.discharge_eff,
                scenario.slot_duration,
            )
    temps = np.array(
        [
            thermal_step(
                state.indoor_temp[i],
                c.building.outdoor_temp[slot - 1],
                step.hvac[i, 0],
                c.building.hvac_mode,
                c.building.heat_capacity,
                c.building.thermal_resistance,
                scenario.slot_duration,
            )
            for i, c in enumerate(scenario.communities)
        ]
    ).reshape(-1, 1)
    values = {f.name: getattr(step, f.name) for f in fields(step)}
    values["energy"] = energy.reshape(-1, 1)
    values["indoor_temp"] = temps
    return DecisionSet(**values)


def _advance(state: DayState, executed: DecisionSet, scenario: Scenario) -> DayState:
    energy = dict(state.energy)
    for u, ev_id in enumerate(executed.ev_ids):
        if np.isfinite(executed.energy[u, 0]):
            energy[ev_id] = float(executed.energy[u, 0])
    return DayState(
        energy=energy,
        indoor_temp=tuple(float(t) for t in executed.indoor_temp[:, 0]),
        peak=advance_peak(executed, scenario, state.peak),
    )


def run_day(
    scenario: Scenario,
    forecaster: Optional[Forecaster] = None,
    mode: StackingMode = StackingMode.full_stacking,
    options: Optional[MiqpOptions] = None,
    *,
    audit_tolerance: float = 1e-6,
) -> DayResult:
    """Rolling-horizon operation of one day."""
    forecaster = forecaster or TruthForecaster()
    options = options or MiqpOptions()
    H = scenario.horizon
    state = DayState.initial(scenario)
    executed_sets, slot_costs, bundles, records = [], [], [], []
    logger.info("run %s %s with %s forecasts", scenario.name, mode.name, forecaster.provenance.name)
    for t in range(1, H + 1):
        window = shrink_window(t, H)
        bundle = merge_realized(forecaster.forecast(scenario, t), scenario, t)
        plan, solution, level, shortfalls = _solve_window(scenario, state, window, mode, bundle, options)
        executed = _executed(plan, scenario, state, t)
        costs = evaluate_community_costs(executed, scenario, state.peak)
        violations = audit_decisions(executed, scenario, mode, recourse=level, tolerance=audit_tolerance)
        for v in violations:
            logger.warning("slot %d: %s", t, v)
        state = _advance(state, executed, scenario)
        executed_sets.append(executed)
        slot_costs.append(tuple(costs))
        bundles.append(bundle)
        records.append(
            SlotRecord(
                slot=t,
                status=solution.status.name,
                recourse=level,
                nodes=solution.nodes,
                gap=float(solution.gap),
                violations=tuple(violations),
                shortfalls=tuple(sorted(shortfalls.items())),
            )
        )
        logger.info(
            "slot %d/%d %s cost %.4f", t, H, solution.status.name, sum(c.total for c in costs)
        )
    result = DayResult(
        scenario_name=scenario.name,
        scenario_hash=scenario_hash(scenario),
        mode=mode,
        forecaster=forecaster.describe(),
        node_ids=scenario.node_ids,
        decisions=tuple(executed_sets),
        slot_costs=tuple(slot_costs),
        bundles=tuple(bundles),
        records=tuple(records),
    )
    logger.info("run %s %s total cost %.4f", scenario.name, mode.name, result.total_cost)
    return result


def solve_offline(
    scenario: Scenario,
    mode: StackingMode = StackingMode.full_stacking,
    options: Optional[MiqpOptions] = None,
    *,
    audit_tolerance: float = 1e-6,
) -> DayResult:
    """One full-horizon solve under perfect information."""
    options = options or MiqpOptions()
    window = shrink_window(1, scenario.horizon)
    state = DayState.initial(scenario)
    bundle = truth_bundle(scenario)
    plan, solution, level, shortfalls = _solve_window(scenario, state, window, mode, bundle, options)
    executed_sets, slot_costs, records = [], [], []
    peak = state.peak
    for t in window:
        step = plan.take(t)
        costs = evaluate_community_costs(step, scenario, peak)
        peak = advance_peak(step, scenario, peak)
        violations = audit_decisions(step, scenario, mode, recourse=level, tolerance=audit_tolerance)
        executed_sets.append(step)
        slot_costs.append(tuple(costs))
        records.append(
            SlotRecord(
                slot=t,
                status=solution.status.name,
                recourse=level,
                nodes=solution.nodes if t == 1 else 0,
                gap=float(solution.gap),
                violations=tuple(violations),
                shortfalls=tuple(sorted(shortfalls.items())) if t == 1 else (),
            )
        )
    return DayResult(
        scenario_name=scenario.name,
        scenario_hash=scenario_hash(scenario),
        mode=mode,
        forecaster={"provenance": "offline"},
        node_ids=scenario.node_ids,
        decisions=tuple(executed_sets),
        slot_costs=tuple(slot_costs),
        bundles=(bundle,),
        records=tuple(records),
    )


def rec(actual_costs, perturbed_costs) -> float:
    """Absolute cost deviation summed over communities and slots, relative to the actual total."""
    actual = np.asarray(actual_costs, dtype=float)
    perturbed = np.asarray(perturbed_costs, dtype=float)
    if actual.shape != perturbed.shape:
        raise ValueError(f"Cost shapes {actual.shape} and {perturbed.shape} differ.")
    denominator = actual.sum()
    if denominator <= 0.0:
        raise ZeroReferenceError(f"Actual costs sum to {denominator}.")
    return float(np.abs(perturbed - actual).sum() / denominator)


def _run_task(task: Tuple[Scenario, Forecaster, StackingMode, MiqpOptions]) -> DayResult:
    scenario, forecaster, mode, options = task
    return run_day(scenario, forecaster, mode, options)


def run_many(
    tasks: Sequence[Tuple[Scenario, Forecaster, StackingMode, MiqpOptions]], workers: int = 1
) -> List[DayResult]:
    """Independent days in parallel processes; order follows tasks."""
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(task) for task in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_task, tasks))


def sweep_runs(
    scenario: Scenario,
    channel: Channel,
    targets: Sequence[float],
    seeds: Sequence[int],
    mode: StackingMode = StackingMode.full_stacking,
    options: Optional[MiqpOptions] = None,
    *,
    baseline: Optional[DayResult] = None,
    workers: int = 1,
    on_result: Optional[Callable[[DayResult], None]] = None,
) -> pd.DataFrame:
    """REC of every (target, seed) run against the perfect-forecast day."""
    options = options or MiqpOptions()
    if baseline is None:
        baseline = run_day(scenario, TruthForecaster(), mode, options)
    pairs = [(target, seed) for target in targets for seed in seeds]
    for target, _ in pairs:
        if not 0.0 <= target <= 1.0:
            raise ValueError(f"Target relative error {target} is outside [0, 1].")
    tasks = [
        (scenario, InjectedErrorForecaster(channel, target, seed), mode, options)
        for target, seed in pairs
    ]
    results = run_many(tasks, workers)
    actual = baseline.cost_matrix()
    rows = []
    for (target, seed), task, result in zip(pairs, tasks, results):
        if on_result is not None:
            on_result(result)
        realized = bundle_errors(task[1].forecast(scenario, 1), scenario)[channel.name] if target > 0 else 0.0
        rows.append(
            {
                "channel": channel.name,
                "target": target,
                "band": band_label(target),
                "seed": seed,
                "realized_re": realized,
                "rec": rec(actual, result.cost_matrix()),
                "total_cost": result.total_cost,
            }
        )
    return pd.DataFrame(rows)


def sweep_error(
    scenario: Scenario,
    channel: Channel,
    targets: Sequence[float],
    seeds: Sequence[int],
    mode: StackingMode = StackingMode.full_stacking,
    options: Optional[MiqpOptions] = None,
    **kwargs,
) -> pd.DataFrame:
    """Mean and standard deviation of REC per target band."""
    runs = sweep_runs(scenario, channel, targets, seeds, mode, options, **kwargs)
    logger.info("sweep %s: %d runs over %d targets", channel.name, len(runs), len(targets))
    return summarize_sweep(runs)


def summarize_sweep(runs: pd.DataFrame) -> pd.DataFrame:
    table = (
        runs.groupby(["channel", "target", "band"], sort=True)
        .agg(
            mean_rec=("rec", "mean"),
            std_rec=("rec", lambda v: float(np.std(v))),
            mean_re=("realized_re", "mean"),
            runs=("rec", "size"),
        )
        .reset_index()
    )
    return table


def _reduction(base: float, cost: float) -> Optional[float]:
    if base == 0.0:
        return 0.0 if cost == 0.0 else None
    return 100.0 * (base - cost) / base


def aggregate_report(results: Sequence[DayResult]) -> Dict[str, Any]:
    """
    Cost reduction of every mode relative to charge_only, marginal
    contribution of each stream and per-mode totals.
    """
    if not results:
        raise ValueError("No results to aggregate.")
    hashes = {r.scenario_hash for r in results}
    if len(hashes) > 1:
        raise ScenarioMismatchError(f"Results come from {len(hashes)} different scenarios.")
    by_mode = {r.mode: r for r in results}
    modes = {
        mode.name: {
            "total_cost": r.total.total,
            "grid_energy": r.total.grid_energy,
            "discomfort": r.total.discomfort,
            "hvac_energy": r.total.hvac_energy,
            "v2g_revenue": r.total.v2g_revenue,
            "violations": len(r.violations),
        }
        for mode, r in by_mode.items()
    }
    reductions: Dict[str, Optional[float]] = {}
    marginal: Dict[str, Optional[float]] = {}
    base = by_mode.get(StackingMode.charge_only)
    if base is None:
        logger.info("no charge_only result; cost reductions are not reported")
    else:
        for mode, r in by_mode.items():
            reductions[mode.name] = _reduction(base.total_cost, r.total_cost)
        full = reductions.get(StackingMode.full_stacking.name)
        for stream, without in LEAVE_ONE_OUT.items():
            other = reductions.get(without.name)
            if full is not None and other is not None:
                marginal[stream.name] = full - other
    return {
        "scenario": results[0].scenario_name,
        "scenario_hash": results[0].scenario_hash,
        "modes": modes,
        "reductions": reductions,
        "marginal_contributions": marginal,
    }


def foresight_gap(rolling: DayResult, offline: DayResult) -> float:
    """Relative difference between a rolling day and the offline optimum."""
    reference = max(1.0, abs(offline.total_cost))
    return abs(rolling.total_cost - offline.total_cost) / reference

