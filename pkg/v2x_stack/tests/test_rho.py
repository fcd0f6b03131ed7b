import numpy as np
import pandas as pd
import pytest

from v2x_stack.forecast import ZeroReferenceError
from v2x_stack.rho import (
    ScenarioMismatchError,
    WindowError,
    aggregate_report,
    foresight_gap,
    rec,
    run_day,
    shrink_window,
    solve_offline,
    summarize_sweep,
    sweep_error,
    sweep_runs,
    totals_from_costs,
)
from v2x_stack.solver.miqp import MiqpOptions
from v2x_stack.types import Channel, StackingMode
from v2x_stack.tests.util import community, fixed_result, parked_day, scenario

OPTIONS = MiqpOptions(gap=1e-9)


def test_shrink_window():
    assert shrink_window(1, 24) == tuple(range(1, 25))
    assert shrink_window(24, 24) == (24,)
    assert len(shrink_window(13, 24)) == 12
    assert shrink_window(13, 24)[0] == 13
    for t in (0, 25):
        with pytest.raises(WindowError):
            shrink_window(t, 24)


def test_rec_values():
    assert rec([[1.0, 1.0]], [[1.1, 0.9]]) == pytest.approx(0.1)
    actual = np.array([[1.0, 2.0], [0.5, 3.0]])
    assert rec(actual, actual) == 0.0
    assert rec(actual, 2 * actual) == pytest.approx(1.0)


def test_rec_errors():
    with pytest.raises(ZeroReferenceError):
        rec([[0.0, 0.0]], [[1.0, 1.0]])
    with pytest.raises(ValueError):
        rec([[1.0, 1.0]], [[1.0]])


def test_aggregate_reduction():
    report = aggregate_report(
        [
            fixed_result(StackingMode.charge_only, 100.0),
            fixed_result(StackingMode.full_stacking, 80.0),
            fixed_result(StackingMode.stacking_minus_v2b, 95.0),
        ]
    )
    assert report["reductions"]["charge_only"] == pytest.approx(0.0)
    assert report["reductions"]["full_stacking"] == pytest.approx(20.0)
    assert report["reductions"]["stacking_minus_v2b"] == pytest.approx(5.0)
    assert report["marginal_contributions"] == {"v2b": pytest.approx(15.0)}
    assert report["modes"]["full_stacking"]["total_cost"] == pytest.approx(80.0)


def test_aggregate_equal_costs():
    report = aggregate_report([fixed_result(mode, 10.0) for mode in StackingMode])
    assert all(value == pytest.approx(0.0) for value in report["reductions"].values())
    assert all(value == pytest.approx(0.0) for value in report["marginal_contributions"].values())
    assert len(report["marginal_contributions"]) == 3


def test_aggregate_without_base():
    report = aggregate_report([fixed_result(StackingMode.full_stacking, 10.0)])
    assert report["reductions"] == {}
    assert report["marginal_contributions"] == {}


def test_aggregate_zero_base():
    report = aggregate_report(
        [fixed_result(StackingMode.charge_only, 0.0), fixed_result(StackingMode.full_stacking, -1.0)]
    )
    assert report["reductions"]["charge_only"] == 0.0
    assert report["reductions"]["full_stacking"] is None


def test_aggregate_mixed_scenarios():
    with pytest.raises(ScenarioMismatchError):
        aggregate_report(
            [
                fixed_result(StackingMode.charge_only, 1.0, "abc"),
                fixed_result(StackingMode.full_stacking, 1.0, "def"),
            ]
        )
    with pytest.raises(ValueError):
        aggregate_report([])


def test_result_frames():
    result = fixed_result(StackingMode.full_stacking, 2.5, grid_energy=10.0)
    frame = result.costs_frame()
    assert list(frame["slot"]) == [1]
    assert totals_from_costs(frame) == result.total
    assert result.cost_matrix().tolist() == [[2.5]]
    assert result.summary()["grid_energy"] == pytest.approx(10.0)
    assert list(result.records_frame()["status"]) == ["optimal"]


def test_perfect_foresight_matches_offline():
    s = parked_day(horizon=3)
    rolling = run_day(s, mode=StackingMode.full_stacking, options=OPTIONS)
    offline = solve_offline(s, StackingMode.full_stacking, OPTIONS)
    assert rolling.window == (1, 2, 3)
    assert foresight_gap(rolling, offline) <= 1e-6
    assert rolling.violations == []
    assert set(rolling.records_frame()["status"]) == {"optimal"}
    assert rolling.recourse_slots == []
    assert rolling.scenario_hash == offline.scenario_hash


def test_rolling_state_carries():
    s = parked_day(horizon=3)
    rolling = run_day(s, options=OPTIONS)
    day = rolling.day_decisions()
    assert day.window == (1, 2, 3)
    assert day.ev_ids == ("a", "b")
    # Both EVs leave with their desired energy.
    assert day.energy[0, -1] >= 25.0 - 1e-3
    assert day.energy[1, -1] >= 20.0 - 1e-3


def test_charge_only_costs_more():
    s = parked_day(horizon=3)
    full = run_day(s, mode=StackingMode.full_stacking, options=OPTIONS)
    base = run_day(s, mode=StackingMode.charge_only, options=OPTIONS)
    assert base.total_cost >= full.total_cost - 1e-4


def test_empty_fleets_cost():
    s = scenario([community(1, 3, load=2.0), community(2, 3, load=1.0)], 3)
    result = run_day(s, options=OPTIONS)
    assert result.total_cost == pytest.approx(0.2 * 9.0, abs=1e-3)
    assert result.total.v2g_revenue == pytest.approx(0.0, abs=1e-6)
    assert result.total.battery == pytest.approx(0.0, abs=1e-6)


def test_sweep_zero_target():
    s = parked_day(horizon=2)
    baseline = run_day(s, options=OPTIONS)
    seen = []
    runs = sweep_runs(s, Channel.load, [0.0], [0, 1], options=OPTIONS, baseline=baseline, on_result=seen.append)
    assert len(seen) == 2
    assert list(runs["seed"]) == [0, 1]
    assert runs["rec"].tolist() == pytest.approx([0.0, 0.0], abs=1e-9)
    assert set(runs["band"]) == {"0-5%"}


def test_sweep_rejects_target():
    s = parked_day(horizon=2)
    baseline = run_day(s, options=OPTIONS)
    with pytest.raises(ValueError):
        sweep_runs(s, Channel.pv, [1.5], [0], options=OPTIONS, baseline=baseline)


def test_summarize_sweep():
    runs = pd.DataFrame(
        [
            {"channel": "load", "target": 0.3, "band": "30-35%", "seed": 0, "realized_re": 0.30, "rec": 0.1},
            {"channel": "load", "target": 0.3, "band": "30-35%", "seed": 1, "realized_re": 0.32, "rec": 0.3},
            {"channel": "load", "target": 0.0, "band": "0-5%", "seed": 0, "realized_re": 0.0, "rec": 0.0},
        ]
    )
    table = summarize_sweep(runs)
    assert list(table.columns) == ["channel", "target", "band", "mean_rec", "std_rec", "mean_re", "runs"]
    assert list(table["target"]) == [0.0, 0.3]
    row = table.iloc[1]
    assert row["mean_rec"] == pytest.approx(0.2)
    assert row["std_rec"] == pytest.approx(0.1)
    assert row["mean_re"] == pytest.approx(0.31)
    assert row["runs"] == 2


def test_sweep_error_table():
    s = parked_day(horizon=2)
    table = sweep_error(s, Channel.ev, [0.0], [3], options=OPTIONS)
    assert len(table) == 1
    assert table.loc[0, "band"] == "0-5%"
    assert table.loc[0, "mean_rec"] == pytest.approx(0.0, abs=1e-9)
    assert table.loc[0, "runs"] == 1
