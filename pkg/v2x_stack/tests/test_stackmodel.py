from dataclasses import replace

import numpy as np
import pytest

from v2x_stack.solver.miqp import MiqpOptions, MiqpStatus, solve_miqp
from v2x_stack.stackmodel import (
    RECOURSE_BEST_EFFORT,
    RECOURSE_NO_EXPORT,
    CostBreakdown,
    DayState,
    DecisionSet,
    ModelInfeasibleError,
    audit_decisions,
    battery_step,
    build_model,
    decode,
    enabled_streams,
    evaluate_costs,
    mid_market_price,
    tariff_cost,
    terminal_shortfalls,
    thermal_step,
    unreachable_evs,
)
from v2x_stack.types import Stream, StackingMode, Tariff, TariffKind
from v2x_stack.tests.util import community, ev, parked_day, scenario

OPTIONS = MiqpOptions(gap=1e-6)


def solved(s, mode, window=None, **kwargs):
    window = window or tuple(range(1, s.horizon + 1))
    model = build_model(s, DayState.initial(s), window, mode, **kwargs)
    solution = solve_miqp(model, OPTIONS)
    assert solution.status is MiqpStatus.optimal
    return model, solution


def single_slot(s, **values):
    """One-slot decisions for a scenario with one community and one EV."""
    evs = len(s.evs)
    arrays = {name: np.zeros((evs, 1)) for name in ("charge", "discharge", "mode")}
    arrays["energy"] = np.full((evs, 1), np.nan)
    for name in (
        "grid", "renew", "hvac", "v2b", "v2g", "trade_sell", "trade_buy",
        "ev_export", "community_export", "direction", "load", "pv",
    ):
        arrays[name] = np.zeros((1, 1))
    arrays["indoor_temp"] = np.full((1, 1), s.communities[0].building.preferred_temp)
    arrays.update({k: np.full((1, 1), float(v)) for k, v in values.items()})
    return DecisionSet(
        window=(1,),
        node_ids=s.node_ids,
        ev_ids=tuple(e.id for e in s.evs),
        ev_nodes=tuple(e.community_id for e in s.evs),
        **arrays,
    )


def test_battery_step():
    assert battery_step(20.0, 0.0, 0.0, 0.9, 0.95) == 20.0
    assert battery_step(20.0, 10.0, 0.0, 0.9, 0.95) == pytest.approx(29.0)
    assert battery_step(29.0, 0.0, 9.5, 0.9, 0.95) == pytest.approx(19.0)
    with pytest.raises(ValueError):
        battery_step(20.0, -1.0, 0.0, 0.9, 0.95)


def test_thermal_step():
    assert thermal_step(25.0, 25.0, 0.0, 1.0, 3.3, 1.35) == pytest.approx(25.0)
    assert thermal_step(25.0, 30.0, 0.0, 1.0, 3.3, 1.35) == pytest.approx(26.1223, abs=1e-4)
    assert thermal_step(25.0, 30.0, 5.0 / 1.35, 1.0, 3.3, 1.35) == pytest.approx(25.0)
    with pytest.raises(ValueError):
        thermal_step(25.0, 30.0, 0.0, 1.0, 0.0, 1.35)


def test_mid_market_price():
    assert mid_market_price(0.32, 0.10) == pytest.approx(0.21)
    assert mid_market_price(0.25, 0.25) == pytest.approx(0.25)
    assert mid_market_price(0.32, 0.20) == pytest.approx(0.26)
    with pytest.raises(ValueError):
        mid_market_price(0.10, 0.32)


def test_tariff_cost_tou():
    tariff = Tariff(TariffKind.tou, v2g_prices=(0.05, 0.05), tou_prices=(0.20, 0.32))
    assert tariff_cost([[1.0, 1.0]], tariff) == pytest.approx(0.52)
    assert tariff_cost([[0.0, 0.0]], tariff) == 0.0


def test_tariff_cost_tpt():
    tariff = Tariff(TariffKind.tpt, v2g_prices=(0.05, 0.05))
    assert tariff_cost([[2.0, 4.0]], tariff) == pytest.approx(4.4)
    assert tariff_cost([[0.0, 0.0]], tariff) == 0.0
    # A realized peak above the profile is still billed.
    assert tariff_cost([[2.0, 4.0]], tariff, realized_peak_so_far=5.0) == pytest.approx(1.2 + 4.0)
    with pytest.raises(ValueError):
        tariff_cost([[-1.0, 0.0]], tariff)


def test_slot_costs_match_tariff():
    s = scenario([community(1, 2)], 2, kind=TariffKind.tpt)
    d = single_slot(s)
    two = DecisionSet.concat([d, replace(d, window=(2,))], (), ())
    two = replace(two, grid=np.array([[2.0, 4.0]]))
    assert evaluate_costs(two, s).grid == pytest.approx(4.4)


def test_cost_terms():
    s = scenario(
        [community(1, 1, [ev("e", 1, 1, 1, initial=20.0, desired=20.0)])],
        1,
        tou=0.32,
        v2g=0.05,
    )
    d = single_slot(s, grid=1.0, charge=2.0)
    costs = evaluate_costs(d, s)
    assert costs.grid == pytest.approx(0.32)
    assert costs.battery == pytest.approx(0.04)
    assert costs.discomfort == 0.0
    d = single_slot(s, v2g=3.0)
    costs = evaluate_costs(d, s)
    assert costs.v2g_revenue == pytest.approx(0.15)
    assert costs.total == pytest.approx(-0.15)
    assert costs.identity_error() == 0.0


def test_zero_decisions_cost_nothing():
    s = scenario([community(1, 1)], 1)
    assert evaluate_costs(single_slot(s), s) == CostBreakdown()


def test_charge_only_equal_split():
    s = scenario([community(1, 4, [ev("e", 1, 1, 4, initial=10.0, desired=20.0)])], 4)
    model, solution = solved(s, StackingMode.charge_only)
    d = decode(model, solution.x)
    assert d.charge[0] == pytest.approx([2.5, 2.5, 2.5, 2.5], abs=1e-3)
    assert d.discharge[0] == pytest.approx(np.zeros(4), abs=1e-9)
    assert d.energy[0, -1] == pytest.approx(20.0, abs=1e-4)
    assert d.grid[0] == pytest.approx([2.5, 2.5, 2.5, 2.5], abs=1e-3)


def test_empty_fleets_degenerate():
    s = scenario([community(1, 3, load=2.0), community(2, 3, load=1.0)], 3)
    model, solution = solved(s, StackingMode.full_stacking)
    d = decode(model, solution.x)
    for name in ("v2b", "v2g", "trade_sell", "trade_buy"):
        assert getattr(d, name) == pytest.approx(np.zeros((2, 3)), abs=1e-4)
    assert d.grid == pytest.approx(np.array([[2.0] * 3, [1.0] * 3]), abs=1e-3)
    assert evaluate_costs(d, s).total == pytest.approx(0.2 * 9.0, abs=1e-3)


def test_unreachable_departure_named():
    s = scenario(
        [community(1, 4, [ev("late", 1, 1, 2, initial=10.0, desired=40.0), ev("fine", 1, 1, 4)])],
        4,
    )
    with pytest.raises(ModelInfeasibleError) as info:
        build_model(s, DayState.initial(s), (1, 2, 3, 4), StackingMode.full_stacking)
    assert info.value.ev_ids == ("late",)
    assert "late" in str(info.value)
    assert unreachable_evs(s.evs, DayState.initial(s), (1, 2, 3, 4), 1.0) == ["late"]


def test_best_effort_reports_shortfall():
    s = scenario([community(1, 2, [ev("late", 1, 1, 2, initial=10.0, desired=40.0)])], 2)
    model, solution = solved(s, StackingMode.full_stacking, recourse=RECOURSE_BEST_EFFORT)
    shortfalls = terminal_shortfalls(model, solution.x)
    assert shortfalls["late"] == pytest.approx(16.0, abs=1e-3)


def test_enabled_streams():
    assert enabled_streams(StackingMode.full_stacking) == {Stream.v2b, Stream.v2g, Stream.trading}
    assert enabled_streams(StackingMode.full_stacking, RECOURSE_NO_EXPORT) == {Stream.v2b}
    assert enabled_streams(StackingMode.v2g_only, RECOURSE_NO_EXPORT) == frozenset()
    assert enabled_streams(StackingMode.charge_only) == frozenset()


def test_modes_nest():
    s = parked_day()
    objectives = {}
    for mode in StackingMode:
        _, solution = solved(s, mode)
        objectives[mode] = solution.objective
    full = objectives[StackingMode.full_stacking]
    for mode, objective in objectives.items():
        assert full <= objective + 1e-4, mode.name
        assert objective <= objectives[StackingMode.charge_only] + 1e-4, mode.name


def test_stacking_decisions_pass_audit():
    s = parked_day()
    model, solution = solved(s, StackingMode.full_stacking)
    d = decode(model, solution.x)
    assert audit_decisions(d, s, StackingMode.full_stacking) == []
    assert np.all(d.charge * d.discharge <= 1e-9)
    balance = d.trade_sell.sum(axis=0) - d.trade_buy.sum(axis=0)
    assert balance == pytest.approx(np.zeros(4), abs=1e-6)
    assert evaluate_costs(d, s).total == pytest.approx(solution.objective, abs=1e-3)


def test_restricted_modes_pass_audit():
    s = parked_day()
    for mode in (StackingMode.charge_only, StackingMode.v2b_only, StackingMode.trading_only):
        model, solution = solved(s, mode)
        assert audit_decisions(decode(model, solution.x), s, mode) == [], mode.name


def test_audit_flags_broken_decisions():
    s = parked_day()
    model, solution = solved(s, StackingMode.charge_only)
    d = decode(model, solution.x)
    broken = replace(d, discharge=d.discharge + 1.0, v2g=d.v2g + 1.0)
    codes = {v.code for v in audit_decisions(broken, s, StackingMode.charge_only, tolerance=1e-4)}
    assert {"ev.exclusive", "mode.discharge", "community.ev_export", "mode.v2g"} <= codes


def test_later_window_uses_state():
    s = parked_day()
    state = DayState(energy={"a": 28.0, "b": 17.0}, indoor_temp=(25.0, 25.0), peak=(0.0, 0.0))
    model = build_model(s, state, (3, 4), StackingMode.full_stacking)
    solution = solve_miqp(model, OPTIONS)
    d = decode(model, solution.x)
    assert d.window == (3, 4)
    expected = 28.0 + d.charge[0, 0] - d.discharge[0, 0]
    assert d.energy[0, 0] == pytest.approx(expected, abs=1e-4)
    assert d.energy[:, -1] == pytest.approx([25.0, 20.0], abs=1e-4)


def test_bad_window():
    s = parked_day()
    with pytest.raises(ValueError):
        build_model(s, DayState.initial(s), (), StackingMode.full_stacking)
    with pytest.raises(ValueError):
        build_model(s, DayState.initial(s), (1, 3), StackingMode.full_stacking)
    with pytest.raises(ValueError):
        build_model(s, DayState.initial(s), (4, 5), StackingMode.full_stacking)
