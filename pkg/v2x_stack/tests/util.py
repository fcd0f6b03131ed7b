""" Small hand-built scenarios shared by the tests. """

from typing import Sequence, Union

from v2x_stack.rho import DayResult, SlotRecord
from v2x_stack.stackmodel import CostBreakdown
from v2x_stack.types import (
    BuildingSpec,
    CommunitySpec,
    DayHistory,
    EvSpec,
    GridModel,
    PeakScope,
    Scenario,
    Tariff,
    TariffKind,
)

Series = Union[float, Sequence[float]]


def series(value: Series, horizon: int) -> tuple:
    if isinstance(value, (int, float)):
        return tuple(float(value) for _ in range(horizon))
    assert len(value) == horizon
    return tuple(float(v) for v in value)


def ev(ev_id, node, arrival, departure, initial=20.0, desired=30.0, limit=7.0, eff=1.0):
    return EvSpec(
        id=ev_id,
        community_id=node,
        arrival_slot=arrival,
        departure_slot=departure,
        capacity_upper=50.0,
        capacity_lower=5.0,
        initial_energy=initial,
        desired_energy=desired,
        charge_limit=limit,
        discharge_limit=limit,
        charge_eff=eff,
        discharge_eff=eff,
    )


def community(node, horizon, fleet=(), load: Series = 0.0, pv: Series = 0.0, outdoor: Series = 25.0, cap=20.0):
    return CommunitySpec(
        node_id=node,
        building=BuildingSpec(
            inflexible_load=series(load, horizon),
            outdoor_temp=series(outdoor, horizon),
        ),
        fleet=tuple(fleet),
        pv_available=series(pv, horizon),
        grid_import_cap=cap,
        trade_buy_cap=cap,
        trade_sell_cap=cap,
        v2b_cap=cap,
        v2g_cap=cap,
    )


def feeder(nodes, horizon):
    """Short per-unit feeder with loose limits."""
    branches = nodes - 1
    return GridModel(
        node_count=nodes,
        resistance=(0.01,) * branches,
        reactance=(0.01,) * branches,
        reactive_load=tuple((0.0,) * horizon for _ in range(nodes)),
        voltage_min=(0.5,) * nodes,
        voltage_max=(1.5,) * nodes,
        flow_min=(-1000.0,) * branches,
        flow_max=(1000.0,) * branches,
        reactive_min=(-1000.0,) * branches,
        reactive_max=(1000.0,) * branches,
        slack_voltage=(1.0,) * horizon,
        base_kva=100.0,
        impedance_unit="pu",
    )


def scenario(
    communities,
    horizon,
    tou: Series = 0.2,
    v2g: Series = 0.05,
    kind=TariffKind.tou,
    peak_scope=PeakScope.community,
    with_history=False,
    name="tiny",
):
    communities = tuple(communities)
    history = None
    if with_history:
        history = tuple(
            DayHistory(
                load=tuple(c.building.inflexible_load) * (24 // horizon + 1),
                pv=tuple(c.pv_available) * (24 // horizon + 1),
                arrivals=tuple(0 for _ in range(24)),
            )
            for c in communities
        )
    return Scenario(
        horizon=horizon,
        communities=communities,
        grid=feeder(max(c.node_id for c in communities) + 1, horizon),
        tariff=Tariff(kind=kind, v2g_prices=series(v2g, horizon), tou_prices=series(tou, horizon)),
        big_m=100.0,
        peak_scope=peak_scope,
        name=name,
        history=history,
    )


def parked_day(load=3.0, horizon=4):
    """Two communities, one EV each parked all day, steady building load."""
    return scenario(
        [
            community(1, horizon, [ev("a", 1, 1, horizon, initial=25.0, desired=25.0)], load=load),
            community(2, horizon, [ev("b", 2, 1, horizon, initial=15.0, desired=20.0)], load=1.0),
        ],
        horizon,
        tou=[0.2, 0.3, 0.3, 0.2][:horizon] if horizon <= 4 else 0.25,
        v2g=0.05,
    )


def fixed_result(mode, cost, scenario_hash="abc", grid_energy=0.0):
    """A one-slot, one-community day with a given total cost."""
    return DayResult(
        scenario_name="fixed",
        scenario_hash=scenario_hash,
        mode=mode,
        forecaster={"provenance": "truth"},
        node_ids=(1,),
        decisions=(),
        slot_costs=((CostBreakdown.of(cost, 0.0, 0.0, 0.0, grid_energy=grid_energy),),),
        bundles=(),
        records=(SlotRecord(slot=1, status="optimal"),),
    )
