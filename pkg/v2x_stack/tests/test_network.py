import numpy as np
import pytest

from v2x_stack.network import (
    FlowState,
    NetworkDataError,
    build_distflow_block,
    check_solution,
    evaluate_flows,
    injection_matrix,
    validate_grid,
)
from v2x_stack.solver.builder import ProblemBuilder
from v2x_stack.solver.qpcore import QpStatus, solve_qp
from v2x_stack.types import GridModel


def feeder(nodes=2, slots=1, v_max=1.2, flow_max=10.0, reactive_load=0.0):
    """Per-unit feeder with base 1 kVA, so kW and p.u. coincide."""
    branches = nodes - 1
    return GridModel(
        node_count=nodes,
        resistance=(0.1,) * branches,
        reactance=(0.1,) * branches,
        reactive_load=tuple((reactive_load,) * slots for _ in range(nodes)),
        voltage_min=(0.8,) * nodes,
        voltage_max=(v_max,) * nodes,
        flow_min=(-flow_max,) * branches,
        flow_max=(flow_max,) * branches,
        reactive_min=(-10.0,) * branches,
        reactive_max=(10.0,) * branches,
        slack_voltage=(1.0,) * slots,
        base_kva=1.0,
        impedance_unit="pu",
    )


def test_zero_injection_flat_profile():
    grid = feeder(nodes=4, slots=3)
    state = evaluate_flows(grid, np.zeros((4, 3)))
    assert np.all(state.active_flow == 0.0)
    assert state.voltage == pytest.approx(np.ones((3, 3)))
    assert check_solution(grid, state, np.zeros((4, 3))) == []


def test_single_export_raises_voltage():
    grid = feeder()
    state = evaluate_flows(grid, [[0.0], [1.0]])
    assert state.active_flow[0, 0] == pytest.approx(-1.0)
    assert state.head_flow[0] == pytest.approx(-1.0)
    assert state.voltage[0, 0] == pytest.approx(1.1)


def test_single_load_lowers_voltage():
    grid = feeder()
    state = evaluate_flows(grid, [[0.0], [-1.0]])
    assert state.active_flow[0, 0] == pytest.approx(1.0)
    assert state.voltage[0, 0] == pytest.approx(0.9)


def test_telescoping_flows():
    rng = np.random.default_rng(4)
    grid = feeder(nodes=5, slots=3)
    injections = rng.uniform(-2.0, 2.0, size=(5, 3))
    state = evaluate_flows(grid, injections)
    for k in range(1, 5):
        assert state.active_flow[k - 1] == pytest.approx(-injections[k:].sum(axis=0))
    assert check_solution(grid, state, injections) == []


def test_block_matches_evaluation():
    grid = feeder(nodes=3, slots=2)
    builder = ProblemBuilder()
    exports = builder.add_variables("e", (2,), 0.5, 0.5)
    block = build_distflow_block(builder, grid, {2: list(exports)}, [1, 2])
    sol = solve_qp(builder.build())
    assert sol.status is QpStatus.optimal
    injections = injection_matrix(grid, {2: [0.5, 0.5]}, 2)
    expected = evaluate_flows(grid, injections)
    state = block.state(sol.x)
    assert state.active_flow == pytest.approx(expected.active_flow, abs=1e-5)
    assert state.voltage == pytest.approx(expected.voltage, abs=1e-5)
    assert check_solution(grid, state, injections, tolerance=1e-5) == []


def test_voltage_cap_makes_block_infeasible():
    grid = feeder(v_max=1.05)
    builder = ProblemBuilder()
    export = builder.add_variable("e", 1.0, 1.0)
    build_distflow_block(builder, grid, {1: [export]}, [1])
    sol = solve_qp(builder.build())
    assert sol.status is QpStatus.infeasible


def test_block_rejects_bad_input():
    grid = feeder(nodes=3)
    builder = ProblemBuilder()
    export = builder.add_variable("e", 0.0, 1.0)
    with pytest.raises(NetworkDataError):
        build_distflow_block(builder, grid, {0: [export]}, [1])
    with pytest.raises(NetworkDataError):
        build_distflow_block(builder, grid, {1: [export]}, [])
    with pytest.raises(NetworkDataError):
        build_distflow_block(builder, grid, {1: [export, export]}, [1])


def test_perturbed_voltage_reported_once():
    grid = feeder(nodes=3, v_max=1.5)
    injections = np.array([[0.0], [0.3], [0.2]])
    state = evaluate_flows(grid, injections)
    voltage = state.voltage.copy()
    voltage[-1, 0] += 0.1
    bumped = FlowState(state.active_flow, state.reactive_flow, voltage)
    found = check_solution(grid, bumped, injections)
    assert len(found) == 1
    assert found[0].code == "network.voltage_drop"
    assert found[0].magnitude == pytest.approx(0.1)


def test_flow_bound_violation_magnitude():
    grid = feeder(flow_max=2.0, v_max=2.0)
    injections = np.array([[0.0], [2.5]])
    state = evaluate_flows(grid, injections)
    found = check_solution(grid, state, injections)
    assert [v.code for v in found] == ["network.flow_bound"]
    assert found[0].magnitude == pytest.approx(0.5)


def test_state_shape_mismatch():
    with pytest.raises(NetworkDataError):
        FlowState(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 2)))
    grid = feeder(nodes=3)
    state = evaluate_flows(grid, np.zeros((3, 1)))
    with pytest.raises(NetworkDataError):
        check_solution(grid, state, np.zeros((2, 1)))


def test_validate_grid_lengths():
    grid = feeder(nodes=3)
    broken = GridModel(
        node_count=3,
        resistance=(0.1,),
        reactance=grid.reactance,
        reactive_load=grid.reactive_load,
        voltage_min=grid.voltage_min,
        voltage_max=grid.voltage_max,
        flow_min=grid.flow_min,
        flow_max=grid.flow_max,
        reactive_min=grid.reactive_min,
        reactive_max=grid.reactive_max,
        slack_voltage=grid.slack_voltage,
    )
    assert [v.code for v in validate_grid(broken)] == ["grid.resistance"]
    assert validate_grid(grid, horizon=1) == []
    assert [v.code for v in validate_grid(grid, horizon=2)] == [
        "grid.slack_voltage",
        "grid.reactive_load",
    ]
