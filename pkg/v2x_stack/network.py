"""
Linearized power flow on a radial feeder path.

Nodes are numbered 0..N-1 from the slack node 0; branch k feeds node k from
node k-1. With e^k the active export of node k (kW, positive into the
feeder), Q^k its reactive load and V0 the slack voltage, every slot obeys

    p^{k+1} = p^k + e^k
    q^{k+1} = q^k - Q^k
    v^k     = v^{k-1} - (r_k p^k + x_k q^k) / V0,     v^0 = V0

with zero flow beyond the last node. Solver-side quantities are per-unit;
FlowState reports flows in kW/kVAr and voltages in per-unit.
"""

from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence
import logging

import numpy as np

from v2x_stack.solver.builder import ProblemBuilder
from v2x_stack.types import GridModel, Violation

logger = logging.getLogger(__name__)

TOLERANCE = 1e-6


class NetworkDataError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlowState:
    """
    Branch flows and node voltages over a window.

    Row k-1 of every array belongs to branch k, which is also the row of
    node k in voltage (the slack node is not stored).
    """

    active_flow: np.ndarray
    reactive_flow: np.ndarray
    voltage: np.ndarray

    def __post_init__(self):
        arrays = []
        for name in ("active_flow", "reactive_flow", "voltage"):
            values = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(np.isfinite(values)):
                raise NetworkDataError(f"{name} contains non-finite values.")
            object.__setattr__(self, name, values)
            arrays.append(values)
        if len({a.shape for a in arrays}) != 1:
            raise NetworkDataError(
                "Flow state arrays differ in shape: "
                + ", ".join(str(a.shape) for a in arrays)
            )

    @property
    def window_length(self) -> int:
        return self.active_flow.shape[1]

    @property
    def head_flow(self) -> np.ndarray:
        """Active power drawn from the slack node per slot, kW."""
        return self.active_flow[0]


@dataclass(frozen=True, eq=False)
class DistFlowBlock:
    """Variable indices of a network block inside a ProblemBuilder."""

    window: tuple
    active: np.ndarray
    reactive: np.ndarray
    voltage: np.ndarray
    base_kva: float

    def state(self, x: np.ndarray) -> FlowState:
        x = np.asarray(x, dtype=float)
        return FlowState(
            active_flow=x[self.active] * self.base_kva,
            reactive_flow=x[self.reactive] * self.base_kva,
            voltage=x[self.voltage],
        )


def validate_grid(grid: GridModel, horizon: Optional[int] = None) -> List[Violation]:
    """Structural and bound checks of a feeder description."""
    found = []

    def fail(code, message):
        found.append(Violation(f"grid.{code}", message, "feeder data"))

    if grid.node_count < 2:
        fail("nodes", f"node_count {grid.node_count} leaves no branch")
        return found
    branches = grid.branch_count
    for name in ("resistance", "reactance", "flow_min", "flow_max", "reactive_min", "reactive_max"):
        length = len(getattr(grid, name))
        if length != branches:
            fail(name, f"{name} has {length} entries for {branches} branches")
    for name in ("voltage_min", "voltage_max"):
        length = len(getattr(grid, name))
        if length != grid.node_count:
            fail(name, f"{name} has {length} entries for {grid.node_count} nodes")
    if len(grid.reactive_load) != grid.node_count:
        fail("reactive_load", f"reactive_load has {len(grid.reactive_load)} rows for {grid.node_count} nodes")
    if found:
        return found
    if horizon is not None:
        if len(grid.slack_voltage) < horizon:
            fail("slack_voltage", f"slack voltage covers {len(grid.slack_voltage)} of {horizon} slots")
        short = [i for i, row in enumerate(grid.reactive_load) if len(row) < horizon]
        if short:
            fail("reactive_load", f"reactive load shorter than the horizon at nodes {short}")
    if np.any(np.asarray(grid.voltage_min) >= np.asarray(grid.voltage_max)):
        fail("voltage_bounds", "voltage_min must lie below voltage_max at every node")
    if np.any(np.asarray(grid.flow_min) > np.asarray(grid.flow_max)):
        fail("flow_bounds", "flow_min exceeds flow_max")
    if np.any(np.asarray(grid.reactive_min) > np.asarray(grid.reactive_max)):
        fail("reactive_bounds", "reactive_min exceeds reactive_max")
    if np.any(np.asarray(grid.slack_voltage) <= 0):
        fail("slack_voltage", "slack voltage must be positive")
    if grid.base_kva <= 0 or grid.base_kv <= 0:
        fail("base", "base power and base voltage must be positive")
    if grid.impedance_unit not in ("ohm", "pu"):
        fail("impedance_unit", f"unknown impedance unit {grid.impedance_unit!r}")
    if np.any(np.asarray(grid.resistance) < 0) or np.any(np.asarray(grid.reactance) < 0):
        fail("impedance", "branch impedances must be nonnegative")
    return found


def _check_window(grid: GridModel, window: Sequence[int]) -> tuple:
    window = tuple(int(t) for t in window)
    if not window:
        raise NetworkDataError("The window contains no slots.")
    problems = validate_grid(grid, max(window))
    if problems:
        raise NetworkDataError(str(problems[0]))
    return window


def _check_node(grid: GridModel, node: int):
    if not 1 <= node < grid.node_count:
        raise NetworkDataError(f"Node {node} has no feeding branch in a {grid.node_count}-node feeder.")


def _reactive_load_pu(grid: GridModel, window: tuple) -> np.ndarray:
    """Reactive load of nodes 1..N-1 over the window, per-unit."""
    loads = np.array([[row[t - 1] for t in window] for row in grid.reactive_load[1:]], dtype=float)
    return loads / grid.base_kva


def build_distflow_block(
    builder: ProblemBuilder,
    grid: GridModel,
    injections: Mapping[int, Sequence[int]],
    window: Sequence[int],
) -> DistFlowBlock:
    """
    Add flow, voltage and balance rows for every slot of window.

    injections maps a node to the builder indices of its export variable
    (kW) for each window slot. Nodes absent from the mapping export nothing.
    """
    window = _check_window(grid, window)
    length = len(window)
    for node, indices in injections.items():
        _check_node(grid, node)
        if len(indices) != length:
            raise NetworkDataError(
                f"Node {node} has {len(indices)} export variables for {length} slots."
            )
    base = grid.base_kva
    branches = grid.branch_count
    flow_lo = np.asarray(grid.flow_min, dtype=float)[:, None] / base
    flow_hi = np.asarray(grid.flow_max, dtype=float)[:, None] / base
    q_lo = np.asarray(grid.reactive_min, dtype=float)[:, None] / base
    q_hi = np.asarray(grid.reactive_max, dtype=float)[:, None] / base
    v_lo = np.asarray(grid.voltage_min[1:], dtype=float)[:, None]
    v_hi = np.asarray(grid.voltage_max[1:], dtype=float)[:, None]
    shape = (branches, length)
    p = builder.add_variables("p_dn", shape, flow_lo, flow_hi)
    q = builder.add_variables("q_dn", shape, q_lo, q_hi)
    v = builder.add_variables("v", shape, v_lo, v_hi)
    r = grid.resistance_pu()
    x = grid.reactance_pu()
    q_load = _reactive_load_pu(grid, window)

    for j, slot in enumerate(window):
        v0 = float(grid.slack_voltage[slot - 1])
        for k in range(1, grid.node_count):
            row = k - 1
            downstream_p = [(p[row + 1, j], 1.0)] if k < branches else []
            terms = downstream_p + [(p[row, j], -1.0)]
            if k in injections:
                terms.append((injections[k][j], -1.0 / base))
            builder.add_equality(terms, 0.0, f"active_flow[{k},{slot}]")

            downstream_q = [(q[row + 1, j], 1.0)] if k < branches else []
            builder.add_equality(
                downstream_q + [(q[row, j], -1.0)],
                -q_load[row, j],
                f"reactive_flow[{k},{slot}]",
            )

            drop = [(p[row, j], r[row] / v0), (q[row, j], x[row] / v0)]
            if k == 1:
                builder.add_equality([(v[row, j], 1.0)] + drop, v0, f"voltage[{k},{slot}]")
            else:
                builder.add_equality(
                    [(v[row, j], 1.0), (v[row - 1, j], -1.0)] + drop,
                    0.0,
                    f"voltage[{k},{slot}]",
                )
    logger.debug("network block: %d branches x %d slots", branches, length)
    return DistFlowBlock(window, p, q, v, base)


def injection_matrix(
    grid: GridModel, exports: Mapping[int, Sequence[float]], length: int
) -> np.ndarray:
    """Dense (node_count x length) export matrix in kW from a per-node mapping."""
    matrix = np.zeros((grid.node_count, length))
    for node, values in exports.items():
        _check_node(grid, node)
        matrix[node] = np.asarray(values, dtype=float).reshape(length)
    return matrix


def evaluate_flows(
    grid: GridModel, injections: np.ndarray, window: Optional[Sequence[int]] = None
) -> FlowState:
    """
    The unique flow state satisfying the recursion for given exports.

    injections is (node_count x window length) in kW; row 0 is ignored.
    """
    injections = np.atleast_2d(np.asarray(injections, dtype=float))
    if window is None:
        window = range(1, injections.shape[1] + 1)
    window = _check_window(grid, window)
    if injections.shape != (grid.node_count, len(window)):
        raise NetworkDataError(
            f"Injections have shape {injections.shape}, expected {(grid.node_count, len(window))}."
        )
    base = grid.base_kva
    exports = injections[1:] / base
    q_load = _reactive_load_pu(grid, window)
    # Suffix sums: flow on branch k carries everything beyond node k-1.
    p = -np.cumsum(exports[::-1], axis=0)[::-1]
    q = np.cumsum(q_load[::-1], axis=0)[::-1]
    v0 = np.array([grid.slack_voltage[t - 1] for t in window], dtype=float)
    r = grid.resistance_pu()[:, None]
    x = grid.reactance_pu()[:, None]
    v = v0 - np.cumsum(r * p + x * q, axis=0) / v0
    return FlowState(p * base, q * base, v)


def check_solution(
    grid: GridModel,
    state: FlowState,
    injections: np.ndarray,
    window: Optional[Sequence[int]] = None,
    tolerance: float = TOLERANCE,
) -> List[Violation]:
    """
    Violations of the flow recursion and the network limits.

    Recursion residuals are compared in per-unit and reported in per-unit.
    Limit violations are compared in per-unit and reported in kW, kVAr or
    per-unit voltage.
    """
    injections = np.atleast_2d(np.asarray(injections, dtype=float))
    if window is None:
        window = range(1, state.window_length + 1)
    window = _check_window(grid, window)
    expected = (grid.branch_count, len(window))
    if state.active_flow.shape != expected:
        raise NetworkDataError(f"Flow state has shape {state.active_flow.shape}, expected {expected}.")
    if injections.shape != (grid.node_count, len(window)):
        raise NetworkDataError(
            f"Injections have shape {injections.shape}, expected {(grid.node_count, len(window))}."
        )
    base = grid.base_kva
    p = state.active_flow / base
    q = state.reactive_flow / base
    v = state.voltage
    exports = injections[1:] / base
    q_load = _reactive_load_pu(grid, window)
    downstream_p = np.vstack([p[1:], np.zeros((1, p.shape[1]))])
    downstream_q = np.vstack([q[1:], np.zeros((1, q.shape[1]))])
    v0 = np.array([grid.slack_voltage[t - 1] for t in window], dtype=float)
    upstream_v = np.vstack([v0[None, :], v[:-1]])
    r = grid.resistance_pu()[:, None]
    x = grid.reactance_pu()[:, None]

    residuals = (
        ("network.active_flow", "active flow recursion", downstream_p - p - exports),
        ("network.reactive_flow", "reactive flow recursion", downstream_q - q + q_load),
        ("network.voltage_drop", "voltage drop", v - upstream_v + (r * p + x * q) / v0),
    )
    found = []
    for code, reference, residual in residuals:
        for row, col in zip(*np.nonzero(np.abs(residual) > tolerance)):
            found.append(
                Violation(
                    code,
                    f"branch {row + 1} slot {window[col]} residual {residual[row, col]:.3g}",
                    reference,
                    float(abs(residual[row, col])),
                )
            )

    limits = (
        ("network.flow_bound", "active flow limits", p, grid.flow_min, grid.flow_max, base),
        ("network.reactive_bound", "reactive flow limits", q, grid.reactive_min, grid.reactive_max, base),
        ("network.voltage_bound", "voltage limits", v, grid.voltage_min[1:], grid.voltage_max[1:], 1.0),
    )
    for code, reference, values, lower, upper, unit in limits:
        lower = np.asarray(lower, dtype=float)[:, None] / unit
        upper = np.asarray(upper, dtype=float)[:, None] / unit
        excess = np.maximum(values - upper, lower - values)
        for row, col in zip(*np.nonzero(excess > tolerance)):
            found.append(
                Violation(
                    code,
                    f"branch {row + 1} slot {window[col]} outside its limits by {excess[row, col] * unit:.6g}",
                    reference,
                    float(excess[row, col] * unit),
                )
            )
    return found
