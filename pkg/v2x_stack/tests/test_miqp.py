import numpy as np
import pandas as pd
import pytest

from v2x_stack.solver.builder import ProblemBuilder
from v2x_stack.solver.miqp import (
    BinaryInfo,
    BranchingError,
    BranchRule,
    MiqpOptions,
    MiqpStatus,
    Node,
    OracleGuardError,
    QpFailureError,
    branch,
    enumerate_oracle,
    solve_miqp,
)
from v2x_stack.solver.qpcore import QpOptions, solve_qp


def switched_output():
    """(p - 1)^2 + 10y with 0 <= p <= 5y."""
    builder = ProblemBuilder()
    p = builder.add_variable("p", 0.0)
    y = builder.add_variable("y", 0.0, 1.0)
    builder.add_square(p, 1.0, 1.0)
    builder.add_cost(y, 10.0)
    builder.add_range([(p, 1.0), (y, -5.0)], upper=0.0, label="switch")
    builder.add_binary(y, BinaryInfo("y", kind="switch"))
    return builder.build_mixed()


def random_units(count, seed):
    """count switched units sharing a capacity row."""
    rng = np.random.default_rng(seed)
    builder = ProblemBuilder()
    outputs = []
    for k in range(count):
        p = builder.add_variable(f"p[{k}]", 0.0)
        y = builder.add_variable(f"y[{k}]", 0.0, 1.0)
        builder.add_square(p, rng.uniform(0.5, 2.0), rng.uniform(0.0, 3.0))
        builder.add_cost(y, rng.uniform(0.0, 4.0))
        builder.add_range([(p, 1.0), (y, -5.0)], upper=0.0)
        builder.add_binary(y, BinaryInfo(f"y[{k}]"))
        outputs.append(p)
    builder.add_range([(p, 1.0) for p in outputs], upper=6.0, label="capacity")
    return builder.build_mixed()


def test_switched_output():
    sol = solve_miqp(switched_output())
    assert sol.status is MiqpStatus.optimal
    assert sol.x[1] == 0.0
    assert sol.x[0] == pytest.approx(0.0, abs=1e-4)
    assert sol.objective == pytest.approx(1.0, abs=1e-4)


def test_switched_output_oracle():
    sol = enumerate_oracle(switched_output())
    assert sol.nodes == 2
    assert sol.x[1] == 0.0
    assert sol.objective == pytest.approx(1.0, abs=1e-4)


def test_matches_oracle():
    m = random_units(8, seed=11)
    oracle = enumerate_oracle(m)
    sol = solve_miqp(m, MiqpOptions(gap=1e-9))
    assert sol.status is MiqpStatus.optimal
    assert sol.objective == pytest.approx(oracle.objective, abs=1e-5 * (1 + abs(oracle.objective)))
    assert set(np.unique(sol.x[m.binaries])) <= {0.0, 1.0}


def test_parallel_nodes_same_objective():
    m = random_units(6, seed=3)
    serial = solve_miqp(m, MiqpOptions(gap=1e-9))
    parallel = solve_miqp(m, MiqpOptions(gap=1e-9, workers=3))
    assert parallel.objective == pytest.approx(serial.objective, abs=1e-5)


def test_all_assignments_infeasible():
    builder = ProblemBuilder()
    p = builder.add_variable("p", 6.0)
    y = builder.add_variable("y", 0.0, 1.0)
    builder.add_square(p, 1.0)
    builder.add_range([(p, 1.0), (y, -5.0)], upper=0.0)
    builder.add_binary(y, BinaryInfo("y"))
    m = builder.build_mixed()
    oracle = enumerate_oracle(m)
    assert oracle.status is MiqpStatus.infeasible
    assert oracle.x is None
    sol = solve_miqp(m)
    assert sol.status is MiqpStatus.infeasible
    assert sol.x is None


def test_gap_stop_is_optimal():
    m = random_units(8, seed=11)
    oracle = enumerate_oracle(m)
    sol = solve_miqp(m, MiqpOptions(gap=0.5))
    assert sol.status is MiqpStatus.optimal
    assert 0.0 <= sol.gap <= 0.5
    assert sol.objective >= oracle.objective - 1e-5
    assert sol.objective <= oracle.objective + 0.5 * max(1.0, abs(sol.objective)) + 1e-5


def test_oracle_stalled_relaxation():
    with pytest.raises(QpFailureError):
        enumerate_oracle(switched_output(), QpOptions(max_iter=1, polish=False))


def test_oracle_guard():
    with pytest.raises(OracleGuardError):
        enumerate_oracle(random_units(21, seed=0))


def test_no_binaries_is_plain_qp():
    builder = ProblemBuilder()
    a = builder.add_variable("a", 0.0, 4.0)
    b = builder.add_variable("b", 0.0, 4.0)
    builder.add_square(a, 1.0, 3.0)
    builder.add_square(b, 2.0, 1.0)
    builder.add_equality([(a, 1.0), (b, 1.0)], 2.0)
    m = builder.build_mixed()
    sol = solve_miqp(m)
    reference = solve_qp(m.qp)
    assert sol.status is MiqpStatus.optimal
    assert sol.nodes == 1
    assert sol.x == pytest.approx(reference.x, abs=1e-6)
    assert sol.objective == pytest.approx(reference.objective, abs=1e-8)


def fractional_node(values):
    values = np.asarray(values, dtype=float)
    return Node(lower=np.zeros(values.size), upper=np.ones(values.size), values=values)


def test_branch_single_fractional():
    low, high = branch(fractional_node([0.0, 1.0, 0.0, 0.5, 1.0]))
    assert low.lower[3] == low.upper[3] == 0.0
    assert high.lower[3] == high.upper[3] == 1.0
    assert low.depth == high.depth == 1
    assert list(low.upper[[0, 1, 2, 4]]) == [1.0, 1.0, 1.0, 1.0]


def test_branch_most_fractional():
    low, high = branch(fractional_node([0.4, 0.5]))
    assert high.lower[1] == 1.0
    assert high.lower[0] == 0.0 and high.upper[0] == 1.0


def test_branch_tie_lowest_index():
    low, high = branch(fractional_node([0.5, 0.5]))
    assert high.lower[0] == 1.0
    assert high.upper[1] == 1.0 and high.lower[1] == 0.0


def test_branch_lowest_index_rule():
    low, high = branch(fractional_node([0.1, 0.5]), BranchRule.lowest_index)
    assert low.upper[0] == 0.0


def test_branch_needs_fraction():
    with pytest.raises(BranchingError):
        branch(fractional_node([0.0, 1.0]))
    with pytest.raises(BranchingError):
        branch(Node(lower=np.zeros(1), upper=np.ones(1)))


def test_search_log(tmp_path):
    path = tmp_path / "search.csv"
    sol = solve_miqp(random_units(4, seed=5), MiqpOptions(search_log=str(path)))
    log = pd.read_csv(path)
    assert list(log.columns) == ["node_id", "depth", "bound", "incumbent", "gap"]
    assert len(log) == len(sol.records) >= 1
    assert log["depth"].iloc[0] == 0
