import numpy as np
import pytest
import scipy.sparse as sp

from v2x_stack.solver.qpcore import (
    DimensionError,
    NonConvexError,
    QpOptions,
    QpSolution,
    QpStatus,
    QpWarmStart,
    QuadraticProgram,
    check_convexity,
    dump_qp,
    kkt_residuals,
    solve_qp,
)


def diagonal(*values):
    return sp.diags(values, format="csc")


@pytest.fixture
def split_pair():
    """x^2 + y^2 subject to x + y = 1."""
    return QuadraticProgram(
        P=diagonal(2.0, 2.0),
        q=np.zeros(2),
        A_eq=sp.csc_matrix([[1.0, 1.0]]),
        b_eq=[1.0],
    )


def test_unconstrained_minimum():
    qp = QuadraticProgram(P=diagonal(2.0), q=[-4.0], constant=4.0)
    sol = solve_qp(qp)
    assert sol.status is QpStatus.optimal
    assert sol.x[0] == pytest.approx(2.0, abs=1e-4)
    assert sol.objective == pytest.approx(0.0, abs=1e-6)


def test_active_lower_bound_dual():
    qp = QuadraticProgram(P=diagonal(2.0), q=[0.0], lb=[1.0])
    sol = solve_qp(qp)
    assert sol.optimal
    assert sol.x[0] == pytest.approx(1.0, abs=1e-4)
    assert sol.objective == pytest.approx(1.0, abs=1e-3)
    # Lower bound active: multiplier is negative.
    assert abs(sol.y_box[0]) == pytest.approx(2.0, abs=1e-3)
    assert sol.y_box[0] < 0


def test_equality_split(split_pair):
    sol = solve_qp(split_pair)
    assert sol.optimal
    assert sol.x == pytest.approx([0.5, 0.5], abs=1e-4)
    assert sol.objective == pytest.approx(0.5, abs=1e-4)
    assert sol.residuals.worst() < 1e-4


def test_kkt_exact_solution(split_pair):
    exact = QpSolution(x=[0.5, 0.5], y_eq=[-1.0])
    residuals = kkt_residuals(split_pair, exact)
    assert residuals.primal <= 1e-12
    assert residuals.dual <= 1e-12
    assert residuals.complementarity <= 1e-12


def test_kkt_perturbed_primal(split_pair):
    perturbed = QpSolution(x=[0.501, 0.5], y_eq=[-1.0])
    residuals = kkt_residuals(split_pair, perturbed)
    assert residuals.primal == pytest.approx(1e-3, rel=1e-6)
    assert residuals.dual == pytest.approx(2e-3, rel=1e-6)


def test_kkt_wrong_shape(split_pair):
    with pytest.raises(DimensionError):
        kkt_residuals(split_pair, QpSolution(x=[0.5, 0.5, 0.0], y_eq=[-1.0]))


def test_empty_program():
    with pytest.raises(DimensionError):
        QuadraticProgram(P=None, q=[])


def test_mismatched_rows():
    with pytest.raises(DimensionError):
        QuadraticProgram(
            P=diagonal(1.0, 1.0),
            q=[0.0, 0.0],
            A_eq=sp.csc_matrix([[1.0, 1.0]]),
            b_eq=[1.0, 2.0],
        )


def test_nonconvex_rejected():
    qp = QuadraticProgram(P=diagonal(1.0, -1.0), q=[0.0, 0.0])
    with pytest.raises(NonConvexError):
        solve_qp(qp)
    with pytest.raises(NonConvexError):
        check_convexity(sp.csc_matrix([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(NonConvexError):
        check_convexity(sp.csc_matrix([[1.0, 1.0], [0.0, 1.0]]))


def test_crossed_bounds_infeasible():
    qp = QuadraticProgram(P=diagonal(1.0), q=[0.0], lb=[1.0], ub=[0.0])
    sol = solve_qp(qp)
    assert sol.status is QpStatus.infeasible
    assert sol.certificate is not None
    assert np.isnan(sol.objective)


def test_warm_start_same_answer(split_pair):
    cold = solve_qp(split_pair)
    warm = solve_qp(
        split_pair,
        warm_start=QpWarmStart(
            cold.x, split_pair.join_duals(cold.y_eq, cold.y_in, cold.y_box)
        ),
    )
    assert warm.optimal
    assert warm.x == pytest.approx(cold.x, abs=1e-5)
    assert warm.objective == pytest.approx(cold.objective, abs=1e-6)


def test_added_row_never_improves():
    qp = QuadraticProgram(P=diagonal(2.0, 2.0), q=[-2.0, -2.0])
    loose = solve_qp(qp)
    tight = solve_qp(qp.with_rows([[1.0, 1.0]], [-np.inf], [1.0]))
    assert loose.objective == pytest.approx(-2.0, abs=1e-4)
    assert tight.objective == pytest.approx(-1.5, abs=1e-4)
    assert tight.objective >= loose.objective - 1e-6


def test_dump_qp(tmp_path, split_pair):
    path = tmp_path / "pair.qp"
    dump_qp(split_pair, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "2 1 0"
    assert "P 0 0 2.0" in lines
    assert "E 0 1 1.0" in lines
    assert "b 0 1.0" in lines
    assert "lb 1 -inf" in lines


def switched_units(polish=True):
    """Three units p <= 100 y with fractional y, sharing a demand of 150."""
    n = 6
    rows = [[0.0] * n for _ in range(4)]
    for k in range(3):
        rows[k][k] = 1.0
        rows[k][3 + k] = -100.0
        rows[3][k] = 1.0
    qp = QuadraticProgram(
        P=diagonal(0.02, 0.03, 0.05, 0.0, 0.0, 0.0),
        q=[1.0, 0.8, 0.5, 7.0, 5.0, 3.0],
        A_in=sp.csc_matrix(rows),
        l_in=[-np.inf, -np.inf, -np.inf, 150.0],
        u_in=[0.0, 0.0, 0.0, np.inf],
        lb=np.zeros(n),
        ub=[np.inf, np.inf, np.inf, 1.0, 1.0, 1.0],
    )
    return qp, QpOptions(polish=polish)


@pytest.mark.parametrize("polish", [True, False])
def test_optimal_meets_absolute_feasibility(polish):
    qp, opts = switched_units(polish)
    sol = solve_qp(qp, opts)
    if sol.optimal:
        assert sol.residuals.primal <= opts.feasibility_tol
    else:
        assert sol.status is QpStatus.max_iterations
    assert solve_qp(qp).optimal


def test_tight_feasibility_target():
    qp, _ = switched_units()
    sol = solve_qp(qp, QpOptions(feasibility_tol=1e-9))
    assert sol.optimal
    assert sol.residuals.primal <= 1e-9


def test_iteration_cap_never_optimal():
    qp, _ = switched_units()
    sol = solve_qp(qp, QpOptions(max_iter=1, polish=False))
    assert sol.status is QpStatus.max_iterations
    assert not sol.optimal
    assert np.isnan(sol.objective)
