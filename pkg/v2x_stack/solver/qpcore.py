"""
Convex quadratic programming by operator splitting.

Solves

    minimize    1/2 x'Px + q'x + constant
    subject to  A_eq x  = b_eq
                l_in <= A_in x <= u_in
                lb   <=    x   <= ub

with an ADMM iteration on the stacked form l <= Ax <= u: Ruiz equilibration,
over-relaxation, adaptive step size with refactorisation, infeasibility
certificates from successive iterate differences, and an active-set polish
step on exit.

Dual values follow the usual splitting convention: a multiplier is positive
when its upper bound is active and negative when its lower bound is active.
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

RHO_MIN = 1e-6
RHO_MAX = 1e6
RHO_EQ_FACTOR = 1e3
SCALING_MIN = 1e-4
SCALING_MAX = 1e4
DENSE_CONVEXITY_LIMIT = 400


class DimensionError(ValueError):
    pass


class NonConvexError(ValueError):
    pass


class QpStatus(Enum):
    optimal = 0
    infeasible = 1
    unbounded = 2
    max_iterations = 3


@dataclass(frozen=True)
class QpOptions:
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    max_iter: int = 20_000
    alpha: float = 1.6
    sigma: float = 1e-6
    rho: float = 0.1
    adaptive_rho: bool = True
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 25
    scaling_iter: int = 10
    polish: bool = True
    polish_delta: float = 1e-6
    polish_refine_iter: int = 5
    feasibility_tol: float = 1e-7
    refine_rounds: int = 4


@dataclass(frozen=True)
class QpWarmStart:
    x: np.ndarray
    y: Optional[np.ndarray] = None


def _csc(matrix, shape) -> sp.csc_matrix:
    if matrix is None:
        return sp.csc_matrix(shape)
    return sp.csc_matrix(matrix, dtype=float)


def _vector(values, length, fill) -> np.ndarray:
    if values is None:
        return np.full(length, fill, dtype=float)
    return np.asarray(values, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class QuadraticProgram:
    """
    Canonical convex QP. P must be the full symmetric matrix, not a triangle.
    """

    P: sp.csc_matrix
    q: np.ndarray
    A_eq: Optional[sp.csc_matrix] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[sp.csc_matrix] = None
    l_in: Optional[np.ndarray] = None
    u_in: Optional[np.ndarray] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    names: Tuple[str, ...] = ()
    constant: float = 0.0

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(-1)
        n = q.size
        if n == 0:
            raise DimensionError("A quadratic program needs at least one variable.")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "P", _csc(self.P, (n, n)))
        object.__setattr__(self, "A_eq", _csc(self.A_eq, (0, n)))
        object.__setattr__(self, "A_in", _csc(self.A_in, (0, n)))
        m_eq = self.A_eq.shape[0]
        m_in = self.A_in.shape[0]
        object.__setattr__(self, "b_eq", _vector(self.b_eq, m_eq, 0.0))
        object.__setattr__(self, "l_in", _vector(self.l_in, m_in, -np.inf))
        object.__setattr__(self, "u_in", _vector(self.u_in, m_in, np.inf))
        object.__setattr__(self, "lb", _vector(self.lb, n, -np.inf))
        object.__setattr__(self, "ub", _vector(self.ub, n, np.inf))
        object.__setattr__(self, "names", tuple(self.names))
        self._check_dimensions()

    def _check_dimensions(self):
        n = self.n
        checks = (
            ("P", self.P.shape, (n, n)),
            ("A_eq", (self.A_eq.shape[1],), (n,)),
            ("A_in", (self.A_in.shape[1],), (n,)),
            ("b_eq", self.b_eq.shape, (self.A_eq.shape[0],)),
            ("l_in", self.l_in.shape, (self.A_in.shape[0],)),
            ("u_in", self.u_in.shape, (self.A_in.shape[0],)),
            ("lb", self.lb.shape, (n,)),
            ("ub", self.ub.shape, (n,)),
        )
        for label, actual, expected in checks:
            if tuple(actual) != tuple(expected):
                raise DimensionError(
                    f"{label} has shape {tuple(actual)}, expected {tuple(expected)}."
                )
        if self.names and len(self.names) != n:
            raise DimensionError(f"{len(self.names)} names given for {n} variables.")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def m_in(self) -> int:
        return self.A_in.shape[0]

    def name(self, index: int) -> str:
        if self.names:
            return self.names[index]
        return f"x{index}"

    def objective(self, x: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.P @ x) + self.q @ x + self.constant)

    def box_rows(self) -> np.ndarray:
        """Variables with at least one finite bound."""
        return np.flatnonzero(np.isfinite(self.lb) | np.isfinite(self.ub))

    def stacked(self) -> Tuple[sp.csc_matrix, np.ndarray, np.ndarray]:
        """Single-range form l <= Ax <= u; box rows only for bounded variables."""
        rows = self.box_rows()
        selector = sp.csc_matrix(
            (np.ones(rows.size), (np.arange(rows.size), rows)), shape=(rows.size, self.n)
        )
        A = sp.vstack([self.A_eq, self.A_in, selector], format="csc")
        l = np.concatenate([self.b_eq, self.l_in, self.lb[rows]])
        u = np.concatenate([self.b_eq, self.u_in, self.ub[rows]])
        return A, l, u

    def split_duals(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Split a stacked multiplier vector into (eq, in, box) classes."""
        y_eq = y[: self.m_eq]
        y_in = y[self.m_eq : self.m_eq + self.m_in]
        y_box = np.zeros(self.n)
        y_box[self.box_rows()] = y[self.m_eq + self.m_in :]
        return y_eq, y_in, y_box

    def join_duals(self, y_eq, y_in, y_box) -> np.ndarray:
        y_box = np.asarray(y_box, dtype=float)
        return np.concatenate(
            [np.asarray(y_eq, dtype=float), np.asarray(y_in, dtype=float), y_box[self.box_rows()]]
        )

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "QuadraticProgram":
        return replace(self, lb=np.asarray(lb, dtype=float), ub=np.asarray(ub, dtype=float))

    def with_rows(self, A_rows, lower, upper) -> "QuadraticProgram":
        """Copy with extra general inequality rows appended."""
        A_rows = sp.csc_matrix(A_rows, dtype=float)
        return replace(
            self,
            A_in=sp.vstack([self.A_in, A_rows], format="csc"),
            l_in=np.concatenate([self.l_in, _vector(lower, A_rows.shape[0], -np.inf)]),
            u_in=np.concatenate([self.u_in, _vector(upper, A_rows.shape[0], np.inf)]),
        )


@dataclass(frozen=True)
class KktResiduals:
    primal: float
    dual: float
    complementarity: float

    def worst(self) -> float:
        return max(self.primal, self.dual, self.complementarity)


@dataclass(eq=False)
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_box: Optional[np.ndarray] = None
    objective: float = np.nan
    status: QpStatus = QpStatus.optimal
    iterations: int = 0
    residuals: Optional[KktResiduals] = None
    certificate: Optional[np.ndarray] = None
    polished: bool = False

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.y_eq = np.asarray(self.y_eq, dtype=float).reshape(-1)
        self.y_in = np.asarray(self.y_in, dtype=float).reshape(-1)
        if self.y_box is None:
            self.y_box = np.zeros_like(self.x)
        self.y_box = np.asarray(self.y_box, dtype=float).reshape(-1)

    @property
    def optimal(self) -> bool:
        return self.status is QpStatus.optimal


def check_convexity(P: sp.spmatrix, tolerance: float = 1e-9):
    """
    Raise NonConvexError unless P is symmetric positive semidefinite.

    Small matrices get an eigenvalue test; larger ones are trusted after the
    symmetry and diagonal checks.
    """
    P = sp.csc_matrix(P)
    scale = max(1.0, abs(P).max() if P.nnz else 0.0)
    if P.nnz and abs(P - P.T).max() > tolerance * scale:
        raise NonConvexError("Quadratic cost matrix is not symmetric.")
    diagonal = P.diagonal()
    if diagonal.size and diagonal.min() < -tolerance * scale:
        index = int(np.argmin(diagonal))
        raise NonConvexError(f"Quadratic cost matrix has negative diagonal at {index}.")
    if P.nnz and P.shape[0] <= DENSE_CONVEXITY_LIMIT:
        smallest = np.linalg.eigvalsh(P.toarray()).min()
        if smallest < -1e-8 * scale:
            raise NonConvexError(
                f"Quadratic cost matrix is indefinite (eigenvalue {smallest:.3e})."
            )


def kkt_residuals(qp: QuadraticProgram, sol: QpSolution) -> KktResiduals:
    """
    Infinity-norm KKT residuals of sol on the unscaled problem.

    Primal and dual residuals are absolute. Complementarity is the largest
    product of a multiplier with the slack of the bound it belongs to,
    relative to 1 + the largest multiplier.
    """
    if sol.x.shape != (qp.n,):
        raise DimensionError(f"Primal has shape {sol.x.shape}, expected ({qp.n},).")
    if sol.y_eq.shape != (qp.m_eq,) or sol.y_in.shape != (qp.m_in,):
        raise DimensionError("Dual vector sizes do not match the constraint classes.")
    if sol.y_box.shape != (qp.n,):
        raise DimensionError(f"Box duals have shape {sol.y_box.shape}, expected ({qp.n},).")
    A, l, u = qp.stacked()
    x = sol.x
    y = qp.join_duals(sol.y_eq, sol.y_in, sol.y_box)
    Ax = A @ x
    violation = np.maximum(l - Ax, 0.0) + np.maximum(Ax - u, 0.0)
    primal = float(np.max(violation, initial=0.0))
    dual = float(np.max(np.abs(qp.P @ x + qp.q + A.T @ y), initial=0.0))
    upper_part = np.maximum(y, 0.0)
    lower_part = np.maximum(-y, 0.0)
    with np.errstate(invalid="ignore"):
        upper_slack = np.where(np.isfinite(u), np.abs(u - Ax), np.inf)
        lower_slack = np.where(np.isfinite(l), np.abs(Ax - l), np.inf)
        upper_term = np.where(upper_part > 0, upper_part * upper_slack, 0.0)
        lower_term = np.where(lower_part > 0, lower_part * lower_slack, 0.0)
    products = np.maximum(upper_term, lower_term)
    # A multiplier on an infinite bound is a dual infeasibility of its own.
    products = np.where(np.isfinite(products), products, np.abs(y))
    complementarity = float(np.max(products, initial=0.0)) / (
        1.0 + float(np.max(np.abs(y), initial=0.0))
    )
    return KktResiduals(primal, dual, complementarity)


def _column_norms(matrix: sp.csc_matrix) -> np.ndarray:
    if matrix.shape[0] == 0 or matrix.nnz == 0:
        return np.zeros(matrix.shape[1])
    return np.asarray(abs(matrix).max(axis=0).todense()).ravel()


def _row_norms(matrix: sp.csc_matrix) -> np.ndarray:
    if matrix.shape[1] == 0 or matrix.nnz == 0:
        return np.zeros(matrix.shape[0])
    return np.asarray(abs(matrix).max(axis=1).todense()).ravel()


def _limit(values: np.ndarray) -> np.ndarray:
    values = np.where(values < SCALING_MIN, 1.0, values)
    return np.minimum(values, SCALING_MAX)


def _trivially_infeasible(A, l, u, lb, ub, tolerance) -> Optional[int]:
    """Index of a row whose activity range misses [l, u], or None."""
    if A.shape[0] == 0:
        return None
    positive = A.maximum(0).tocsr()
    negative = A.minimum(0).tocsr()
    lb_finite = np.isfinite(lb)
    ub_finite = np.isfinite(ub)
    lb_zeroed = np.where(lb_finite, lb, 0.0)
    ub_zeroed = np.where(ub_finite, ub, 0.0)
    low = positive @ lb_zeroed + negative @ ub_zeroed
    high = positive @ ub_zeroed + negative @ lb_zeroed
    has_pos = (positive != 0).astype(float)
    has_neg = (negative != 0).astype(float)
    lb_missing = (~lb_finite).astype(float)
    ub_missing = (~ub_finite).astype(float)
    low_unbounded = (has_pos @ lb_missing + has_neg @ ub_missing) > 0
    high_unbounded = (has_pos @ ub_missing + has_neg @ lb_missing) > 0
    finite_l = np.where(np.isfinite(l), l, 0.0)
    finite_u = np.where(np.isfinite(u), u, 0.0)
    scale = 1.0 + np.maximum(np.abs(finite_l), np.abs(finite_u))
    bad = np.flatnonzero(
        (~low_unbounded & np.isfinite(u) & (low > u + tolerance * scale))
        | (~high_unbounded & np.isfinite(l) & (high < l - tolerance * scale))
    )
    if bad.size:
        return int(bad[0])
    return None


class _Workspace:
    """Scaled problem data and ADMM iterates."""

    def __init__(self, qp: QuadraticProgram, opts: QpOptions):
        self.qp = qp
        self.opts = opts
        A, l, u = qp.stacked()
        self.n = qp.n
        self.m = A.shape[0]
        self._scale(qp.P, qp.q, A, l, u)
        self.rho = opts.rho
        self.rho_vec = self._rho_vector(self.rho)
        self.factor = None
        self.factorizations = 0
        self._factor()
        self.x = np.zeros(self.n)
        self.z = np.zeros(self.m)
        self.y = np.zeros(self.m)

    def _scale(self, P, q, A, l, u):
        d = np.ones(self.n)
        e = np.ones(self.m)
        P_s = P.copy()
        A_s = A.copy()
        for _ in range(self.opts.scaling_iter):
            d_step = 1.0 / np.sqrt(_limit(np.maximum(_column_norms(P_s), _column_norms(A_s))))
            e_step = 1.0 / np.sqrt(_limit(_row_norms(A_s)))
            D_step = sp.diags(d_step)
            E_step = sp.diags(e_step)
            P_s = (D_step @ P_s @ D_step).tocsc()
            A_s = (E_step @ A_s @ D_step).tocsc()
            d *= d_step
            e *= e_step
        q_s = d * q
        cost_norm = max(np.mean(_column_norms(P_s)) if self.n else 0.0, np.max(np.abs(q_s), initial=0.0))
        cost_norm = float(_limit(np.array([cost_norm]))[0])
        self.c = 1.0 / cost_norm
        self.d = d
        self.e = e
        self.P = (self.c * P_s).tocsc()
        self.q = self.c * q_s
        self.A = A_s
        self.AT = A_s.T.tocsc()
        with np.errstate(invalid="ignore"):
            self.l = np.where(np.isfinite(l), e * l, -np.inf)
            self.u = np.where(np.isfinite(u), e * u, np.inf)

    def _rho_vector(self, rho: float) -> np.ndarray:
        rho_vec = np.full(self.m, rho)
        free = ~np.isfinite(self.l) & ~np.isfinite(self.u)
        equality = np.isfinite(self.l) & (np.abs(self.u - self.l) < 1e-12)
        rho_vec[free] = RHO_MIN
        rho_vec[equality] = RHO_EQ_FACTOR * rho
        return rho_vec

    def _factor(self):
        top_left = self.P + self.opts.sigma * sp.identity(self.n)
        if self.m:
            kkt = sp.bmat(
                [[top_left, self.AT], [self.A, -sp.diags(1.0 / self.rho_vec)]], format="csc"
            )
        else:
            kkt = top_left.tocsc()
        self.factor = spla.splu(kkt)
        self.factorizations += 1

    def warm_start(self, warm: QpWarmStart):
        x = np.asarray(warm.x, dtype=float).reshape(-1)
        if x.shape != (self.n,):
            raise DimensionError(f"Warm start has {x.size} entries, expected {self.n}.")
        self.x = x / self.d
        self.z = np.clip(self.A @ self.x, self.l, self.u)
        if warm.y is not None:
            y = np.asarray(warm.y, dtype=float).reshape(-1)
            if y.shape == (self.m,):
                self.y = self.c * y / self.e

    def step(self):
        opts = self.opts
        rhs = np.concatenate([opts.sigma * self.x - self.q, self.z - self.y / self.rho_vec])
        solution = self.factor.solve(rhs)
        x_tilde = solution[: self.n]
        z_tilde = self.z + (solution[self.n :] - self.y) / self.rho_vec
        self.x = opts.alpha * x_tilde + (1.0 - opts.alpha) * self.x
        z_relaxed = opts.alpha * z_tilde + (1.0 - opts.alpha) * self.z
        self.z = np.clip(z_relaxed + self.y / self.rho_vec, self.l, self.u)
        self.y = self.y + self.rho_vec * (z_relaxed - self.z)

    def residuals(self, x, z, y, eps_abs=None, eps_rel=None):
        """Unscaled residuals and their convergence thresholds."""
        Ax = self.A @ x
        Px = self.P @ x
        ATy = self.AT @ y
        primal = np.max(np.abs((Ax - z) / self.e), initial=0.0)
        dual = np.max(np.abs((Px + self.q + ATy) / self.d), initial=0.0) / self.c
        primal_norm = max(
            np.max(np.abs(Ax / self.e), initial=0.0), np.max(np.abs(z / self.e), initial=0.0)
        )
        dual_norm = max(
            np.max(np.abs(Px / self.d), initial=0.0),
            np.max(np.abs(ATy / self.d), initial=0.0),
            np.max(np.abs(self.q / self.d), initial=0.0),
        ) / self.c
        eps_abs = self.opts.eps_abs if eps_abs is None else eps_abs
        eps_rel = self.opts.eps_rel if eps_rel is None else eps_rel
        eps_primal = eps_abs + eps_rel * primal_norm
        eps_dual = eps_abs + eps_rel * dual_norm
        return primal, dual, eps_primal, eps_dual

    def violation(self, x) -> float:
        """Largest unscaled constraint violation of a scaled primal point."""
        Ax = self.A @ x
        below = np.max((self.l - Ax) / self.e, initial=0.0)
        above = np.max((Ax - self.u) / self.e, initial=0.0)
        return float(max(below, above, 0.0))

    def iterate(self, first, last, eps_abs, eps_rel, detect=True):
        """
        Run ADMM steps first..last from the current iterates.

        Returns (status, last iteration, certificate).
        """
        opts = self.opts
        iteration = first - 1
        x_check, y_check = self.x.copy(), self.y.copy()
        for iteration in range(first, last + 1):
            self.step()
            if iteration % opts.check_interval and iteration != first:
                continue
            primal, dual, eps_primal, eps_dual = self.residuals(self.x, self.z, self.y, eps_abs, eps_rel)
            if primal <= eps_primal and dual <= eps_dual:
                return QpStatus.optimal, iteration, None
            if detect:
                certificate = self.primal_certificate(self.y - y_check)
                if certificate is not None:
                    return QpStatus.infeasible, iteration, certificate
                certificate = self.dual_certificate(self.x - x_check)
                if certificate is not None:
                    return QpStatus.unbounded, iteration, certificate
            x_check, y_check = self.x.copy(), self.y.copy()
            if opts.adaptive_rho:
                self.update_rho(self.x, self.z, self.y)
        return QpStatus.max_iterations, iteration, None

    def accept(self, converged):
        """
        Pick the polished point or the converged iterate, whichever meets
        the absolute feasibility tolerance with an acceptable dual residual.

        Returns (x, y, polished) in scaled space or None.
        """
        opts = self.opts
        candidates = []
        if opts.polish:
            polished = self.polish()
            if polished is not None:
                candidates.append((polished, True))
        if converged:
            candidates.append(((self.x, self.z, self.y), False))
        for (x, z, y), polished in candidates:
            _, dual, _, eps_dual = self.residuals(x, z, y)
            violation = self.violation(x)
            if dual <= eps_dual and violation <= opts.feasibility_tol:
                return x, y, polished
            logger.debug(
                "%s point rejected: violation %.2e, dual residual %.2e",
                "polished" if polished else "ADMM",
                violation,
                dual,
            )
        return None

    def update_rho(self, x, z, y):
        Ax = self.A @ x
        primal = np.max(np.abs(Ax - z), initial=0.0)
        dual = np.max(np.abs(self.P @ x + self.q + self.AT @ y), initial=0.0)
        primal_norm = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(z), initial=0.0), 1e-10)
        dual_norm = max(
            np.max(np.abs(self.P @ x), initial=0.0),
            np.max(np.abs(self.AT @ y), initial=0.0),
            np.max(np.abs(self.q), initial=0.0),
            1e-10,
        )
        ratio = (primal / primal_norm) / max(dual / dual_norm, 1e-10)
        rho_new = float(np.clip(self.rho * np.sqrt(ratio), RHO_MIN, RHO_MAX))
        tolerance = self.opts.adaptive_rho_tolerance
        if rho_new > self.rho * tolerance or rho_new < self.rho / tolerance:
            logger.debug("rho %.3e -> %.3e", self.rho, rho_new)
            self.rho = rho_new
            self.rho_vec = self._rho_vector(rho_new)
            self._factor()

    def primal_certificate(self, delta_y) -> Optional[np.ndarray]:
        eps = self.opts.eps_prim_inf
        norm = np.max(np.abs(delta_y), initial=0.0)
        if norm <= eps:
            return None
        v = delta_y / norm
        positive = v > eps
        negative = v < -eps
        if np.any(positive & ~np.isfinite(self.u)) or np.any(negative & ~np.isfinite(self.l)):
            return None
        lhs = self.u[positive] @ v[positive] + self.l[negative] @ v[negative]
        if lhs >= -eps:
            return None
        if np.max(np.abs((self.AT @ v) / self.d), initial=0.0) >= eps:
            return None
        certificate = self.e * v
        return certificate / np.max(np.abs(certificate))

    def dual_certificate(self, delta_x) -> Optional[np.ndarray]:
        eps = self.opts.eps_dual_inf
        norm = np.max(np.abs(delta_x), initial=0.0)
        if norm <= eps:
            return None
        v = delta_x / norm
        if self.q @ v >= -eps:
            return None
        if np.max(np.abs((self.P @ v) / self.d), initial=0.0) >= eps:
            return None
        Av = (self.A @ v) / self.e
        if np.any(np.isfinite(self.u) & (Av > eps)) or np.any(np.isfinite(self.l) & (Av < -eps)):
            return None
        certificate = self.d * v
        return certificate / np.max(np.abs(certificate))

    def polish(self):
        """
        Solve the equality-constrained QP on the guessed active set.

        Returns (x, z, y) in scaled space or None when the guess is unusable.
        """
        opts = self.opts
        equality = np.isfinite(self.l) & (np.abs(self.u - self.l) < 1e-12)
        low = np.flatnonzero(equality | (self.z - self.l < -self.y))
        upp = np.flatnonzero(~equality & (self.u - self.z < self.y))
        active = np.concatenate([low, upp])
        A_red = self.A[active]
        rhs = np.concatenate([-self.q, self.l[low], self.u[upp]])
        if not np.all(np.isfinite(rhs)):
            return None
        k = active.size
        top_left = self.P + opts.polish_delta * sp.identity(self.n)
        if k:
            regularized = sp.bmat(
                [[top_left, A_red.T], [A_red, -opts.polish_delta * sp.identity(k)]],
                format="csc",
            )
            exact = sp.bmat([[self.P, A_red.T], [A_red, sp.csc_matrix((k, k))]], format="csc")
        else:
            regularized = top_left.tocsc()
            exact = self.P.tocsc()
        try:
            factor = spla.splu(regularized)
        except RuntimeError:
            return None
        solution = factor.solve(rhs)
        for _ in range(opts.polish_refine_iter):
            solution = solution + factor.solve(rhs - exact @ solution)
        if not np.all(np.isfinite(solution)):
            return None
        x = solution[: self.n]
        y = np.zeros(self.m)
        y[low] = solution[self.n : self.n + low.size]
        y[upp] = solution[self.n + low.size :]
        tolerance = opts.eps_abs * (1.0 + np.max(np.abs(y), initial=0.0))
        wrong_sign = np.any(y[low[~equality[low]]] > tolerance) or np.any(y[upp] < -tolerance)
        if wrong_sign:
            return None
        z = self.A @ x
        return x, np.clip(z, self.l, self.u), y

    def unscaled(self, x, y):
        return self.d * x, self.e * y / self.c


def _solution(qp, x, y, status, iterations, certificate=None, polished=False) -> QpSolution:
    y_eq, y_in, y_box = qp.split_duals(y)
    sol = QpSolution(
        x=x,
        y_eq=y_eq,
        y_in=y_in,
        y_box=y_box,
        objective=qp.objective(x) if status is QpStatus.optimal else np.nan,
        status=status,
        iterations=iterations,
        certificate=certificate,
        polished=polished,
    )
    sol.residuals = kkt_residuals(qp, sol)
    return sol


def solve_qp(
    qp: QuadraticProgram,
    opts: Optional[QpOptions] = None,
    warm_start: Optional[QpWarmStart] = None,
) -> QpSolution:
    """
    Solve a convex QP.

    status optimal guarantees every constraint holds to within
    feasibility_tol in absolute terms and a dual residual below eps_abs +
    eps_rel * (size of the terms involved). When neither the polished point
    nor the ADMM iterate meets that, ADMM continues with tolerances tightened
    tenfold per round, up to refine_rounds rounds and another max_iter
    iterations, before giving up with max_iterations. Infeasible and
    unbounded results carry a normalized certificate vector: stacked
    multipliers (eq, in, bounded-variable rows) for infeasibility and a
    primal ray for unboundedness.
    """
    opts = opts or QpOptions()
    check_convexity(qp.P)
    A, l, u = qp.stacked()
    if np.any(l > u + 1e-12):
        row = int(np.flatnonzero(l > u + 1e-12)[0])
        certificate = np.zeros(A.shape[0])
        certificate[row] = 1.0
        return _solution(qp, np.zeros(qp.n), np.zeros(A.shape[0]), QpStatus.infeasible, 0, certificate)
    row = _trivially_infeasible(A, l, u, qp.lb, qp.ub, 1e-9)
    if row is not None:
        certificate = np.zeros(A.shape[0])
        certificate[row] = 1.0
        logger.debug("row %d cannot reach its bounds", row)
        return _solution(qp, np.zeros(qp.n), np.zeros(A.shape[0]), QpStatus.infeasible, 0, certificate)

    work = _Workspace(qp, opts)
    if warm_start is not None:
        work.warm_start(warm_start)
    status, iteration, certificate = work.iterate(1, opts.max_iter, opts.eps_abs, opts.eps_rel)
    logger.debug(
        "ADMM stopped after %d iterations (%s), %d factorizations",
        iteration,
        status.name,
        work.factorizations,
    )
    if status in (QpStatus.infeasible, QpStatus.unbounded):
        return _solution(qp, work.d * work.x, np.zeros(work.m), status, iteration, certificate)

    eps_abs, eps_rel = opts.eps_abs, opts.eps_rel
    last = iteration + opts.max_iter
    for round_ in range(opts.refine_rounds + 1):
        accepted = work.accept(status is QpStatus.optimal)
        if accepted is not None:
            x, y, polished = accepted
            x_out, y_out = work.unscaled(x, y)
            return _solution(qp, x_out, y_out, QpStatus.optimal, iteration, polished=polished)
        if round_ == opts.refine_rounds or iteration >= last:
            break
        eps_abs, eps_rel = eps_abs / 10.0, eps_rel / 10.0
        logger.debug("tightening ADMM tolerances to %.1e / %.1e", eps_abs, eps_rel)
        status, iteration, _ = work.iterate(iteration + 1, last, eps_abs, eps_rel, detect=False)

    logger.warning(
        "QP stopped after %d iterations without a point within %.1e of its constraints",
        iteration,
        opts.feasibility_tol,
    )
    x_out, y_out = work.unscaled(work.x, work.y)
    return _solution(qp, x_out, y_out, QpStatus.max_iterations, iteration)


def dump_qp(qp: QuadraticProgram, path: str):
    """
    Write a QP as plain text.

    First line ``n m_eq m_in``, then one line per nonzero: ``P i j v``,
    ``E i j v`` (equality rows), ``I i j v`` (inequality rows), and one per
    vector entry: ``q i v``, ``b i v``, ``l i v``, ``u i v``, ``lb i v``,
    ``ub i v``. Infinite bounds are written as ``inf``/``-inf``.
    """
    with open(path, "w", encoding="utf-8") as stream:
        stream.write(f"{qp.n} {qp.m_eq} {qp.m_in}\n")
        for tag, matrix in (("P", qp.P), ("E", qp.A_eq), ("I", qp.A_in)):
            coo = matrix.tocoo()
            for i, j, v in zip(coo.row, coo.col, coo.data):
                stream.write(f"{tag} {i} {j} {float(v)!r}\n")
        for tag, vector in (
            ("q", qp.q),
            ("b", qp.b_eq),
            ("l", qp.l_in),
            ("u", qp.u_in),
            ("lb", qp.lb),
            ("ub", qp.ub),
        ):
            for i, v in enumerate(vector):
                stream.write(f"{tag} {i} {float(v)!r}\n")
        if qp.constant:
            stream.write(f"c 0 {float(qp.constant)!r}\n")
