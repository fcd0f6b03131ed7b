""" Incremental assembly of sparse quadratic programs by variable index. """

from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from v2x_stack.solver.miqp import BinaryInfo, MixedIntegerQP
from v2x_stack.solver.qpcore import QuadraticProgram

Terms = Iterable[Tuple[int, float]]


class _RowSet:
    """Coordinate-format rows with range bounds and labels."""

    def __init__(self):
        self.rows: List[int] = []
        self.cols: List[int] = []
        self.vals: List[float] = []
        self.lower: List[float] = []
        self.upper: List[float] = []
        self.labels: List[str] = []

    def __len__(self):
        return len(self.labels)

    def add(self, terms: Terms, lower: float, upper: float, label: str) -> int:
        row = len(self.labels)
        for index, coef in terms:
            if coef != 0.0:
                self.rows.append(row)
                self.cols.append(int(index))
                self.vals.append(float(coef))
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.labels.append(label)
        return row

    def matrix(self, n: int) -> sp.csc_matrix:
        return sp.csc_matrix(
            (self.vals, (self.rows, self.cols)), shape=(len(self.labels), n)
        )


class ProblemBuilder:
    """
    Collects variables, linear rows and separable quadratic costs.

    Variables are referenced by the integer index returned when they are
    added. Duplicate coefficients on one row are summed.
    """

    def __init__(self):
        self.names: List[str] = []
        self.lb: List[float] = []
        self.ub: List[float] = []
        self.linear: List[float] = []
        self._p_rows: List[int] = []
        self._p_cols: List[int] = []
        self._p_vals: List[float] = []
        self.constant = 0.0
        self.equalities = _RowSet()
        self.inequalities = _RowSet()
        self.binaries: List[Tuple[int, BinaryInfo]] = []

    @property
    def size(self) -> int:
        return len(self.names)

    def add_variable(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        if lb > ub:
            raise ValueError(f"Variable {name} has lower bound {lb} above upper bound {ub}.")
        self.names.append(name)
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.linear.append(0.0)
        return len(self.names) - 1

    def add_variables(
        self, name: str, shape: Sequence[int], lb=-np.inf, ub=np.inf
    ) -> np.ndarray:
        """Add an array of variables; lb/ub broadcast against shape."""
        shape = tuple(shape)
        lower = np.broadcast_to(np.asarray(lb, dtype=float), shape)
        upper = np.broadcast_to(np.asarray(ub, dtype=float), shape)
        indices = np.empty(shape, dtype=int)
        for position in np.ndindex(*shape):
            label = ",".join(str(p) for p in position)
            indices[position] = self.add_variable(
                f"{name}[{label}]", lower[position], upper[position]
            )
        return indices

    def fix(self, index: int, value: float):
        self.lb[index] = float(value)
        self.ub[index] = float(value)

    def add_equality(self, terms: Terms, rhs: float, label: str = "") -> int:
        return self.equalities.add(terms, rhs, rhs, label)

    def add_range(
        self, terms: Terms, lower: float = -np.inf, upper: float = np.inf, label: str = ""
    ) -> int:
        return self.inequalities.add(terms, lower, upper, label)

    def add_cost(self, index: int, coef: float):
        self.linear[index] += float(coef)

    def add_square(self, index: int, weight: float, target: float = 0.0):
        """Add weight * (x - target)^2 to the objective."""
        if weight < 0:
            raise ValueError("Quadratic weights must be nonnegative.")
        self._p_rows.append(index)
        self._p_cols.append(index)
        self._p_vals.append(2.0 * weight)
        self.linear[index] += -2.0 * weight * target
        self.constant += weight * target * target

    def add_binary(self, index: int, info: BinaryInfo):
        self.lb[index] = max(self.lb[index], 0.0)
        self.ub[index] = min(self.ub[index], 1.0)
        self.binaries.append((index, info))

    def build(self) -> QuadraticProgram:
        n = self.size
        P = sp.csc_matrix((self._p_vals, (self._p_rows, self._p_cols)), shape=(n, n))
        return QuadraticProgram(
            P=P,
            q=np.array(self.linear),
            A_eq=self.equalities.matrix(n),
            b_eq=np.array(self.equalities.lower),
            A_in=self.inequalities.matrix(n),
            l_in=np.array(self.inequalities.lower),
            u_in=np.array(self.inequalities.upper),
            lb=np.array(self.lb),
            ub=np.array(self.ub),
            names=tuple(self.names),
            constant=self.constant,
        )

    def build_mixed(self, layout: Optional[object] = None) -> MixedIntegerQP:
        qp = self.build()
        ordered = sorted(self.binaries, key=lambda item: item[0])
        return MixedIntegerQP(
            qp=qp,
            binaries=np.array([index for index, _ in ordered], dtype=int),
            info=tuple(info for _, info in ordered),
            layout=layout,
            row_labels=(tuple(self.equalities.labels), tuple(self.inequalities.labels)),
        )
