"""
Branch-and-bound for quadratic programs with binary variables.

Nodes are explored best-bound first. Until the first incumbent exists the
search dives depth-first along the child that agrees with the rounded
relaxation, and every fractional node also tries a rounding heuristic: all
binaries are fixed from their guide expressions (or nearest integer) and
the remaining convex QP is solved. Children are warm-started from their
parent's relaxation.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple
import heapq
import itertools
import logging
import threading

import numpy as np
import pandas as pd
import scipy.sparse as sp

from v2x_stack.solver.qpcore import (
    QpOptions,
    QpSolution,
    QpStatus,
    QpWarmStart,
    QuadraticProgram,
    solve_qp,
)

logger = logging.getLogger(__name__)

ORACLE_LIMIT = 20


class BranchingError(ValueError):
    pass


class OracleGuardError(ValueError):
    pass


class QpFailureError(RuntimeError):
    """A relaxation could not be solved to a usable status."""


class MiqpStatus(Enum):
    optimal = 0
    infeasible = 1
    node_limit = 2


class BranchRule(Enum):
    most_fractional = 0
    lowest_index = 1


@dataclass(frozen=True)
class BinaryInfo:
    """
    Provenance of one binary plus an optional rounding guide.

    With a guide, the heuristic sets the binary to 1 exactly when
    sum(coef * x[index] for index, coef in guide) > guide_threshold.
    """

    name: str
    kind: str = ""
    community: Optional[int] = None
    ev: Optional[str] = None
    slot: Optional[int] = None
    guide: Tuple[Tuple[int, float], ...] = ()
    guide_threshold: float = 0.0


@dataclass(frozen=True, eq=False)
class MixedIntegerQP:
    qp: QuadraticProgram
    binaries: np.ndarray
    info: Tuple[BinaryInfo, ...] = ()
    layout: Optional[object] = None
    row_labels: Tuple[Tuple[str, ...], Tuple[str, ...]] = ((), ())

    def __post_init__(self):
        binaries = np.asarray(self.binaries, dtype=int).reshape(-1)
        if binaries.size and (binaries.min() < 0 or binaries.max() >= self.qp.n):
            raise ValueError("Binary index outside the variable range.")
        if np.unique(binaries).size != binaries.size:
            raise ValueError("Binary indices must be unique.")
        object.__setattr__(self, "binaries", binaries)
        if not self.info:
            object.__setattr__(
                self, "info", tuple(BinaryInfo(self.qp.name(i)) for i in binaries)
            )
        elif len(self.info) != binaries.size:
            raise ValueError("One BinaryInfo is needed per binary.")

    @property
    def binary_count(self) -> int:
        return self.binaries.size

    def relaxation(self) -> QuadraticProgram:
        lb = self.qp.lb.copy()
        ub = self.qp.ub.copy()
        lb[self.binaries] = np.maximum(lb[self.binaries], 0.0)
        ub[self.binaries] = np.minimum(ub[self.binaries], 1.0)
        return self.qp.with_bounds(lb, ub)


@dataclass(frozen=True)
class MiqpOptions:
    gap: float = 1e-4
    node_limit: int = 50_000
    int_tol: float = 1e-5
    branch_rule: BranchRule = BranchRule.most_fractional
    dive: bool = True
    rounding: bool = True
    workers: int = 1
    qp: QpOptions = field(default_factory=QpOptions)
    search_log: Optional[str] = None
    record_nodes: bool = False


@dataclass(frozen=True)
class NodeRecord:
    node_id: int
    depth: int
    bound: float
    incumbent: float
    gap: float


@dataclass(eq=False)
class MiqpSolution:
    x: Optional[np.ndarray]
    objective: float
    status: MiqpStatus
    nodes: int = 0
    gap: float = np.inf
    qp_solution: Optional[QpSolution] = None
    records: List[NodeRecord] = field(default_factory=list)


@dataclass(eq=False)
class Node:
    """
    Subproblem: per-binary fixings (lower == upper == value when fixed).
    values holds the binary part of the node's relaxation once solved.
    """

    lower: np.ndarray
    upper: np.ndarray
    depth: int = 0
    bound: float = -np.inf
    node_id: int = 0
    warm: Optional[QpWarmStart] = None
    values: Optional[np.ndarray] = None


def relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return np.inf
    return max(0.0, incumbent - bound) / max(1.0, abs(incumbent))


def fractional_positions(values: np.ndarray, int_tol: float) -> np.ndarray:
    distance = np.abs(values - np.round(values))
    return np.flatnonzero(distance > int_tol)


def branch(
    node: Node, rule: BranchRule = BranchRule.most_fractional, int_tol: float = 1e-5
) -> Tuple[Node, Node]:
    """Split node on one fractional binary into its 0 and 1 children."""
    if node.values is None:
        raise BranchingError("Node has no relaxation values to branch on.")
    candidates = fractional_positions(node.values, int_tol)
    if candidates.size == 0:
        raise BranchingError("Node has no fractional binary.")
    if rule is BranchRule.lowest_index:
        chosen = int(candidates[0])
    else:
        fractionality = 0.5 - np.abs(node.values[candidates] - 0.5)
        # argmax returns the first maximum, i.e. the lowest index on ties.
        chosen = int(candidates[np.argmax(fractionality)])
    children = []
    for value in (0.0, 1.0):
        lower = node.lower.copy()
        upper = node.upper.copy()
        lower[chosen] = value
        upper[chosen] = value
        children.append(
            Node(lower=lower, upper=upper, depth=node.depth + 1, bound=node.bound, warm=node.warm)
        )
    return children[0], children[1]


def _chosen_binary(parent: Node, child: Node) -> int:
    return int(np.flatnonzero((child.lower != parent.lower) | (child.upper != parent.upper))[0])


class _Search:
    """State of one branch-and-bound run."""

    def __init__(self, m: MixedIntegerQP, opts: MiqpOptions):
        self.m = m
        self.opts = opts
        self.relaxation = m.relaxation()
        self.base_lb = self.relaxation.lb
        self.base_ub = self.relaxation.ub
        self.lock = threading.Lock()
        self.incumbent_x: Optional[np.ndarray] = None
        self.incumbent_obj = np.inf
        self.incumbent_sol: Optional[QpSolution] = None
        self.heap: list = []
        self.dive: List[Node] = []
        self.counter = itertools.count()
        self.explored = 0
        self.pruned_bound = np.inf
        self.records: List[NodeRecord] = []
        self._build_guides()

    def _build_guides(self):
        rows, cols, vals = [], [], []
        thresholds = np.zeros(self.m.binary_count)
        guided = np.zeros(self.m.binary_count, dtype=bool)
        for k, info in enumerate(self.m.info):
            if info.guide:
                guided[k] = True
                thresholds[k] = info.guide_threshold
                for index, coef in info.guide:
                    rows.append(k)
                    cols.append(index)
                    vals.append(coef)
        self.guide_matrix = sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.m.binary_count, self.m.qp.n)
        )
        self.guide_thresholds = thresholds
        self.guided = guided

    def node_problem(self, lower: np.ndarray, upper: np.ndarray) -> QuadraticProgram:
        lb = self.base_lb.copy()
        ub = self.base_ub.copy()
        lb[self.m.binaries] = lower
        ub[self.m.binaries] = upper
        return self.relaxation.with_bounds(lb, ub)

    def solve_node(self, node: Node) -> QpSolution:
        sol = solve_qp(self.node_problem(node.lower, node.upper), self.opts.qp, node.warm)
        if sol.status is QpStatus.unbounded:
            raise QpFailureError(f"Relaxation of node {node.node_id} is unbounded.")
        return sol

    def cutoff(self, bound: float) -> bool:
        if self.incumbent_x is None:
            return False
        return self.incumbent_obj - bound <= self.opts.gap * max(1.0, abs(self.incumbent_obj))

    def rounded(self, x: np.ndarray, node: Node) -> np.ndarray:
        nearest = (x[self.m.binaries] >= 0.5).astype(float)
        guided = (self.guide_matrix @ x > self.guide_thresholds).astype(float)
        values = np.where(self.guided, guided, nearest)
        return np.clip(values, node.lower, node.upper)

    def try_assignment(self, assignment: np.ndarray, warm: Optional[QpWarmStart]):
        """Solve with every binary fixed and keep the result if it improves."""
        sol = solve_qp(self.node_problem(assignment, assignment), self.opts.qp, warm)
        if sol.status is not QpStatus.optimal:
            return
        x = sol.x.copy()
        x[self.m.binaries] = assignment
        objective = self.m.qp.objective(x)
        with self.lock:
            if objective < self.incumbent_obj:
                logger.debug("incumbent %.8g at node %d", objective, self.explored)
                self.incumbent_obj = objective
                self.incumbent_x = x
                self.incumbent_sol = sol

    def push(self, node: Node):
        node.node_id = next(self.counter)
        heapq.heappush(self.heap, (node.bound, node.node_id, node))

    def best_open_bound(self) -> float:
        bounds = [entry[0] for entry in self.heap[:1]] + [node.bound for node in self.dive]
        return min(bounds, default=np.inf)

    def record(self, node: Node, bound: float):
        if self.opts.record_nodes or self.opts.search_log:
            self.records.append(
                NodeRecord(
                    node.node_id,
                    node.depth,
                    bound,
                    self.incumbent_obj,
                    relative_gap(self.incumbent_obj, min(bound, self.best_open_bound())),
                )
            )

    def process(self, node: Node, sol: QpSolution):
        if sol.status is QpStatus.infeasible:
            self.record(node, np.inf)
            return
        if sol.status is QpStatus.optimal:
            bound = max(node.bound, sol.objective)
        else:
            logger.warning("node %d relaxation stopped at %s", node.node_id, sol.status.name)
            bound = node.bound
        node.bound = bound
        self.record(node, bound)
        if self.cutoff(bound):
            self.pruned_bound = min(self.pruned_bound, bound)
            return
        warm = QpWarmStart(sol.x, np.concatenate([sol.y_eq, sol.y_in, sol.y_box[self.relaxation.box_rows()]]))
        node.values = sol.x[self.m.binaries]
        if fractional_positions(node.values, self.opts.int_tol).size == 0:
            self.try_assignment(np.clip(np.round(node.values), node.lower, node.upper), warm)
            return
        if self.opts.rounding and (self.incumbent_x is None or node.depth == 0):
            self.try_assignment(self.rounded(sol.x, node), warm)
            if self.cutoff(bound):
                self.pruned_bound = min(self.pruned_bound, bound)
                return
        node.warm = warm
        zero_child, one_child = branch(node, self.opts.branch_rule, self.opts.int_tol)
        chosen = _chosen_binary(node, one_child)
        if self.opts.dive and self.incumbent_x is None:
            if node.values[chosen] >= 0.5:
                preferred, other = one_child, zero_child
            else:
                preferred, other = zero_child, one_child
            self.push(other)
            preferred.node_id = next(self.counter)
            self.dive.append(preferred)
        else:
            self.push(zero_child)
            self.push(one_child)

    def next_batch(self, size: int) -> List[Node]:
        batch = []
        while len(batch) < size and (self.dive or self.heap):
            if self.dive:
                node = self.dive.pop()
            else:
                node = heapq.heappop(self.heap)[2]
            if self.cutoff(node.bound):
                self.pruned_bound = min(self.pruned_bound, node.bound)
                continue
            batch.append(node)
            if self.dive or batch[-1].depth == 0:
                # Dives are sequential by construction.
                break
        return batch

    def run(self) -> MiqpStatus:
        root = Node(
            lower=self.base_lb[self.m.binaries].copy(),
            upper=self.base_ub[self.m.binaries].copy(),
        )
        self.push(root)
        workers = max(1, self.opts.workers)
        executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        try:
            while self.dive or self.heap:
                if self.explored >= self.opts.node_limit:
                    return MiqpStatus.node_limit
                if self.incumbent_x is not None and not self.dive:
                    best = self.best_open_bound()
                    if relative_gap(self.incumbent_obj, best) <= self.opts.gap and self.heap:
                        self.pruned_bound = min(self.pruned_bound, best)
                        return MiqpStatus.optimal
                batch = self.next_batch(min(workers, self.opts.node_limit - self.explored))
                if not batch:
                    continue
                if executor is None:
                    solutions = [self.solve_node(node) for node in batch]
                else:
                    solutions = list(executor.map(self.solve_node, batch))
                for node, sol in zip(batch, solutions):
                    self.explored += 1
                    self.process(node, sol)
        finally:
            if executor is not None:
                executor.shutdown()
        return MiqpStatus.optimal if self.incumbent_x is not None else MiqpStatus.infeasible


def solve_miqp(m: MixedIntegerQP, opts: Optional[MiqpOptions] = None) -> MiqpSolution:
    """
    Minimize the MIQP; the incumbent is returned once the relative gap
    (incumbent - bound) / max(1, |incumbent|) is within opts.gap.

    Results are deterministic with one worker. With several workers,
    relaxations of a batch of open nodes are solved concurrently and the
    incumbent is updated under a lock.
    """
    opts = opts or MiqpOptions()
    if m.binary_count == 0:
        sol = solve_qp(m.qp, opts.qp)
        if sol.status is QpStatus.optimal:
            return MiqpSolution(sol.x, sol.objective, MiqpStatus.optimal, 1, 0.0, sol)
        if sol.status is QpStatus.infeasible:
            return MiqpSolution(None, np.inf, MiqpStatus.infeasible, 1, np.inf, sol)
        raise QpFailureError(f"Continuous problem stopped at {sol.status.name}.")

    search = _Search(m, opts)
    status = search.run()
    if search.incumbent_x is None:
        gap = np.inf
        objective = np.inf
    else:
        objective = search.incumbent_obj
        gap = relative_gap(objective, min(search.best_open_bound(), search.pruned_bound, objective))
    if status is MiqpStatus.node_limit and search.incumbent_x is None:
        logger.warning("node limit %d reached without an incumbent", opts.node_limit)
    logger.debug("B&B %s after %d nodes, gap %.3g", status.name, search.explored, gap)
    if opts.search_log:
        write_search_log(search.records, opts.search_log)
    return MiqpSolution(
        x=search.incumbent_x,
        objective=objective,
        status=status,
        nodes=search.explored,
        gap=gap,
        qp_solution=search.incumbent_sol,
        records=search.records,
    )


def enumerate_oracle(m: MixedIntegerQP, qp_opts: Optional[QpOptions] = None) -> MiqpSolution:
    """Solve one QP per binary assignment and keep the best."""
    if m.binary_count > ORACLE_LIMIT:
        raise OracleGuardError(
            f"{m.binary_count} binaries exceed the enumeration limit of {ORACLE_LIMIT}."
        )
    qp_opts = qp_opts or QpOptions()
    if m.binary_count == 0:
        return solve_miqp(m, MiqpOptions(qp=qp_opts))
    relaxation = m.relaxation()
    best = MiqpSolution(None, np.inf, MiqpStatus.infeasible)
    count = 0
    for assignment in itertools.product((0.0, 1.0), repeat=m.binary_count):
        count += 1
        values = np.array(assignment)
        lb = relaxation.lb.copy()
        ub = relaxation.ub.copy()
        lb[m.binaries] = values
        ub[m.binaries] = values
        sol = solve_qp(relaxation.with_bounds(lb, ub), qp_opts)
        if sol.status is QpStatus.infeasible:
            continue
        if sol.status is not QpStatus.optimal:
            logger.warning("oracle QP for assignment %s stopped at %s", assignment, sol.status.name)
            raise QpFailureError(
                f"Assignment {tuple(int(v) for v in assignment)} stopped at {sol.status.name}."
            )
        x = sol.x.copy()
        x[m.binaries] = values
        objective = m.qp.objective(x)
        if objective < best.objective:
            best = MiqpSolution(x, objective, MiqpStatus.optimal, 0, 0.0, sol)
    best.nodes = count
    return best


def write_search_log(records: Sequence[NodeRecord], path: str):
    frame = pd.DataFrame(
        [(r.node_id, r.depth, r.bound, r.incumbent, r.gap) for r in records],
        columns=["node_id", "depth", "bound", "incumbent", "gap"],
    )
    frame.to_csv(path, index=False)
