"""
Linear / mixed-integer modelling kernel.

``LinearModel`` collects variables, sparse constraint rows and a linear
objective. ``solve_lp`` runs the HiGHS simplex through
``scipy.optimize.linprog``; ``solve_milp`` either drives HiGHS' own MILP
(``scipy.optimize.milp``) or a small deterministic best-bound
branch-and-bound on top of ``solve_lp``.
"""

from __future__ import annotations

import math
import re
import heapq
import itertools
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import structlog
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp
from tenacity import RetryError, Retrying, retry_if_exception_type, stop_after_attempt

from feeder_microgrid.exceptions import ModelError, SolverError

logger = structlog.get_logger(__name__)

FEASIBILITY_TOL = 1e-7
INTEGRALITY_TOL = 1e-6

# HiGHS algorithms tried in order when an LP reports numerical trouble
LP_METHODS: Tuple[str, ...] = ("highs-ds", "highs-ipm", "highs")

Number = Union[int, float]


class Sense(str, Enum):
    LE = "<="
    EQ = "=="
    GE = ">="


class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration-limit"


# =============================================================================
# Expressions
# =============================================================================


class LinExpr:
    """Sparse affine expression ``Σ a_j x_j + c``."""

    __slots__ = ("terms", "constant")

    def __init__(self, terms: Optional[Mapping[int, float]] = None, constant: float = 0.0):
        self.terms: Dict[int, float] = dict(terms) if terms else {}
        self.constant = float(constant)

    @staticmethod
    def of(value: "ExprLike") -> "LinExpr":
        if isinstance(value, LinExpr):
            return value
        return LinExpr(constant=float(value))

    def copy(self) -> "LinExpr":
        return LinExpr(self.terms, self.constant)

    def _iadd(self, other: "ExprLike", scale: float = 1.0) -> "LinExpr":
        if isinstance(other, LinExpr):
            for idx, coef in other.terms.items():
                self.terms[idx] = self.terms.get(idx, 0.0) + scale * coef
            self.constant += scale * other.constant
        else:
            self.constant += scale * float(other)
        return self

    def __add__(self, other: "ExprLike") -> "LinExpr":
        return self.copy()._iadd(other)

    __radd__ = __add__

    def __sub__(self, other: "ExprLike") -> "LinExpr":
        return self.copy()._iadd(other, -1.0)

    def __rsub__(self, other: "ExprLike") -> "LinExpr":
        return (-self)._iadd(other)

    def __neg__(self) -> "LinExpr":
        return self * -1.0

    def __mul__(self, scalar: Number) -> "LinExpr":
        if isinstance(scalar, LinExpr):
            raise ModelError("product of two expressions is not linear")
        s = float(scalar)
        return LinExpr({k: v * s for k, v in self.terms.items()}, self.constant * s)

    __rmul__ = __mul__

    def __truediv__(self, scalar: Number) -> "LinExpr":
        return self * (1.0 / float(scalar))

    def evaluate(self, x: np.ndarray) -> float:
        return self.constant + sum(coef * x[idx] for idx, coef in self.terms.items())

    def __repr__(self) -> str:
        parts = [f"{c:+g}*v{i}" for i, c in sorted(self.terms.items())]
        return f"LinExpr({' '.join(parts) or '0'} {self.constant:+g})"


class Var(LinExpr):
    __slots__ = ("index", "name")

    def __init__(self, index: int, name: str):
        super().__init__({index: 1.0})
        self.index = index
        self.name = name

    def __repr__(self) -> str:
        return f"Var({self.name})"


ExprLike = Union[LinExpr, Number]


def quicksum(items: Iterable[ExprLike]) -> LinExpr:
    total = LinExpr()
    for item in items:
        total._iadd(item)
    return total


class ConstraintSpec(NamedTuple):
    lhs: LinExpr
    sense: Sense
    rhs: float


@dataclass
class Row:
    name: str
    coefs: Dict[int, float]
    sense: Sense
    rhs: float


@dataclass(frozen=True, eq=False)
class CompiledModel:
    """Matrix form in minimisation sense (``c_min = sign * c``)."""

    c: np.ndarray
    sign: float
    offset: float
    a: sparse.csr_matrix
    row_lo: np.ndarray
    row_hi: np.ndarray
    a_ub: sparse.csr_matrix
    b_ub: np.ndarray
    a_eq: sparse.csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    integrality: np.ndarray


# =============================================================================
# Model
# =============================================================================


class LinearModel:
    """Variables, constraint rows and an objective."""

    def __init__(self, name: str = "model"):
        self.name = name
        self._names: List[str] = []
        self._name_set: set = set()
        self._lb: List[float] = []
        self._ub: List[float] = []
        self._binary: List[bool] = []
        self.rows: List[Row] = []
        self.objective = LinExpr()
        self.maximize = True

    # -- building -----------------------------------------------------------

    @property
    def n_vars(self) -> int:
        return len(self._names)

    @property
    def n_constraints(self) -> int:
        return len(self.rows)

    @property
    def binaries(self) -> List[int]:
        return [i for i, b in enumerate(self._binary) if b]

    @property
    def var_names(self) -> Tuple[str, ...]:
        return tuple(self._names)

    def add_var(
        self,
        name: str,
        lb: float = 0.0,
        ub: float = math.inf,
        binary: bool = False,
    ) -> Var:
        if name in self._name_set:
            raise ModelError(f"duplicate variable name {name!r}")
        if binary:
            lb, ub = max(0.0, lb), min(1.0, ub)
        if math.isnan(lb) or math.isnan(ub):
            raise ModelError(f"variable {name!r} has NaN bounds")
        var = Var(len(self._names), name)
        self._names.append(name)
        self._name_set.add(name)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._binary.append(binary)
        return var

    def set_bounds(self, var: Var, lb: Optional[float] = None, ub: Optional[float] = None) -> None:
        if lb is not None:
            self._lb[var.index] = float(lb)
        if ub is not None:
            self._ub[var.index] = float(ub)

    def bounds_of(self, var: Var) -> Tuple[float, float]:
        return self._lb[var.index], self._ub[var.index]

    def add_constraint(
        self,
        lhs: ExprLike,
        sense: Union[Sense, str],
        rhs: ExprLike = 0.0,
        name: Optional[str] = None,
    ) -> Row:
        expr = LinExpr.of(lhs) - rhs
        coefs = {i: c for i, c in expr.terms.items() if c != 0.0}
        for idx in coefs:
            if not 0 <= idx < self.n_vars:
                raise ModelError(f"constraint references undeclared variable index {idx}")
        row = Row(name or f"c{len(self.rows)}", coefs, Sense(sense), -expr.constant)
        self.rows.append(row)
        return row

    def add_constraints(self, specs: Iterable[ConstraintSpec], name: str) -> List[Row]:
        return [
            self.add_constraint(spec.lhs, spec.sense, spec.rhs, f"{name}_{j}")
            for j, spec in enumerate(specs)
        ]

    def set_objective(self, expr: ExprLike, sense: str = "max") -> None:
        if sense not in ("max", "min"):
            raise ModelError(f"objective sense must be 'max' or 'min', got {sense!r}")
        self.objective = LinExpr.of(expr).copy()
        for idx in self.objective.terms:
            if not 0 <= idx < self.n_vars:
                raise ModelError(f"objective references undeclared variable index {idx}")
        self.maximize = sense == "max"

    # -- matrix form --------------------------------------------------------

    def compile(self) -> CompiledModel:
        n = self.n_vars
        sign = -1.0 if self.maximize else 1.0
        c = np.zeros(n)
        for idx, coef in self.objective.terms.items():
            c[idx] = sign * coef

        data: List[float] = []
        rows: List[int] = []
        cols: List[int] = []
        lo = np.empty(len(self.rows))
        hi = np.empty(len(self.rows))
        for r, row in enumerate(self.rows):
            for idx, coef in row.coefs.items():
                rows.append(r)
                cols.append(idx)
                data.append(coef)
            lo[r] = row.rhs if row.sense in (Sense.GE, Sense.EQ) else -np.inf
            hi[r] = row.rhs if row.sense in (Sense.LE, Sense.EQ) else np.inf
        a = sparse.csr_matrix((data, (rows, cols)), shape=(len(self.rows), n))

        eq = np.array([row.sense is Sense.EQ for row in self.rows], dtype=bool)
        ge = np.array([row.sense is Sense.GE for row in self.rows], dtype=bool)
        ineq = ~eq
        flip = np.where(ge, -1.0, 1.0)
        rhs = np.array([row.rhs for row in self.rows])
        a_ub = sparse.diags(flip[ineq]) @ a[ineq] if ineq.any() else sparse.csr_matrix((0, n))
        return CompiledModel(
            c=c,
            sign=sign,
            offset=self.objective.constant,
            a=a,
            row_lo=lo,
            row_hi=hi,
            a_ub=sparse.csr_matrix(a_ub),
            b_ub=(flip * rhs)[ineq],
            a_eq=a[eq] if eq.any() else sparse.csr_matrix((0, n)),
            b_eq=rhs[eq],
            lb=np.array(self._lb),
            ub=np.array(self._ub),
            integrality=np.array(self._binary, dtype=int),
        )

    def max_violation(self, x: np.ndarray) -> float:
        """Largest bound or row violation of assignment ``x``."""
        worst = 0.0
        if self.n_vars:
            worst = max(
                float(np.max(np.array(self._lb) - x, initial=0.0)),
                float(np.max(x - np.array(self._ub), initial=0.0)),
            )
        for row in self.rows:
            act = sum(c * x[i] for i, c in row.coefs.items())
            if row.sense is Sense.LE:
                worst = max(worst, act - row.rhs)
            elif row.sense is Sense.GE:
                worst = max(worst, row.rhs - act)
            else:
                worst = max(worst, abs(act - row.rhs))
        return worst

    # -- interchange --------------------------------------------------------

    def write_lp(self, path: Union[str, Path]) -> Path:
        """Dump the model in CPLEX LP text format."""
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(self.to_lp_string(), encoding="utf-8")
        logger.debug("lp_written", path=str(target), vars=self.n_vars, rows=self.n_constraints)
        return target

    def to_lp_string(self) -> str:
        names = _lp_names(self._names)

        def linear(coefs: Mapping[int, float]) -> List[str]:
            if not coefs:
                return ["0 " + names[0]] if names else ["0"]
            out = []
            for k, (idx, coef) in enumerate(sorted(coefs.items())):
                op = "-" if coef < 0 else "+"
                term = f"{op} {_fmt(abs(coef))} {names[idx]}"
                out.append(term[2:] if k == 0 and op == "+" else term)
            return out

        lines = [f"\\ {self.name}", "Maximize" if self.maximize else "Minimize"]
        lines.extend(_wrap(" obj:", linear(self.objective.terms)))
        lines.append("Subject To")
        for row in self.rows:
            op = {"<=": "<=", ">=": ">=", "==": "="}[row.sense.value]
            lines.extend(_wrap(f" {_safe(row.name)}:", linear(row.coefs) + [f"{op} {_fmt(row.rhs)}"]))
        lines.append("Bounds")
        for idx, name in enumerate(names):
            lb, ub = self._lb[idx], self._ub[idx]
            if self._binary[idx]:
                continue
            if math.isinf(lb) and math.isinf(ub):
                lines.append(f" {name} free")
            elif math.isinf(ub):
                lines.append(f" {name} >= {_fmt(lb)}")
            elif math.isinf(lb):
                lines.append(f" -inf <= {name} <= {_fmt(ub)}")
            else:
                lines.append(f" {_fmt(lb)} <= {name} <= {_fmt(ub)}")
        bins = [names[i] for i in self.binaries]
        if bins:
            lines.append("Binaries")
            lines.extend(_wrap("", bins))
        lines.append("End")
        return "\n".join(lines) + "\n"


def _safe(name: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9_.]", "_", name)
    return cleaned if cleaned and not cleaned[0].isdigit() else f"v_{cleaned}"


def _lp_names(names: Sequence[str]) -> List[str]:
    out: List[str] = []
    seen: set = set()
    for idx, name in enumerate(names):
        safe = _safe(name)
        if safe in seen:
            safe = f"{safe}_{idx}"
        seen.add(safe)
        out.append(safe)
    return out


def _fmt(value: float) -> str:
    return f"{value:.12g}"


def _wrap(head: str, tokens: List[str], per_line: int = 8) -> List[str]:
    lines = []
    for start in range(0, max(len(tokens), 1), per_line):
        chunk = " ".join(tokens[start:start + per_line])
        lines.append(f"{head} {chunk}" if start == 0 and head else f"   {chunk}")
    return lines


# =============================================================================
# Solutions
# =============================================================================


@dataclass(frozen=True, eq=False)
class MilpSolution:
    status: SolveStatus
    objective: float = math.nan
    x: Optional[np.ndarray] = None
    nodes: int = 0
    lp_iterations: int = 0
    dual_objective: Optional[float] = None
    gap: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    @property
    def is_optimal(self) -> bool:
        return self.status is SolveStatus.OPTIMAL

    @property
    def has_point(self) -> bool:
        return self.x is not None

    def value(self, expr: ExprLike) -> float:
        if self.x is None:
            raise SolverError(f"no assignment available (status {self.status.value})")
        return LinExpr.of(expr).evaluate(self.x)

    def values(self, exprs: Iterable[ExprLike]) -> np.ndarray:
        return np.array([self.value(e) for e in exprs])


class _NumericalTrouble(Exception):
    pass


@dataclass
class _LpResult:
    status: SolveStatus
    x: Optional[np.ndarray]
    z_min: float
    iterations: int
    dual_min: Optional[float]


def _trivial_lp(compiled: CompiledModel, lb: np.ndarray, ub: np.ndarray) -> _LpResult:
    """Model without variables: only constant rows to check."""
    ok = np.all(compiled.row_lo <= FEASIBILITY_TOL) and np.all(compiled.row_hi >= -FEASIBILITY_TOL)
    status = SolveStatus.OPTIMAL if ok else SolveStatus.INFEASIBLE
    return _LpResult(status, np.zeros(0) if ok else None, 0.0, 0, 0.0 if ok else None)


def _dual_value(compiled: CompiledModel, res, lb: np.ndarray, ub: np.ndarray) -> Optional[float]:
    try:
        parts = [
            float(compiled.b_ub @ res.ineqlin.marginals) if compiled.b_ub.size else 0.0,
            float(compiled.b_eq @ res.eqlin.marginals) if compiled.b_eq.size else 0.0,
        ]
        lo_m = np.asarray(res.lower.marginals)
        hi_m = np.asarray(res.upper.marginals)
    except AttributeError:
        return None
    finite_lo = np.isfinite(lb)
    finite_hi = np.isfinite(ub)
    parts.append(float(lb[finite_lo] @ lo_m[finite_lo]))
    parts.append(float(ub[finite_hi] @ hi_m[finite_hi]))
    return sum(parts)


def _lp_relaxation(compiled: CompiledModel, lb: np.ndarray, ub: np.ndarray) -> _LpResult:
    if compiled.c.size == 0:
        return _trivial_lp(compiled, lb, ub)
    if np.any(lb > ub + FEASIBILITY_TOL):
        return _LpResult(SolveStatus.INFEASIBLE, None, math.inf, 0, None)

    bounds = np.column_stack([
        np.where(np.isfinite(lb), lb, -np.inf),
        np.where(np.isfinite(ub), ub, np.inf),
    ])
    kwargs = dict(
        c=compiled.c,
        A_ub=compiled.a_ub if compiled.b_ub.size else None,
        b_ub=compiled.b_ub if compiled.b_ub.size else None,
        A_eq=compiled.a_eq if compiled.b_eq.size else None,
        b_eq=compiled.b_eq if compiled.b_eq.size else None,
        bounds=bounds,
        options={
            "primal_feasibility_tolerance": FEASIBILITY_TOL,
            "dual_feasibility_tolerance": FEASIBILITY_TOL,
        },
    )
    retrying = Retrying(
        stop=stop_after_attempt(len(LP_METHODS)),
        retry=retry_if_exception_type(_NumericalTrouble),
    )
    try:
        for attempt in retrying:
            with attempt:
                method = LP_METHODS[attempt.retry_state.attempt_number - 1]
                res = linprog(method=method, **kwargs)
                if res.status in (1, 4):
                    logger.warning("lp_numerical_trouble", method=method, message=res.message)
                    raise _NumericalTrouble(res.message)
    except RetryError:
        return _LpResult(SolveStatus.ITERATION_LIMIT, None, math.nan, 0, None)

    iterations = int(getattr(res, "nit", 0) or 0)
    if res.status == 2:
        return _LpResult(SolveStatus.INFEASIBLE, None, math.inf, iterations, None)
    if res.status == 3:
        return _LpResult(SolveStatus.UNBOUNDED, None, -math.inf, iterations, None)
    return _LpResult(
        SolveStatus.OPTIMAL,
        np.asarray(res.x, dtype=float),
        float(res.fun),
        iterations,
        _dual_value(compiled, res, lb, ub),
    )


def _to_solution(compiled: CompiledModel, lp: _LpResult, nodes: int = 0, **extra) -> MilpSolution:
    if lp.status is not SolveStatus.OPTIMAL:
        return MilpSolution(lp.status, nodes=nodes, lp_iterations=lp.iterations, **extra)
    objective = compiled.sign * lp.z_min + compiled.offset
    dual = None if lp.dual_min is None else compiled.sign * lp.dual_min + compiled.offset
    return MilpSolution(
        SolveStatus.OPTIMAL,
        objective=objective,
        x=lp.x,
        nodes=nodes,
        lp_iterations=lp.iterations,
        dual_objective=dual,
        **extra,
    )


def solve_lp(model: LinearModel) -> MilpSolution:
    """Solve the continuous relaxation of ``model``."""
    compiled = model.compile()
    lp = _lp_relaxation(compiled, compiled.lb, compiled.ub)
    return _to_solution(compiled, lp)


# =============================================================================
# Mixed-integer
# =============================================================================


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    lb: np.ndarray = field(compare=False)
    ub: np.ndarray = field(compare=False)
    x: np.ndarray = field(compare=False)


def _most_fractional(x: np.ndarray, binaries: np.ndarray) -> Optional[int]:
    vals = x[binaries]
    dist = np.minimum(vals - np.floor(vals), np.ceil(vals) - vals)
    if not np.any(dist > INTEGRALITY_TOL):
        return None
    # argmax returns the first maximiser: ties go to the lowest index
    return int(binaries[int(np.argmax(dist))])


def _branch_and_bound(
    model: LinearModel, compiled: CompiledModel, gap: float, node_limit: int
) -> MilpSolution:
    binaries = np.array(model.binaries, dtype=int)
    root = _lp_relaxation(compiled, compiled.lb.copy(), compiled.ub.copy())
    if root.status is not SolveStatus.OPTIMAL:
        return _to_solution(compiled, root, nodes=1)

    seq = itertools.count()
    heap: List[_Node] = [_Node(root.z_min, next(seq), compiled.lb.copy(), compiled.ub.copy(), root.x)]
    incumbent: Optional[np.ndarray] = None
    incumbent_z = math.inf
    nodes = 0
    iterations = root.iterations
    hit_limit = False

    def closes(bound: float) -> bool:
        return incumbent_z - bound <= gap * max(1.0, abs(incumbent_z))

    while heap:
        node = heapq.heappop(heap)
        if incumbent is not None and closes(node.bound):
            heap.clear()
            break
        if nodes >= node_limit:
            hit_limit = True
            heapq.heappush(heap, node)
            break
        nodes += 1
        j = _most_fractional(node.x, binaries)
        if j is None:
            if node.bound < incumbent_z:
                incumbent, incumbent_z = node.x, node.bound
            continue
        for value in (0.0, 1.0):
            lb, ub = node.lb.copy(), node.ub.copy()
            lb[j] = ub[j] = value
            child = _lp_relaxation(compiled, lb, ub)
            iterations += child.iterations
            if child.status is SolveStatus.ITERATION_LIMIT:
                hit_limit = True
                continue
            if child.status is not SolveStatus.OPTIMAL:
                continue
            if incumbent is not None and closes(child.z_min):
                continue
            heapq.heappush(heap, _Node(child.z_min, next(seq), lb, ub, child.x))

    best_bound = min((n.bound for n in heap), default=incumbent_z)
    if incumbent is None:
        status = SolveStatus.ITERATION_LIMIT if hit_limit else SolveStatus.INFEASIBLE
        return MilpSolution(status, nodes=nodes, lp_iterations=iterations)

    status = SolveStatus.ITERATION_LIMIT if hit_limit else SolveStatus.OPTIMAL
    rel_gap = (incumbent_z - best_bound) / max(1.0, abs(incumbent_z)) if heap else 0.0
    return MilpSolution(
        status,
        objective=compiled.sign * incumbent_z + compiled.offset,
        x=incumbent,
        nodes=nodes,
        lp_iterations=iterations,
        gap=max(0.0, rel_gap),
    )


def _highs_milp(
    compiled: CompiledModel, gap: float, node_limit: int, time_limit: Optional[float]
) -> MilpSolution:
    constraints = []
    if compiled.a.shape[0]:
        constraints.append(LinearConstraint(compiled.a, compiled.row_lo, compiled.row_hi))
    options = {"mip_rel_gap": gap, "node_limit": node_limit, "presolve": True, "disp": False}
    if time_limit is not None:
        options["time_limit"] = time_limit
    res = milp(
        c=compiled.c,
        integrality=compiled.integrality,
        bounds=Bounds(compiled.lb, compiled.ub),
        constraints=constraints,
        options=options,
    )
    nodes = int(getattr(res, "mip_node_count", 0) or 0)
    rel_gap = getattr(res, "mip_gap", None)
    if res.status == 2:
        return MilpSolution(SolveStatus.INFEASIBLE, nodes=nodes)
    if res.status == 3:
        return MilpSolution(SolveStatus.UNBOUNDED, nodes=nodes)
    if res.x is None:
        return MilpSolution(SolveStatus.ITERATION_LIMIT, nodes=nodes)
    status = SolveStatus.OPTIMAL if res.status == 0 else SolveStatus.ITERATION_LIMIT
    return MilpSolution(
        status,
        objective=compiled.sign * float(res.fun) + compiled.offset,
        x=np.asarray(res.x, dtype=float),
        nodes=nodes,
        gap=None if rel_gap is None else float(rel_gap),
    )


def polish(model: LinearModel, solution: MilpSolution) -> MilpSolution:
    """Fix binaries at their rounded values and re-solve the LP.

    Continuous values then satisfy the rows to LP precision instead of the
    looser integrality tolerance.
    """
    if solution.x is None or not model.binaries:
        return solution
    compiled = model.compile()
    lb, ub = compiled.lb.copy(), compiled.ub.copy()
    idx = np.array(model.binaries)
    fixed = np.round(solution.x[idx])
    lb[idx] = ub[idx] = fixed
    lp = _lp_relaxation(compiled, lb, ub)
    if lp.status is not SolveStatus.OPTIMAL:
        return solution
    x = lp.x.copy()
    x[idx] = fixed
    return MilpSolution(
        solution.status,
        objective=compiled.sign * lp.z_min + compiled.offset,
        x=x,
        nodes=solution.nodes,
        lp_iterations=solution.lp_iterations + lp.iterations,
        gap=solution.gap,
    )


def solve_milp(
    model: LinearModel,
    gap: float = 1e-6,
    node_limit: int = 100_000,
    backend: str = "bnb",
    time_limit: Optional[float] = None,
) -> MilpSolution:
    """Solve ``model`` to a proven relative ``gap``.

    ``backend="bnb"`` is the deterministic in-house branch-and-bound,
    ``backend="highs"`` hands the whole problem to HiGHS.
    """
    if gap < 0:
        raise ModelError("gap must be non-negative")
    if not model.binaries:
        return solve_lp(model)
    compiled = model.compile()
    if backend == "bnb":
        solution = _branch_and_bound(model, compiled, gap, node_limit)
    elif backend == "highs":
        solution = _highs_milp(compiled, gap, node_limit, time_limit)
    else:
        raise ModelError(f"unknown MILP backend {backend!r}")
    return polish(model, solution)


# =============================================================================
# Polygon linearisation
# =============================================================================


def polygon_halfplanes(m: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """Edge normals (cos φ_j, sin φ_j) and the inradius factor cos(π/m).

    Vertices sit at angles 2πj/m, so vertex (r, 0) lies on the polygon.
    """
    if m < 3:
        raise ModelError(f"polygon needs at least 3 sides, got {m}")
    angles = (2 * np.arange(m) + 1) * math.pi / m
    return np.cos(angles), np.sin(angles), math.cos(math.pi / m)


def polygon_ball(p: ExprLike, q: ExprLike, radius: float, m: int = 6) -> List[ConstraintSpec]:
    """Inscribed regular m-gon approximating ``p² + q² ≤ radius²``."""
    cos_a, sin_a, inr = polygon_halfplanes(m)
    if not radius > 0:
        raise ModelError(f"polygon radius must be positive, got {radius}")
    p_expr, q_expr = LinExpr.of(p), LinExpr.of(q)
    return [
        ConstraintSpec(p_expr * float(ca) + q_expr * float(sa), Sense.LE, radius * inr)
        for ca, sa in zip(cos_a, sin_a)
    ]


def polygon_contains(p: float, q: float, radius: float, m: int = 6, tol: float = 1e-9) -> bool:
    cos_a, sin_a, inr = polygon_halfplanes(m)
    return bool(np.all(cos_a * p + sin_a * q <= radius * inr + tol))
