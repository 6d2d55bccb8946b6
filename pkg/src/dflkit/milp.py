"""Bounded-variable LP simplex and best-first branch-and-bound MILP.

The LP core is a dense bounded-variable simplex: variable bounds are handled
natively (nonbasic variables sit at a bound), so no upper-bound rows are
added.  A cold solve starts from the all-slack basis, shifts dual-infeasible
costs to zero, repairs primal feasibility with the dual simplex, then
finishes with the primal simplex on the true costs.  Branch-and-bound nodes
warm start from the parent's optimal basis and re-solve with the dual
simplex, which typically needs a handful of pivots per node.

Desk-scale exactness over speed: no cuts, no presolve, dense tableaus, and
fixed tie-breaks so identical inputs yield identical solutions.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

LE, EQ, GE = "<=", "==", ">="

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

PIVOT_TOL = 1e-9
RATIO_TOL = 1e-9
FEAS_TOL = 1e-7
INT_TOL = 1e-6

AT_LOWER, AT_UPPER, BASIC = 0, 1, 2


@dataclass
class LinearProgram:
    """min objective @ x subject to row-wise (coeffs, relation, rhs) and variable bounds."""

    objective: np.ndarray
    a: np.ndarray
    relations: list[str]
    rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.rhs = np.asarray(self.rhs, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = len(self.objective)
        if self.a.size == 0:
            self.a = self.a.reshape(0, n)
        m = self.a.shape[0]
        if self.a.shape[1] != n or len(self.rhs) != m or len(self.relations) != m:
            raise ValueError("inconsistent LP dimensions")
        if len(self.lower) != n or len(self.upper) != n:
            raise ValueError("bound arrays must match variable count")
        if not np.all(np.isfinite(self.a)) or not np.all(np.isfinite(self.objective)):
            raise ValueError("coefficients must be finite")
        if np.any(self.lower > self.upper + 1e-12):
            raise ValueError("lower bound exceeds upper bound")
        for r in self.relations:
            if r not in (LE, EQ, GE):
                raise ValueError(f"unknown relation {r!r}")

    @property
    def n_vars(self) -> int:
        return len(self.objective)


@dataclass
class MilpProblem:
    lp: LinearProgram
    integer_vars: list[int]

    def __post_init__(self):
        n = self.lp.n_vars
        for j in self.integer_vars:
            if not 0 <= j < n:
                raise ValueError(f"integer index {j} out of range")


@dataclass
class SolveResult:
    status: str
    value: float
    solution: np.ndarray | None
    nodes_explored: int = 0


def dump_lp(lp: LinearProgram) -> str:
    """Plain-text dump (objective, constraint rows, bounds) for failure triage."""
    lines = ["min " + " ".join(f"{c:+g}" for c in lp.objective)]
    for row, rel, b in zip(lp.a, lp.relations, lp.rhs):
        lines.append(" ".join(f"{v:+g}" for v in row) + f" {rel} {b:g}")
    lines.append("bounds " + " ".join(f"[{lo:g},{hi:g}]" for lo, hi in zip(lp.lower, lp.upper)))
    return "\n".join(lines)


class _EqForm:
    """Equality form A x = b with one +1 slack per row and native column bounds.

    Doubly-unbounded original variables are split into a difference of
    non-negative columns; every other variable maps to a single column whose
    bounds equal the original variable's bounds.  Relations live in the slack
    bounds: <= gives s in [0, inf), >= gives s in (-inf, 0], == pins s at 0.
    """

    def __init__(self, lp: LinearProgram):
        n = lp.n_vars
        m = lp.a.shape[0]
        col_of_var = np.empty(n, dtype=int)
        is_split = np.zeros(n, dtype=bool)
        cols, c, lo, hi = [], [], [], []
        for j in range(n):
            col_of_var[j] = len(cols)
            if not np.isfinite(lp.lower[j]) and not np.isfinite(lp.upper[j]):
                is_split[j] = True
                cols.append(lp.a[:, j])
                c.append(lp.objective[j])
                lo.append(0.0)
                hi.append(np.inf)
                cols.append(-lp.a[:, j])
                c.append(-lp.objective[j])
                lo.append(0.0)
                hi.append(np.inf)
            else:
                cols.append(lp.a[:, j])
                c.append(lp.objective[j])
                lo.append(lp.lower[j])
                hi.append(lp.upper[j])
        n_struct = len(cols)
        a_struct = np.column_stack(cols) if cols else np.zeros((m, 0))
        self.a = np.hstack([a_struct, np.eye(m)])
        self.c = np.array(c + [0.0] * m)
        lo = np.array(lo + [0.0] * m)
        hi = np.array(hi + [0.0] * m)
        for i, rel in enumerate(lp.relations):
            if rel == LE:
                hi[n_struct + i] = np.inf
            elif rel == GE:
                lo[n_struct + i] = -np.inf
        self.lower = lo
        self.upper = hi
        self.b = lp.rhs.astype(float).copy()
        self.m = m
        self.n = self.a.shape[1]
        self.n_struct = n_struct
        self.lp = lp
        self._plain_vars = np.flatnonzero(~is_split)
        self._plain_cols = col_of_var[self._plain_vars]
        self._col_of_var = col_of_var
        self._is_split = is_split

    def recover(self, x_ext: np.ndarray) -> np.ndarray:
        out = np.empty(self.lp.n_vars)
        out[self._plain_vars] = x_ext[self._plain_cols]
        for j in np.flatnonzero(self._is_split):
            k = self._col_of_var[j]
            out[j] = x_ext[k] - x_ext[k + 1]
        return out

    def node_bounds(self, lower: np.ndarray, upper: np.ndarray):
        """Extended bound arrays with the original variables' bounds overridden."""
        lo = self.lower.copy()
        hi = self.upper.copy()
        lo[self._plain_cols] = lower[self._plain_vars]
        hi[self._plain_cols] = upper[self._plain_vars]
        return lo, hi


class _Simplex:
    """Dense bounded-variable simplex over an equality form.

    State is (T, basis, status) with T = B^-1 A.  Basic values and reduced
    costs are rebuilt from the state at the start of every solve, so warm
    starts are just a state restore plus new bounds.
    """

    def __init__(self, eq: _EqForm):
        self.eq = eq
        self.T: np.ndarray | None = None
        self.basis: np.ndarray | None = None
        self.status: np.ndarray | None = None

    def snapshot(self):
        return self.T.copy(), self.basis.copy(), self.status.copy()

    def restore(self, snap) -> None:
        T, basis, status = snap
        self.T = T.copy()
        self.basis = basis.copy()
        self.status = status.copy()

    def cold_start(self, lo: np.ndarray, hi: np.ndarray) -> None:
        eq = self.eq
        self.T = eq.a.copy()
        self.basis = np.arange(eq.n_struct, eq.n)
        status = np.empty(eq.n, dtype=np.int8)
        for j in range(eq.n_struct):
            if np.isfinite(lo[j]):
                status[j] = AT_LOWER if (eq.c[j] >= 0 or not np.isfinite(hi[j])) else AT_UPPER
            else:
                status[j] = AT_UPPER
        status[eq.n_struct :] = BASIC
        self.status = status

    # -- state reconstruction ------------------------------------------------

    def _nonbasic_values(self, lo, hi):
        x = np.zeros(self.eq.n)
        at_lo = self.status == AT_LOWER
        at_hi = self.status == AT_UPPER
        x[at_lo] = lo[at_lo]
        x[at_hi] = hi[at_hi]
        return x

    def _rebuild(self, lo, hi):
        eq = self.eq
        x = self._nonbasic_values(lo, hi)
        nonbasic = self.status != BASIC
        beta = self.T[:, eq.n_struct :] @ eq.b - self.T[:, nonbasic] @ x[nonbasic]
        d = eq.c - self.T.T @ eq.c[self.basis]
        return beta, d

    # -- pivoting ------------------------------------------------------------

    def _eliminate(self, row: int, col: int) -> int:
        """Gauss step making column `col` the unit vector of `row`; returns the
        variable that left the basis."""
        T = self.T
        leaving = int(self.basis[row])
        T[row] = T[row] / T[row, col]
        factors = T[:, col].copy()
        factors[row] = 0.0
        T -= np.outer(factors, T[row])
        T[:, col] = 0.0
        T[row, col] = 1.0
        return leaving

    def _pivot(self, beta, d, row, col, step_vec, new_val, leave_status):
        """Apply the basis change: beta moved by step_vec, reduced costs by the
        standard rule d <- d - d[col] * (updated pivot row)."""
        beta -= step_vec
        dcol = d[col]
        leaving = self._eliminate(row, col)
        if abs(dcol) > 0:
            d -= dcol * self.T[row]
        d[col] = 0.0
        self.status[leaving] = leave_status
        self.status[col] = BASIC
        self.basis[row] = col
        beta[row] = new_val

    # -- phases ----------------------------------------------------------------

    def solve(self, lo: np.ndarray, hi: np.ndarray) -> tuple[str, np.ndarray | None]:
        """Optimize from the current basis; returns (status, extended solution)."""
        beta, d = self._rebuild(lo, hi)
        movable = (hi - lo) > RATIO_TOL

        # columns violating dual feasibility get their costs shifted to zero,
        # making the dual phase valid from any starting basis
        viol = ((self.status == AT_LOWER) & (d < -PIVOT_TOL) & movable) | (
            (self.status == AT_UPPER) & (d > PIVOT_TOL) & movable
        )
        shifted = bool(np.any(viol))
        if shifted:
            d = d.copy()
            d[viol] = 0.0

        st = self._dual(beta, d, lo, hi, movable)
        if st == INFEASIBLE:
            return INFEASIBLE, None
        if shifted:
            beta, d = self._rebuild(lo, hi)
        st = self._primal(beta, d, lo, hi, movable)
        if st == UNBOUNDED:
            return UNBOUNDED, None
        x = self._nonbasic_values(lo, hi)
        x[self.basis] = beta
        return OPTIMAL, x

    def _dual(self, beta, d, lo, hi, movable) -> str:
        m = self.eq.m
        if m == 0:
            return OPTIMAL
        bland_after = 50 * (m + self.eq.n) + 200
        for it in range(40 * bland_after):
            below = lo[self.basis] - beta
            above = beta - hi[self.basis]
            worst = np.maximum(below, above)
            if it < bland_after:
                row = int(np.argmax(worst))
                if worst[row] <= FEAS_TOL:
                    return OPTIMAL
            else:
                rows = np.flatnonzero(worst > FEAS_TOL)
                if len(rows) == 0:
                    return OPTIMAL
                row = int(rows[np.argmin(self.basis[rows])])
            need_up = below[row] > above[row]
            trow = self.T[row]
            if need_up:
                elig = movable & (
                    ((self.status == AT_LOWER) & (trow < -RATIO_TOL))
                    | ((self.status == AT_UPPER) & (trow > RATIO_TOL))
                )
                bound_val = lo[self.basis[row]]
                leave_status = AT_LOWER
            else:
                elig = movable & (
                    ((self.status == AT_LOWER) & (trow > RATIO_TOL))
                    | ((self.status == AT_UPPER) & (trow < -RATIO_TOL))
                )
                bound_val = hi[self.basis[row]]
                leave_status = AT_UPPER
            cand = np.flatnonzero(elig)
            if len(cand) == 0:
                return INFEASIBLE
            ratios = np.abs(d[cand]) / np.abs(trow[cand])
            if it < bland_after:
                pick = int(np.argmin(ratios))
            else:
                pick = int(np.flatnonzero(ratios <= ratios.min() + RATIO_TOL)[0])
            col = int(cand[pick])
            delta = (beta[row] - bound_val) / trow[col]
            x_col = lo[col] if self.status[col] == AT_LOWER else hi[col]
            self._pivot(beta, d, row, col, delta * self.T[:, col], x_col + delta, leave_status)
        raise RuntimeError("dual simplex iteration limit exceeded")

    def _primal(self, beta, d, lo, hi, movable) -> str:
        m, n = self.eq.m, self.eq.n
        bland_after = 50 * (m + n) + 200
        for it in range(40 * bland_after):
            can_up = (self.status == AT_LOWER) & (d < -PIVOT_TOL) & movable
            can_dn = (self.status == AT_UPPER) & (d > PIVOT_TOL) & movable
            viol = np.where(can_up | can_dn, np.abs(d), 0.0)
            if it < bland_after:
                col = int(np.argmax(viol))
                if viol[col] <= PIVOT_TOL:
                    return OPTIMAL
            else:
                cols = np.flatnonzero(viol > PIVOT_TOL)
                if len(cols) == 0:
                    return OPTIMAL
                col = int(cols[0])
            sigma = 1.0 if can_up[col] else -1.0
            w = sigma * self.T[:, col]
            limits = np.full(m, np.inf)
            up = w > RATIO_TOL
            dn = w < -RATIO_TOL
            limits[up] = (beta[up] - lo[self.basis[up]]) / w[up]
            limits[dn] = (beta[dn] - hi[self.basis[dn]]) / w[dn]
            t_row = limits.min() if m else np.inf
            t_span = hi[col] - lo[col]
            if not np.isfinite(t_row) and not np.isfinite(t_span):
                return UNBOUNDED
            if t_span < t_row - RATIO_TOL:
                # bound flip: no basis change
                beta -= w * t_span
                self.status[col] = AT_UPPER if sigma > 0 else AT_LOWER
                continue
            tied = np.flatnonzero(limits <= t_row + RATIO_TOL)
            row = int(tied[np.argmin(self.basis[tied])])
            t = max(float(t_row), 0.0)
            x_col = lo[col] if sigma > 0 else hi[col]
            leave_status = AT_LOWER if w[row] > 0 else AT_UPPER
            self._pivot(beta, d, row, col, w * t, x_col + sigma * t, leave_status)
        raise RuntimeError("primal simplex iteration limit exceeded")


def solve_lp(
    lp: LinearProgram,
    lower: np.ndarray | None = None,
    upper: np.ndarray | None = None,
) -> SolveResult:
    """Two-phase bounded simplex.  `lower`/`upper` optionally override the
    LP's variable bounds.  Never raises on well-formed input: infeasible and
    unbounded outcomes are reported through the status field."""
    lower = lp.lower if lower is None else np.asarray(lower, dtype=float)
    upper = lp.upper if upper is None else np.asarray(upper, dtype=float)
    if np.any(lower > upper + 1e-12):
        return SolveResult(INFEASIBLE, np.inf, None)
    eq = _EqForm(lp)
    lo, hi = eq.node_bounds(lower, upper)
    sx = _Simplex(eq)
    sx.cold_start(lo, hi)
    status, x_ext = sx.solve(lo, hi)
    if status == INFEASIBLE:
        return SolveResult(INFEASIBLE, np.inf, None)
    if status == UNBOUNDED:
        return SolveResult(UNBOUNDED, -np.inf, None)
    x = eq.recover(x_ext)
    return SolveResult(OPTIMAL, float(lp.objective @ x), x)


def _solution_key(x: np.ndarray) -> tuple:
    return tuple(np.round(x, 9))


def solve_milp(milp: MilpProblem) -> SolveResult:
    """Best-first branch and bound on warm-started LP relaxations.

    Branches on the most-fractional integer variable; node selection is by
    best lower bound with FIFO among ties.  A round-and-fix probe at
    fractional nodes supplies early incumbents so subtrees prune fast.  Among
    equal-value integer solutions encountered, the lexicographically
    smallest is kept; the exploration order is fully deterministic.
    """
    lp = milp.lp
    int_vars = np.array(sorted(set(milp.integer_vars)), dtype=int)
    lower = lp.lower.copy()
    upper = lp.upper.copy()
    if len(int_vars):
        if not np.all(np.isfinite(lower[int_vars])) or not np.all(np.isfinite(upper[int_vars])):
            raise ValueError("integer variables must have finite bounds")
        lower[int_vars] = np.ceil(lower[int_vars] - 1e-9)
        upper[int_vars] = np.floor(upper[int_vars] + 1e-9)

    eq = _EqForm(lp)
    sx = _Simplex(eq)
    keep_snapshots = eq.a.size <= 200_000

    nodes = 0
    counter = 0
    heap: list[tuple[float, int, np.ndarray, np.ndarray, object]] = []
    incumbent_val = np.inf
    incumbent_x: np.ndarray | None = None
    incumbent_key: tuple | None = None
    root_unbounded = False

    def offer(value: float, x: np.ndarray) -> None:
        nonlocal incumbent_val, incumbent_x, incumbent_key
        key = _solution_key(x)
        if value < incumbent_val - 1e-9 or (
            abs(value - incumbent_val) <= 1e-9 and (incumbent_key is None or key < incumbent_key)
        ):
            incumbent_val = value
            incumbent_x = x
            incumbent_key = key

    def run(lo_v: np.ndarray, hi_v: np.ndarray, snap) -> tuple[str, np.ndarray | None, float]:
        lo, hi = eq.node_bounds(lo_v, hi_v)
        if snap is None:
            sx.cold_start(lo, hi)
        else:
            sx.restore(snap)
        status, x_ext = sx.solve(lo, hi)
        if status != OPTIMAL:
            return status, None, np.inf
        x = eq.recover(x_ext)
        return OPTIMAL, x, float(lp.objective @ x)

    def probe(x: np.ndarray, lo_v: np.ndarray, hi_v: np.ndarray, snap) -> bool:
        """Pin integer vars to round(x) and re-optimize the continuous part."""
        flo, fhi = lo_v.copy(), hi_v.copy()
        fixed = np.round(x[int_vars])
        flo[int_vars] = fixed
        fhi[int_vars] = fixed
        status, fx, fval = run(flo, fhi, snap)
        if status == OPTIMAL:
            offer(fval, fx)
            return True
        return False

    heapq.heappush(heap, (-np.inf, counter, lower, upper, None))
    while heap:
        bound, _, lo_v, hi_v, snap = heapq.heappop(heap)
        if bound > incumbent_val - 1e-9:
            continue
        status, x, value = run(lo_v, hi_v, snap)
        nodes += 1
        if status == INFEASIBLE:
            continue
        if status == UNBOUNDED:
            root_unbounded = True
            break
        if value > incumbent_val - 1e-9:
            continue
        if len(int_vars):
            frac = np.abs(x[int_vars] - np.round(x[int_vars]))
            j_rel = int(np.argmin(np.abs(frac - 0.5)))
            worst = float(frac.max())
        else:
            worst = 0.0
        node_snap = sx.snapshot() if keep_snapshots else None
        if worst <= INT_TOL:
            if not len(int_vars) or not probe(x, lo_v, hi_v, node_snap):
                offer(value, x)
            continue
        probe(x, lo_v, hi_v, node_snap)  # rounding heuristic: early incumbent
        j = int(int_vars[j_rel])
        xv = x[j]
        left_hi = hi_v.copy()
        left_hi[j] = np.floor(xv)
        right_lo = lo_v.copy()
        right_lo[j] = np.ceil(xv)
        for nlo, nhi in ((lo_v, left_hi), (right_lo, hi_v)):
            if nlo[j] <= nhi[j] + 1e-12:
                counter += 1
                heapq.heappush(heap, (value, counter, nlo, nhi, node_snap))

    if root_unbounded:
        return SolveResult(UNBOUNDED, -np.inf, None, nodes)
    if incumbent_x is None:
        return SolveResult(INFEASIBLE, np.inf, None, nodes)
    out = incumbent_x.copy()
    if len(int_vars):
        out[int_vars] = np.round(out[int_vars])
    return SolveResult(OPTIMAL, float(incumbent_val), out, nodes)
