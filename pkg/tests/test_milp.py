import itertools

import numpy as np
import pytest

from dflkit.milp import (
    EQ,
    GE,
    INFEASIBLE,
    LE,
    OPTIMAL,
    UNBOUNDED,
    LinearProgram,
    MilpProblem,
    SolveResult,
    dump_lp,
    solve_lp,
    solve_milp,
)


def lp(obj, rows, lower, upper):
    a = np.array([r[0] for r in rows], dtype=float) if rows else np.zeros((0, len(obj)))
    rel = [r[1] for r in rows]
    rhs = np.array([r[2] for r in rows], dtype=float) if rows else np.zeros(0)
    return LinearProgram(np.array(obj, float), a, rel, rhs, np.array(lower, float), np.array(upper, float))


def enumerate_vertices(problem: LinearProgram):
    """Brute-force vertex oracle: intersect every n-subset of constraint
    hyperplanes (rows + active bounds) and keep the feasible points."""
    n = problem.n_vars
    planes = []
    for row, rel, b in zip(problem.a, problem.relations, problem.rhs):
        planes.append((row, b))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        if np.isfinite(problem.lower[j]):
            planes.append((e.copy(), problem.lower[j]))
        if np.isfinite(problem.upper[j]):
            planes.append((e.copy(), problem.upper[j]))
    best = np.inf
    found = False
    for combo in itertools.combinations(range(len(planes)), n):
        A = np.array([planes[i][0] for i in combo])
        b = np.array([planes[i][1] for i in combo])
        if abs(np.linalg.det(A)) < 1e-10:
            continue
        x = np.linalg.solve(A, b)
        if np.any(x < problem.lower - 1e-8) or np.any(x > problem.upper + 1e-8):
            continue
        ok = True
        for row, rel, rb in zip(problem.a, problem.relations, problem.rhs):
            v = row @ x
            if rel == LE and v > rb + 1e-8:
                ok = False
            elif rel == GE and v < rb - 1e-8:
                ok = False
            elif rel == EQ and abs(v - rb) > 1e-8:
                ok = False
        if ok:
            found = True
            best = min(best, problem.objective @ x)
    return best if found else None


def check_feasible(problem: LinearProgram, x, tol=1e-7):
    assert np.all(x >= problem.lower - tol)
    assert np.all(x <= problem.upper + tol)
    for row, rel, b in zip(problem.a, problem.relations, problem.rhs):
        v = row @ x
        if rel == LE:
            assert v <= b + tol
        elif rel == GE:
            assert v >= b - tol
        else:
            assert abs(v - b) <= tol


def test_lp_face_optimum_is_deterministic():
    problem = lp([-1, -1], [([1, 1], LE, 1.0)], [0, 0], [1, 1])
    res = solve_lp(problem)
    assert res.status == OPTIMAL
    assert res.value == pytest.approx(-1.0, abs=1e-9)
    assert tuple(np.round(res.solution, 9)) in {(0.0, 1.0), (1.0, 0.0)}
    again = solve_lp(problem)
    assert np.array_equal(res.solution, again.solution)


def test_lp_infeasible():
    problem = lp([1.0], [([1.0], GE, 2.0), ([1.0], LE, 1.0)], [0], [np.inf])
    assert solve_lp(problem).status == INFEASIBLE


def test_lp_unbounded():
    problem = lp([-1.0], [], [0.0], [np.inf])
    assert solve_lp(problem).status == UNBOUNDED


def test_lp_equality_and_shifted_bounds():
    # min x + y s.t. x - y == 3, y in [-10, 10], x >= 0: optimum x=0, y=-3
    problem = lp([1, 1], [([1, -1], EQ, 3.0)], [0, -10], [np.inf, 10])
    res = solve_lp(problem)
    assert res.status == OPTIMAL
    assert res.value == pytest.approx(-3.0, abs=1e-8)
    check_feasible(problem, res.solution)


def test_lp_matches_vertex_enumeration_on_random_instances():
    rng = np.random.default_rng(7)
    for trial in range(20):
        n = int(rng.integers(2, 7))
        m = int(rng.integers(1, 5))
        a = rng.normal(size=(m, n)).round(3)
        x0 = rng.uniform(0, 2, size=n)
        rows = []
        for i in range(m):
            rel = (LE, GE)[int(rng.integers(0, 2))]
            margin = rng.uniform(0.1, 1.0)
            b = a[i] @ x0 + (margin if rel == LE else -margin)
            rows.append((a[i], rel, round(b, 3)))
        obj = rng.normal(size=n).round(3)
        problem = lp(obj, rows, np.zeros(n), np.full(n, 3.0))
        res = solve_lp(problem)
        assert res.status == OPTIMAL, f"trial {trial}"
        oracle = enumerate_vertices(problem)
        assert oracle is not None
        assert res.value == pytest.approx(oracle, abs=1e-7), f"trial {trial}"
        check_feasible(problem, res.solution)


def test_milp_knapsack():
    # max 3a + 2b s.t. 2a + b <= 2, binary  ->  value 3 at (1, 0)
    problem = MilpProblem(
        lp([-3, -2], [([2, 1], LE, 2.0)], [0, 0], [1, 1]),
        integer_vars=[0, 1],
    )
    res = solve_milp(problem)
    assert res.status == OPTIMAL
    assert res.value == pytest.approx(-3.0, abs=1e-9)
    assert np.allclose(res.solution, [1, 0])


def test_milp_integral_relaxation_explores_single_node():
    # identity covering rows are integral at the LP optimum already
    problem = MilpProblem(
        lp([1, 1], [([1, 0], GE, 1.0), ([0, 1], GE, 2.0)], [0, 0], [3, 3]),
        integer_vars=[0, 1],
    )
    res = solve_milp(problem)
    assert res.status == OPTIMAL
    assert res.value == pytest.approx(3.0, abs=1e-9)
    assert res.nodes_explored == 1


def test_milp_requires_finite_integer_bounds():
    problem = MilpProblem(lp([1.0], [], [0.0], [np.inf]), integer_vars=[0])
    with pytest.raises(ValueError):
        solve_milp(problem)


def milp_enumeration_oracle(problem: MilpProblem):
    """Exhaustive enumeration over the integer grid (pure-integer instances)."""
    problem_lp = problem.lp
    n = problem_lp.n_vars
    grids = [range(int(problem_lp.lower[j]), int(problem_lp.upper[j]) + 1) for j in range(n)]
    best = np.inf
    best_x = None
    for point in itertools.product(*grids):
        x = np.array(point, dtype=float)
        ok = True
        for row, rel, b in zip(problem_lp.a, problem_lp.relations, problem_lp.rhs):
            v = row @ x
            if rel == LE and v > b + 1e-9:
                ok = False
            elif rel == GE and v < b - 1e-9:
                ok = False
            elif rel == EQ and abs(v - b) > 1e-9:
                ok = False
        if not ok:
            continue
        val = problem_lp.objective @ x
        if val < best - 1e-12 or (abs(val - best) <= 1e-12 and tuple(point) < tuple(best_x)):
            best = val
            best_x = point
    return best, best_x


def test_milp_matches_enumeration_on_random_instances():
    rng = np.random.default_rng(11)
    solved = 0
    for trial in range(50):
        n = int(rng.integers(2, 6))
        m = int(rng.integers(1, 4))
        a = rng.integers(-3, 4, size=(m, n)).astype(float)
        x0 = rng.integers(0, 4, size=n)
        rows = []
        for i in range(m):
            rel = (LE, GE)[int(rng.integers(0, 2))]
            b = a[i] @ x0 + (1.0 if rel == LE else -1.0)
            rows.append((a[i], rel, b))
        obj = rng.normal(size=n).round(2)
        problem = MilpProblem(
            lp(obj, rows, np.zeros(n), np.full(n, 3.0)), integer_vars=list(range(n))
        )
        res = solve_milp(problem)
        oracle_val, _ = milp_enumeration_oracle(problem)
        assert res.status == OPTIMAL
        assert res.value == pytest.approx(oracle_val, abs=1e-6), f"trial {trial}"
        solved += 1
    assert solved == 50


def test_milp_tie_break_is_deterministic():
    # (0, 2) and (2, 0) are both optimal; the solver must pick one of them,
    # always the same one, and prefer the lexicographically smaller among
    # solutions it encounters
    problem = MilpProblem(
        lp([1, 1], [([1, 1], GE, 2.0)], [0, 0], [2, 2]),
        integer_vars=[0, 1],
    )
    res = solve_milp(problem)
    assert res.value == pytest.approx(2.0, abs=1e-9)
    key = tuple(np.round(res.solution, 6))
    assert key in {(0.0, 2.0), (2.0, 0.0), (1.0, 1.0)}
    for _ in range(3):
        again = solve_milp(problem)
        assert np.array_equal(np.round(again.solution, 9), np.round(res.solution, 9))


def test_root_relaxation_weak_duality():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(2, 5))
        a = rng.integers(-2, 3, size=(2, n)).astype(float)
        x0 = rng.integers(0, 3, size=n)
        rows = [
            (a[0], LE, float(a[0] @ x0 + 1)),
            (a[1], GE, float(a[1] @ x0 - 1)),
        ]
        obj = rng.normal(size=n).round(2)
        problem = MilpProblem(lp(obj, rows, np.zeros(n), np.full(n, 3.0)), list(range(n)))
        root = solve_lp(problem.lp)
        res = solve_milp(problem)
        if res.status == OPTIMAL and root.status == OPTIMAL:
            assert root.value <= res.value + 1e-7


def test_milp_determinism():
    rng = np.random.default_rng(5)
    a = rng.integers(-2, 3, size=(3, 4)).astype(float)
    rows = [(a[i], LE, float(abs(a[i]).sum()) + 1.0) for i in range(3)]
    problem = MilpProblem(lp(rng.normal(size=4).round(2), rows, np.zeros(4), np.full(4, 3.0)), [0, 1, 2, 3])
    first = solve_milp(problem)
    second = solve_milp(problem)
    assert first.value == second.value
    assert np.array_equal(first.solution, second.solution)


def test_dump_lp_mentions_all_rows():
    problem = lp([1, 2], [([1, 0], LE, 5.0), ([0, 1], GE, 1.0)], [0, 0], [5, 5])
    text = dump_lp(problem)
    assert "min" in text and "<=" in text and ">=" in text and "bounds" in text
