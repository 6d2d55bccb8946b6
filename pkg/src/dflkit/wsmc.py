"""Two-stage weighted-set multi-cover with refundable single-item sets.

First n sets cover exactly one item each and can be refunded at 0.8x cost when
coverage exceeds demand; unmet demand pays a penalty of 5x the costliest
covering set.  The second stage has a closed form; proxy solves go through the
exact MILP solver.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    INTEGRALITY_TOL,
    ContextDataset,
    DecisionVector,
    GenerationError,
    ProblemHandle,
    substream,
)
from . import milp


@dataclass
class WsmcInstance:
    """Incidence structure, costs, and recourse prices of one WSMC instance."""

    n_items: int
    m_sets: int
    a: np.ndarray
    cost: np.ndarray
    c_plus: np.ndarray
    c_minus: np.ndarray
    x_upper: int
    seed: int = 0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=float)
        self.cost = np.asarray(self.cost, dtype=float)
        self.c_plus = np.asarray(self.c_plus, dtype=float)
        self.c_minus = np.asarray(self.c_minus, dtype=float)
        n, m = self.n_items, self.m_sets
        if self.a.shape != (n, m):
            raise ValueError("incidence matrix shape mismatch")
        if not np.array_equal(self.a[:, :n], np.eye(n)):
            raise ValueError("first n sets must be the single-item sets")
        single = self.cost[:n]
        if not (np.all(self.c_plus > single) and np.all(single > self.c_minus) and np.all(self.c_minus > 0)):
            raise ValueError("need c_plus > c > c_minus > 0 on single-item sets")

    def to_json(self) -> str:
        return json.dumps(
            {
                "n": self.n_items,
                "m": self.m_sets,
                "A": self.a.astype(int).ravel().tolist(),
                "c": self.cost.tolist(),
                "c_plus": self.c_plus.tolist(),
                "c_minus": self.c_minus.tolist(),
                "x_upper": self.x_upper,
                "seed": self.seed,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "WsmcInstance":
        d = json.loads(text)
        return cls(
            n_items=d["n"],
            m_sets=d["m"],
            a=np.array(d["A"], dtype=float).reshape(d["n"], d["m"]),
            cost=np.array(d["c"], dtype=float),
            c_plus=np.array(d["c_plus"], dtype=float),
            c_minus=np.array(d["c_minus"], dtype=float),
            x_upper=d["x_upper"],
            seed=d.get("seed", 0),
        )


def example_instance() -> WsmcInstance:
    """The 2-item, 3-set instance exhibiting decision dominance."""
    return WsmcInstance(
        n_items=2,
        m_sets=3,
        a=np.array([[1, 0, 1], [0, 1, 1]], dtype=float),
        cost=np.array([4.0, 4.0, 7.0]),
        c_plus=np.array([7.0, 7.0]),
        c_minus=np.array([3.0, 3.0]),
        x_upper=2,
    )


def second_stage_value(instance: WsmcInstance, x: np.ndarray, zeta: np.ndarray) -> float:
    """Optimal recourse cost in closed form.

    Coverage a = Ax; shortfall buys penalty units, excess refunds single-item
    sets up to the x_i that were bought.  This is the covering relaxation of
    the equality recourse, which keeps the stage feasible for every x.
    """
    x = np.asarray(x, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    cover = instance.a @ x
    short = np.maximum(zeta - cover, 0.0)
    refund = np.minimum(np.maximum(cover - zeta, 0.0), x[: instance.n_items])
    return float(instance.c_plus @ short - instance.c_minus @ refund)


def expected_objective(instance: WsmcInstance, x: np.ndarray, scenarios: Sequence[np.ndarray]) -> float:
    """First-stage cost plus the scenario-average recourse value."""
    if len(scenarios) == 0:
        raise ValueError("need at least one scenario")
    x = np.asarray(x, dtype=float)
    rec = np.mean([second_stage_value(instance, x, z) for z in scenarios])
    return float(instance.cost @ x + rec)


@dataclass
class WsmcProblem(ProblemHandle):
    instance: WsmcInstance
    p: int = 5

    problem_id = "wsmc"

    def dims(self) -> tuple[int, int, int]:
        return self.p, self.instance.n_items, self.instance.m_sets

    def is_feasible(self, x: DecisionVector) -> bool:
        v = x.values
        if v.shape != (self.instance.m_sets,):
            return False
        if np.any(np.abs(v - np.round(v)) > INTEGRALITY_TOL):
            return False
        r = np.round(v)
        return bool(r.min() >= 0 and r.max() <= self.instance.x_upper)

    def objective(self, c: np.ndarray, x: DecisionVector) -> float:
        c = np.asarray(c, dtype=float)
        if c.shape != (self.instance.n_items,):
            raise ValueError(
                f"demand vector has shape {c.shape}, expected ({self.instance.n_items},)"
            )
        self.check_decision(x)
        v = np.round(x.values)
        return float(self.instance.cost @ v + second_stage_value(self.instance, v, c))

    def solve_deterministic(self, c_hat: np.ndarray) -> DecisionVector:
        return self.solve_scenarios([np.asarray(c_hat, dtype=float)])

    def solve_scenarios(self, scenarios: Sequence[np.ndarray]) -> DecisionVector:
        """Sample-average MILP: integer set counts plus per-scenario recourse."""
        inst = self.instance
        n, m = inst.n_items, inst.m_sets
        scen = np.atleast_2d(np.asarray(scenarios, dtype=float))
        s = len(scen)
        n_vars = m + 2 * n * s

        obj = np.zeros(n_vars)
        obj[:m] = inst.cost
        lower = np.zeros(n_vars)
        upper = np.full(n_vars, np.inf)
        upper[:m] = inst.x_upper

        rows, rels, rhs = [], [], []
        for si in range(s):
            off_p = m + 2 * n * si
            off_m = off_p + n
            obj[off_p : off_p + n] = inst.c_plus / s
            obj[off_m : off_m + n] = -inst.c_minus / s
            upper[off_m : off_m + n] = inst.x_upper
            for i in range(n):
                row = np.zeros(n_vars)
                row[:m] = inst.a[i]
                row[off_p + i] = 1.0
                row[off_m + i] = -1.0
                rows.append(row)
                rels.append(milp.GE)
                rhs.append(scen[si, i])
                cap = np.zeros(n_vars)
                cap[off_m + i] = 1.0
                cap[i] = -1.0
                rows.append(cap)
                rels.append(milp.LE)
                rhs.append(0.0)

        problem = milp.MilpProblem(
            milp.LinearProgram(obj, np.array(rows), rels, np.array(rhs), lower, upper),
            integer_vars=list(range(m)),
        )
        res = milp.solve_milp(problem)
        if res.status != milp.OPTIMAL:
            raise RuntimeError(
                f"scenario MILP came back {res.status}\n{milp.dump_lp(problem.lp)}"
            )
        return DecisionVector(np.round(res.solution[:m]), self.problem_id)

    def solve_quadratic(self, xi: np.ndarray) -> DecisionVector:
        xi = np.asarray(xi, dtype=float)
        # nearest integer in [0, x_upper]; exact .5 ties round down
        x = np.clip(np.ceil(xi - 0.5), 0, self.instance.x_upper)
        return DecisionVector(x, self.problem_id)


def _min_partition_costs(masks: list[int], costs: list[float], full: int) -> np.ndarray:
    """dp[s] = cheapest exact cover of item mask s by disjoint existing coverages."""
    dp = np.full(full, np.inf)
    dp[0] = 0.0
    for s in range(1, full):
        low = s & (-s)
        for mask, cost in zip(masks, costs):
            if mask & s == mask and mask & low:
                cand = dp[s ^ mask] + cost
                if cand < dp[s]:
                    dp[s] = cand
    return dp


def generate_instance(
    n_items: int,
    m_sets: int,
    seed: int,
    x_upper: int = 10,
    cost_low: int = 2,
    cost_high: int = 10,
    max_retries: int = 500,
) -> WsmcInstance:
    """Random non-dominated instance.

    Single-item sets get uniform integer costs; each multi-item set's cost is
    pinned between the costliest proper subset (+1) and the cheapest partition
    into existing coverages (-1), which makes every set worth considering.
    """
    if m_sets <= n_items:
        raise ValueError("need more sets than items")
    if 2 ** n_items < m_sets:
        raise ValueError("not enough distinct coverages for unique sets")
    rng = substream(seed, "wsmc-instance")
    full = 1 << n_items

    single = rng.integers(cost_low, cost_high + 1, size=n_items).astype(float)
    masks = [1 << i for i in range(n_items)]
    costs = list(single)

    # unused multi-item coverages, by size, in a deterministic base order
    pools: dict[int, list[int]] = {s: [] for s in range(2, n_items + 1)}
    for mask in range(1, full):
        s = bin(mask).count("1")
        if s >= 2:
            pools[s].append(mask)

    def draw(size: int, allow_other_sizes: bool) -> int | None:
        order = [size]
        if allow_other_sizes:
            order += list(range(size + 1, n_items + 1)) + list(range(size - 1, 1, -1))
        for s in order:
            if pools[s]:
                return pools[s].pop(int(rng.integers(0, len(pools[s]))))
        return None

    chosen = []
    for _ in range(m_sets - n_items):
        mask = draw(int(rng.integers(2, n_items + 1)), allow_other_sizes=True)
        if mask is None:
            raise GenerationError("coverage pool exhausted")
        chosen.append(mask)
    # costs are assigned in ascending coverage size so every proper subset of a
    # set is priced before the set itself, which is what makes the window argument work
    chosen.sort(key=lambda mk: (bin(mk).count("1"), mk))

    for mask in chosen:
        for _ in range(max_retries):
            subset_costs = [c for mk, c in zip(masks, costs) if mk & mask == mk and mk != mask]
            lb = max(subset_costs) + 1
            dp = _min_partition_costs(masks, costs, full)
            ub = dp[mask] - 1
            if lb <= ub:
                masks.append(mask)
                costs.append(float(int(lb + ub) // 2))
                break
            # resample at the same size only: pricing must stay size-ascending
            fresh = draw(bin(mask).count("1"), allow_other_sizes=False)
            if fresh is None:
                raise GenerationError("cost window stayed empty and pool ran out")
            mask = fresh
        else:
            raise GenerationError("cost window stayed empty after retries")

    a = np.zeros((n_items, m_sets))
    for j, mask in enumerate(masks):
        for i in range(n_items):
            if mask & (1 << i):
                a[i, j] = 1.0
    cost = np.array(costs)
    c_plus = 5.0 * np.max(a * cost[None, :], axis=1)
    c_minus = 0.8 * cost[:n_items]
    return WsmcInstance(n_items, m_sets, a, cost, c_plus, c_minus, x_upper, seed)


def audit_non_dominated(instance: WsmcInstance) -> bool:
    """Exhaustive pairwise check: no set is at least as expensive as a superset."""
    n, m = instance.n_items, instance.m_sets
    masks = [
        int(sum(1 << i for i in range(n) if instance.a[i, j] > 0.5)) for j in range(m)
    ]
    for j in range(m):
        for j2 in range(m):
            if j == j2:
                continue
            if masks[j] & masks[j2] == masks[j] and instance.cost[j] >= instance.cost[j2]:
                return False
    return True


def generate_demands(
    instance: WsmcInstance,
    p: int,
    sizes: tuple[int, int, int],
    seed: int,
    zeta_scale: float = 5.0,
    zeta_max: int = 10,
    poly_degree: int = 5,
    noise_width: float = 0.5,
) -> ContextDataset:
    """Polynomial demand generator: degree-5 feature lift with multiplicative noise."""
    rng = substream(seed, "wsmc-data")
    n = instance.n_items
    total = sum(sizes)
    z = rng.standard_normal((total, p))
    mask = (rng.random((n, p)) < 0.5).astype(float)
    base = (z @ mask.T / np.sqrt(p) + 3.0) ** poly_degree / 3.0 ** poly_degree
    eps = rng.uniform(1.0 - noise_width, 1.0 + noise_width, size=(total, n))
    zeta = np.floor(np.clip(base * zeta_scale * eps, 0, zeta_max) + 0.5)
    splits = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    return ContextDataset(z, zeta, splits, seed)
