"""Two-stage probabilistic traveling salesperson with cancellable direct trips.

A first-stage tour plus a set of booked direct trips; after service requests
realize, unneeded direct trips are cancelled for a full refund and unserved
requests pay a back-and-forth penalty of rho times the depot round trip.
All solves are exact at desk scale via an all-subsets Held-Karp dynamic
program (the recourse is separable and linear in the realization).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    CapacityError,
    ContextDataset,
    DecisionVector,
    FeasibilityError,
    ProblemHandle,
    substream,
)

MAX_CUSTOMERS = 14


@dataclass
class PtspInstance:
    """Customer coordinates (depot = node 0 at the origin) and penalty multiplier."""

    k: int
    coords: np.ndarray
    rho: float = 5.0

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=float)
        if self.coords.shape != (self.k + 1, 2):
            raise ValueError("coords must be (k+1, 2) with the depot first")
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        self.d = np.sqrt((diff ** 2).sum(axis=2))

    def to_json(self) -> str:
        return json.dumps({"k": self.k, "rho": self.rho, "coords": self.coords.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "PtspInstance":
        payload = json.loads(text)
        return cls(k=payload["k"], coords=np.array(payload["coords"]), rho=payload["rho"])


@dataclass(frozen=True)
class TourDecision:
    """Ordered tour (depot implicit at both ends) plus a disjoint direct-trip set."""

    tour: tuple[int, ...]
    direct: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if set(self.tour) & self.direct:
            raise ValueError("direct trips must be disjoint from the tour")

    def visited(self) -> frozenset[int]:
        return frozenset(self.tour) | self.direct

    def to_json(self) -> str:
        return json.dumps({"tour": list(self.tour), "direct": sorted(self.direct)})

    @classmethod
    def from_json(cls, text: str) -> "TourDecision":
        payload = json.loads(text)
        return cls(tuple(payload["tour"]), frozenset(payload["direct"]))


def arc_index(k: int) -> dict[tuple[int, int], int]:
    """Flat index of every ordered node pair (i, j), i != j, nodes 0..k."""
    idx = {}
    for i in range(k + 1):
        for j in range(k + 1):
            if i != j:
                idx[(i, j)] = len(idx)
    return idx


def encode_decision(instance: PtspInstance, decision: TourDecision) -> np.ndarray:
    """Flat binary encoding: arc indicators then k direct flags."""
    k = instance.k
    idx = arc_index(k)
    x = np.zeros(len(idx) + k)
    if decision.tour:
        path = (0,) + decision.tour + (0,)
        for a, b in zip(path[:-1], path[1:]):
            x[idx[(a, b)]] = 1.0
    for i in decision.direct:
        x[len(idx) + i - 1] = 1.0
    return x


def decode_decision(instance: PtspInstance, values: np.ndarray) -> TourDecision:
    """Inverse of encode_decision; validates the arc structure."""
    k = instance.k
    idx = arc_index(k)
    n_arcs = len(idx)
    values = np.asarray(values, dtype=float)
    if values.shape != (n_arcs + k,):
        raise FeasibilityError(f"encoding must have length {n_arcs + k}")
    if np.any(np.abs(values - np.round(values)) > 1e-9):
        raise FeasibilityError("encoding entries must be binary")
    bits = np.round(values).astype(int)
    succ = {}
    for (i, j), pos in idx.items():
        if bits[pos]:
            if i in succ:
                raise FeasibilityError(f"node {i} has two outgoing arcs")
            succ[i] = j
    direct = frozenset(i + 1 for i in range(k) if bits[n_arcs + i])
    if not succ:
        dec = TourDecision((), direct)
    else:
        if 0 not in succ:
            raise FeasibilityError("tour arcs must include the depot")
        tour = []
        node = succ[0]
        while node != 0:
            tour.append(node)
            if node not in succ:
                raise FeasibilityError("tour does not return to the depot")
            node = succ[node]
            if len(tour) > k:
                raise FeasibilityError("tour revisits a node")
        if len(succ) != len(tour) + 1:
            raise FeasibilityError("arcs contain a subtour")
        dec = TourDecision(tuple(tour), direct)
    if set(dec.tour) & dec.direct:
        raise FeasibilityError("visited customers cannot also have direct trips")
    return dec


@dataclass
class HeldKarpResult:
    """Per-subset optimal closed-tour costs with order reconstruction."""

    k: int
    cycle_cost: np.ndarray
    _dp: np.ndarray
    _parent: np.ndarray
    _last: np.ndarray

    def tour(self, mask: int) -> tuple[int, ...]:
        """One optimal visiting order for the customer subset `mask`."""
        if mask == 0:
            return ()
        order = []
        last = int(self._last[mask])
        m = mask
        while last >= 0:
            order.append(last + 1)
            nxt = int(self._parent[m, last])
            m ^= 1 << last
            last = nxt
        return tuple(reversed(order))


def held_karp_all_subsets(weights: np.ndarray) -> HeldKarpResult:
    """Cheapest depot-rooted cycle through every customer subset.

    `weights` is a full (k+1)x(k+1) arc-weight matrix (asymmetric and negative
    entries allowed).  Memory and time grow as 2^k * k^2.
    """
    weights = np.asarray(weights, dtype=float)
    k = weights.shape[0] - 1
    if weights.shape != (k + 1, k + 1):
        raise ValueError("weights must be square")
    if k > MAX_CUSTOMERS:
        raise CapacityError(f"k={k} exceeds the 2^k dynamic-program budget")
    full = 1 << k
    dp = np.full((full, k), np.inf)
    parent = np.full((full, k), -1, dtype=np.int16)
    for i in range(k):
        dp[1 << i, i] = weights[0, i + 1]
    members: list[np.ndarray] = [None] * full
    for mask in range(1, full):
        members[mask] = np.flatnonzero([(mask >> j) & 1 for j in range(k)])
    w_inner = weights[1:, 1:]
    for mask in range(1, full):
        ins = members[mask]
        row = dp[mask, ins]
        if not np.isfinite(row).any():
            continue
        outs = np.flatnonzero([((mask >> j) & 1) == 0 for j in range(k)])
        if len(outs) == 0:
            continue
        cand = row[:, None] + w_inner[np.ix_(ins, outs)]
        best = np.argmin(cand, axis=0)
        vals = cand[best, np.arange(len(outs))]
        for t, j in enumerate(outs):
            nm = mask | (1 << j)
            dp[nm, j] = vals[t]
            parent[nm, j] = ins[best[t]]
    back = weights[1:, 0]
    cycle = np.full(full, 0.0)
    last = np.full(full, -1, dtype=np.int16)
    for mask in range(1, full):
        ins = members[mask]
        totals = dp[mask, ins] + back[ins]
        b = int(np.argmin(totals))
        cycle[mask] = totals[b]
        last[mask] = ins[b]
    return HeldKarpResult(k, cycle, dp, parent, last)


_SCAN_ORDER_CACHE: dict[int, list[int]] = {}


def _scan_order(k: int) -> list[int]:
    """Masks ordered so preferred candidates come first under cost ties:
    more toured customers first, then lexicographically smaller subsets."""
    if k not in _SCAN_ORDER_CACHE:
        def key(mask):
            subset = tuple(j + 1 for j in range(k) if mask >> j & 1)
            return (-len(subset), subset)

        _SCAN_ORDER_CACHE[k] = sorted(range(1 << k), key=key)
    return _SCAN_ORDER_CACHE[k]


def tour_length(instance: PtspInstance, tour: Sequence[int]) -> float:
    if not tour:
        return 0.0
    path = [0, *tour, 0]
    return float(sum(instance.d[a, b] for a, b in zip(path[:-1], path[1:])))


def first_stage_cost(instance: PtspInstance, decision: TourDecision) -> float:
    direct = sum(2.0 * instance.d[0, i] for i in decision.direct)
    return tour_length(instance, decision.tour) + direct


def second_stage_value(instance: PtspInstance, decision: TourDecision, zeta: np.ndarray) -> float:
    """Penalties for unserved requests minus refunds for cancelled direct trips."""
    zeta = np.asarray(zeta, dtype=float)
    visited = decision.visited()
    val = 0.0
    for i in range(1, instance.k + 1):
        if zeta[i - 1] > 0.5 and i not in visited:
            val += 2.0 * instance.d[0, i] * instance.rho
        if zeta[i - 1] <= 0.5 and i in decision.direct:
            val -= 2.0 * instance.d[0, i]
    return val


def objective_value(instance: PtspInstance, decision: TourDecision, zeta: np.ndarray) -> float:
    return first_stage_cost(instance, decision) + second_stage_value(instance, decision, zeta)


def expected_objective(instance: PtspInstance, decision: TourDecision, p_hat: np.ndarray) -> float:
    """Expected total cost under independent service probabilities p_hat."""
    p_hat = np.asarray(p_hat, dtype=float)
    val = tour_length(instance, decision.tour)
    for i in range(1, instance.k + 1):
        d0 = instance.d[0, i]
        if i in decision.direct:
            val += 2.0 * d0 * p_hat[i - 1]
        elif i not in decision.tour:
            val += 2.0 * d0 * instance.rho * p_hat[i - 1]
    return float(val)


def _best_decision(instance: PtspInstance, cycle_cost: np.ndarray, off_tour_term, direct_rule):
    """Scan all tour subsets; off_tour_term(i) prices customer i when not toured."""
    k = instance.k
    terms = np.array([off_tour_term(i) for i in range(1, k + 1)])
    total_terms = terms.sum()
    masked = np.zeros(1 << k)
    for mask in range(1, 1 << k):
        low = mask & (-mask)
        masked[mask] = masked[mask ^ low] + terms[low.bit_length() - 1]
    best_mask = None
    best_cost = np.inf
    for mask in _scan_order(k):
        cost = cycle_cost[mask] + total_terms - masked[mask]
        if cost < best_cost - 1e-9:
            best_cost = cost
            best_mask = mask
    direct = frozenset(
        i for i in range(1, k + 1) if not (best_mask >> (i - 1)) & 1 and direct_rule(i)
    )
    return best_mask, best_cost, direct


@dataclass
class PtspProblem(ProblemHandle):
    instance: PtspInstance
    p: int = 5

    problem_id = "ptsp"

    def __post_init__(self):
        self._hk_cache: HeldKarpResult | None = None

    def _hk(self) -> HeldKarpResult:
        if self._hk_cache is None:
            self._hk_cache = held_karp_all_subsets(self.instance.d)
        return self._hk_cache

    def dims(self) -> tuple[int, int, int]:
        k = self.instance.k
        return self.p, k, (k + 1) * k + k

    def is_feasible(self, x: DecisionVector) -> bool:
        try:
            decode_decision(self.instance, x.values)
        except FeasibilityError:
            return False
        return True

    def objective(self, c: np.ndarray, x: DecisionVector) -> float:
        c = np.asarray(c, dtype=float)
        if c.shape != (self.instance.k,):
            raise ValueError(f"realization has shape {c.shape}, expected ({self.instance.k},)")
        decision = decode_decision(self.instance, x.values)
        return objective_value(self.instance, decision, c)

    def solve_deterministic(self, c_hat: np.ndarray) -> DecisionVector:
        return self.solve_scenarios([np.asarray(c_hat, dtype=float)])

    def solve_scenarios(self, scenarios: Sequence[np.ndarray]) -> DecisionVector:
        decision = self.solve_scenarios_decision(scenarios)
        return DecisionVector(encode_decision(self.instance, decision), self.problem_id)

    def solve_scenarios_decision(self, scenarios: Sequence[np.ndarray]) -> TourDecision:
        """Exact sample-average solve.

        The recourse is linear in the realization, so only the scenario mean
        p_hat matters: a customer off the tour costs 2*d0*p_hat booked direct
        (refund absorbs the rest) versus 2*d0*rho*p_hat skipped, and rho > 1
        makes direct the strict winner whenever p_hat > 0.
        """
        inst = self.instance
        scen = np.atleast_2d(np.asarray(scenarios, dtype=float))
        p_hat = scen.mean(axis=0)
        hk = self._hk()

        def off_term(i):
            ph = p_hat[i - 1]
            return 2.0 * inst.d[0, i] * min(ph, inst.rho * ph)

        def direct_rule(i):
            return p_hat[i - 1] > 0

        mask, _, direct = _best_decision(inst, hk.cycle_cost, off_term, direct_rule)
        return TourDecision(hk.tour(mask), direct)

    def solve_quadratic(self, xi: np.ndarray) -> DecisionVector:
        decision = self.solve_quadratic_decision(xi)
        return DecisionVector(encode_decision(self.instance, decision), self.problem_id)

    def solve_quadratic_decision(self, xi: np.ndarray) -> TourDecision:
        """Projection onto feasible binary structures.

        Minimizing ||xi - x||^2 over binary encodings equals minimizing
        sum (1 - 2 xi_e) x_e, so Held-Karp runs on transformed arc weights and
        a direct flag is worth taking iff its coordinate exceeds one half.
        """
        inst = self.instance
        k = inst.k
        idx = arc_index(k)
        n_arcs = len(idx)
        xi = np.asarray(xi, dtype=float)
        if xi.shape != (n_arcs + k,):
            raise ValueError(f"projection input must have length {n_arcs + k}")
        w = np.zeros((k + 1, k + 1))
        for (i, j), pos in idx.items():
            w[i, j] = 1.0 - 2.0 * xi[pos]
        hk = held_karp_all_subsets(w)

        flags = 1.0 - 2.0 * xi[n_arcs:]

        def off_term(i):
            return min(0.0, flags[i - 1])

        def direct_rule(i):
            return flags[i - 1] < 0.0

        mask, _, direct = _best_decision(inst, hk.cycle_cost, off_term, direct_rule)
        return TourDecision(hk.tour(mask), direct)


def generate_instance(k: int, seed: int, radius: float = 10.0, jitter: float = 5.0) -> PtspInstance:
    """Customers equally spaced on a circle, perturbed by N(0, jitter); depot at the origin."""
    if k < 2:
        raise ValueError("need at least two customers")
    rng = substream(seed, "ptsp-instance")
    angles = 2.0 * np.pi * np.arange(k) / k
    pts = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    pts += rng.normal(scale=jitter, size=(k, 2))
    coords = np.vstack([[0.0, 0.0], pts])
    return PtspInstance(k=k, coords=coords)


def generate_service(
    instance: PtspInstance,
    p: int,
    sizes: tuple[int, int, int],
    seed: int,
    poly_degree: int = 5,
    noise_width: float = 0.5,
    bernoulli_fraction: float = 0.5,
) -> ContextDataset:
    """Binary service requests from the polynomial recipe squashed to [0, 1].

    A seeded mask replaces `bernoulli_fraction` of the coordinates with
    Bernoulli(q) draws; the rest are rounded q values.
    """
    rng = substream(seed, "ptsp-data")
    k = instance.k
    total = sum(sizes)
    z = rng.standard_normal((total, p))
    mask = (rng.random((k, p)) < 0.5).astype(float)
    q = (z @ mask.T / np.sqrt(p) + 3.0) ** poly_degree / 3.0 ** poly_degree
    q *= rng.uniform(1.0 - noise_width, 1.0 + noise_width, size=(total, k))
    q = np.clip(q, 0.0, 1.0)
    use_bernoulli = rng.random((total, k)) < bernoulli_fraction
    draws = (rng.random((total, k)) < q).astype(float)
    rounded = (q >= 0.5).astype(float)
    zeta = np.where(use_bernoulli, draws, rounded)
    splits = ["train"] * sizes[0] + ["val"] * sizes[1] + ["test"] * sizes[2]
    return ContextDataset(z, zeta, splits, seed)
