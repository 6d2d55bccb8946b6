import itertools

import numpy as np
import pytest

from dflkit.core import CapacityError, DecisionVector, FeasibilityError
from dflkit.ptsp import (
    PtspInstance,
    PtspProblem,
    TourDecision,
    arc_index,
    decode_decision,
    encode_decision,
    expected_objective,
    first_stage_cost,
    generate_instance,
    generate_service,
    held_karp_all_subsets,
    objective_value,
    second_stage_value,
    tour_length,
)


def square_instance():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [-1.0, 0.5]])
    return PtspInstance(k=4, coords=coords)


@pytest.fixture
def inst():
    return square_instance()


@pytest.fixture
def prob(inst):
    return PtspProblem(inst)


def all_decisions(k):
    customers = range(1, k + 1)
    for r in range(k + 1):
        for subset in itertools.combinations(customers, r):
            for order in itertools.permutations(subset):
                rest = [c for c in customers if c not in subset]
                for dr in range(len(rest) + 1):
                    for direct in itertools.combinations(rest, dr):
                        yield TourDecision(tuple(order), frozenset(direct))


def test_second_stage_refund(inst):
    dec = TourDecision((), frozenset({1}))
    zeta = np.zeros(4)
    assert second_stage_value(inst, dec, zeta) == pytest.approx(-2.0 * inst.d[0, 1])


def test_second_stage_zero_when_all_toured(inst):
    dec = TourDecision((1, 2, 3, 4))
    for bits in itertools.product([0, 1], repeat=4):
        assert second_stage_value(inst, dec, np.array(bits, float)) == 0.0


def test_second_stage_all_missed(inst):
    dec = TourDecision(())
    zeta = np.ones(4)
    expected = sum(2.0 * inst.rho * inst.d[0, i] for i in range(1, 5))
    assert second_stage_value(inst, dec, zeta) == pytest.approx(expected)


def test_held_karp_single_customer(inst):
    hk = held_karp_all_subsets(inst.d)
    assert hk.cycle_cost[1] == pytest.approx(inst.d[0, 1] + inst.d[1, 0])
    assert hk.tour(1) == (1,)


def test_held_karp_matches_permutation_bruteforce():
    rng = np.random.default_rng(0)
    for trial in range(20):
        k = int(rng.integers(2, 9)) if trial < 15 else 8
        inst = generate_instance(k, seed=300 + trial)
        hk = held_karp_all_subsets(inst.d)
        full = (1 << k) - 1
        best = min(
            tour_length(inst, perm) for perm in itertools.permutations(range(1, k + 1))
        )
        assert hk.cycle_cost[full] == pytest.approx(best, abs=1e-9), f"trial {trial}"
        assert tour_length(inst, hk.tour(full)) == pytest.approx(best, abs=1e-9)


def test_held_karp_negative_weights():
    w = -np.ones((3, 3))
    np.fill_diagonal(w, 0.0)
    hk = held_karp_all_subsets(w)
    assert hk.cycle_cost[0b11] == pytest.approx(-3.0)


def test_held_karp_capacity_limit():
    with pytest.raises(CapacityError):
        held_karp_all_subsets(np.zeros((17, 17)))


def test_encode_decode_roundtrip(inst):
    for dec in [
        TourDecision(()),
        TourDecision((2, 1)),
        TourDecision((1, 3), frozenset({2})),
        TourDecision((), frozenset({1, 4})),
    ]:
        back = decode_decision(inst, encode_decision(inst, dec))
        assert back == dec


def test_decode_rejects_subtours(inst):
    idx = arc_index(4)
    x = np.zeros(len(idx) + 4)
    # depot loop 0->1->0 plus a disconnected 2->3->2 subtour
    for arc in [(0, 1), (1, 0), (2, 3), (3, 2)]:
        x[idx[arc]] = 1.0
    with pytest.raises(FeasibilityError):
        decode_decision(inst, x)


def test_deterministic_zero_demand_is_empty(prob):
    dec = prob.solve_scenarios_decision([np.zeros(4)])
    assert dec == TourDecision((), frozenset())


def test_deterministic_single_customer_prefers_tour(prob, inst):
    zeta = np.array([0.0, 1.0, 0.0, 0.0])
    dec = prob.solve_scenarios_decision([zeta])
    assert dec.tour == (2,)
    assert dec.direct == frozenset()


def test_deterministic_proxy_never_books_direct_trips():
    rng = np.random.default_rng(1)
    for trial in range(50):
        k = int(rng.integers(2, 7))
        inst = generate_instance(k, seed=400 + trial)
        prob = PtspProblem(inst)
        zeta = (rng.random(k) < 0.5).astype(float)
        dec = prob.solve_scenarios_decision([zeta])
        assert dec.direct == frozenset(), f"trial {trial}"
        assert set(dec.tour) == {i + 1 for i in range(k) if zeta[i] > 0.5}


def test_uncertain_far_customer_goes_direct():
    # three near-certain customers clustered east; one far west customer at
    # probability one half: the tour detour costs more than a cancellable trip
    coords = np.array([[0.0, 0.0], [10.0, 0.0], [11.0, 1.0], [11.0, -1.0], [-30.0, 0.0]])
    inst = PtspInstance(k=4, coords=coords)
    prob = PtspProblem(inst)
    scen = [np.array([1, 1, 1, 1.0]), np.array([1, 1, 1, 0.0])]
    dec = prob.solve_scenarios_decision(scen)
    assert 4 in dec.direct
    assert set(dec.tour) == {1, 2, 3}
    # enumeration confirms it's the optimum under p_hat
    p_hat = np.array([1, 1, 1, 0.5])
    best = min(expected_objective(inst, d, p_hat) for d in all_decisions(4))
    assert expected_objective(inst, dec, p_hat) == pytest.approx(best, abs=1e-9)


def test_scenario_solve_matches_enumeration():
    rng = np.random.default_rng(2)
    for trial in range(15):
        inst = generate_instance(4, seed=500 + trial)
        prob = PtspProblem(inst)
        n = int(rng.integers(1, 5))
        scen = [(rng.random(4) < 0.6).astype(float) for _ in range(n)]
        dec = prob.solve_scenarios_decision(scen)
        p_hat = np.mean(scen, axis=0)
        got = expected_objective(inst, dec, p_hat)
        best = min(expected_objective(inst, d, p_hat) for d in all_decisions(4))
        assert got == pytest.approx(best, abs=1e-9), f"trial {trial}"


def test_scenario_average_identity():
    rng = np.random.default_rng(3)
    inst = generate_instance(5, seed=7)
    for _ in range(20):
        scen = [(rng.random(5) < 0.5).astype(float) for _ in range(4)]
        tour = tuple(int(i) for i in rng.permutation(np.arange(1, 6))[:2])
        rest = [i for i in range(1, 6) if i not in tour]
        direct = frozenset(i for i in rest if rng.random() < 0.4)
        dec = TourDecision(tour, direct)
        p_hat = np.mean(scen, axis=0)
        mean_of_scenarios = np.mean([objective_value(inst, dec, z) for z in scen])
        assert expected_objective(inst, dec, p_hat) == pytest.approx(
            mean_of_scenarios, abs=1e-9
        )


def test_quadratic_exact_encoding_roundtrip(prob, inst):
    rng = np.random.default_rng(4)
    decisions = list(all_decisions(4))
    for idx in rng.choice(len(decisions), size=100, replace=True):
        dec = decisions[idx]
        back = prob.solve_quadratic_decision(encode_decision(inst, dec))
        assert back == dec


def test_quadratic_all_zeros_is_empty(prob):
    _, d_c, d_x = prob.dims()
    dec = prob.solve_quadratic_decision(np.zeros(d_x))
    assert dec == TourDecision((), frozenset())


def test_quadratic_matches_bruteforce_projection(inst, prob):
    rng = np.random.default_rng(5)
    decisions = list(all_decisions(4))
    encodings = [encode_decision(inst, d) for d in decisions]
    _, _, d_x = prob.dims()
    for trial in range(15):
        xi = rng.normal(size=d_x)
        got = prob.solve_quadratic_decision(xi)
        got_dist = ((encode_decision(inst, got) - xi) ** 2).sum()
        best = min(((e - xi) ** 2).sum() for e in encodings)
        assert got_dist == pytest.approx(best, abs=1e-9), f"trial {trial}"


def test_generate_instance_deterministic():
    a = generate_instance(6, seed=11)
    b = generate_instance(6, seed=11)
    assert np.array_equal(a.coords, b.coords)
    assert a.coords[0, 0] == 0.0 and a.coords[0, 1] == 0.0
    assert a.d.shape == (7, 7)
    assert np.allclose(a.d, a.d.T)


def test_generate_service_binary_and_masked():
    inst = generate_instance(6, seed=11)
    ds = generate_service(inst, p=5, sizes=(300, 0, 0), seed=11)
    vals = set(np.unique(ds.params))
    assert vals <= {0.0, 1.0}
    again = generate_service(inst, p=5, sizes=(300, 0, 0), seed=11)
    assert np.array_equal(ds.params, again.params)


def test_bernoulli_mask_fraction_near_half():
    # the replace-with-Bernoulli mask should cover about half the coordinates
    from dflkit.core import substream

    rng = substream(123, "ptsp-data")
    k, total, p = 10, 1000, 5
    rng.standard_normal((total, p))
    (rng.random((k, p)) < 0.5).astype(float)
    frac = (rng.random((total, k)) < 0.5).mean()
    assert 0.48 <= frac <= 0.52


def test_objective_via_problem_interface(prob, inst):
    dec = TourDecision((1, 2), frozenset({3}))
    x = DecisionVector(encode_decision(inst, dec), "ptsp")
    zeta = np.array([1.0, 0.0, 0.0, 1.0])
    want = objective_value(inst, dec, zeta)
    assert prob.objective(zeta, x) == pytest.approx(want)
