import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtb.envelope import DomainError, SensitivityPair, ell_u_gamma, g_nested, product_relaxation
from qtb.lp import (FiniteDist, LpStatus, binary_event_interval, check_solution, greedy_tilt,
                    greedy_two_layer, interior_atoms, simplex, solve_single_layer, solve_two_layer)


def dirichlet_dist(rng, k):
    g = rng.gamma(2.0, size=k)
    return FiniteDist(np.arange(k, dtype=float), g / g.sum())


def test_binary_event_examples():
    assert binary_event_interval(0.7, 0.55, 1.9) == pytest.approx((0.43, 0.835), abs=1e-12)
    assert binary_event_interval(0.0, 0.3, 4.0) == (0.0, 0.0)
    assert binary_event_interval(0.5, 1.0, 1.0) == (0.5, 0.5)
    with pytest.raises(DomainError):
        binary_event_interval(0.5, 1.2, 2.0)
    with pytest.raises(DomainError):
        binary_event_interval(0.5, 0.5, 0.9)


def test_finite_dist_validation():
    with pytest.raises(DomainError):
        FiniteDist([0.0, 0.0], [0.5, 0.5])
    with pytest.raises(DomainError):
        FiniteDist([0.0, 1.0], [0.5, 0.4])
    with pytest.raises(DomainError):
        FiniteDist([0.0, 1.0], [1.0, 0.0])
    d = FiniteDist([0.0, 1.0, 3.0], [0.2, 0.3, 0.5])
    assert d.cdf()[-1] == 1.0
    assert d.mass_below(1.5) == pytest.approx(0.5)


def test_simplex_small_program():
    # max x + y  s.t. x + 2y <= 4, 3x + y <= 6, x, y >= 0  -> (1.6, 1.2), value 2.8
    x, val, status = simplex([-1.0, -1.0], a_ub=[[1, 2], [3, 1]], b_ub=[4, 6])
    assert status is LpStatus.OPTIMAL
    assert x == pytest.approx([1.6, 1.2], abs=1e-12)
    assert -val == pytest.approx(2.8, abs=1e-12)


def test_simplex_reports_infeasible():
    _, _, status = simplex([1.0], a_eq=[[1.0]], b_eq=[2.0], lower=[0.0], upper=[1.0])
    assert status is LpStatus.INFEASIBLE


def test_two_layer_two_atom_example():
    d = FiniteDist([0.0, 1.0], [0.3, 0.7])
    s = SensitivityPair(2.0, 1.5)
    sol = solve_two_layer(d, 0.5, 0.1, s, "-")
    assert sol.value == pytest.approx(g_nested(0.3, 0.1, s, "-"), abs=1e-9)
    assert check_solution(sol, d, 0.1, s)


def test_two_layer_identity_at_point():
    rng = np.random.default_rng(0)
    d = dirichlet_dist(rng, 6)
    for side in "-+":
        sol = solve_two_layer(d, 2.0, 0.4, SensitivityPair(1.0, 1.0), side)
        assert sol.value == pytest.approx(d.mass_below(2.0), abs=1e-12)


def test_two_layer_five_atom_event_half():
    d = FiniteDist(np.arange(5.0), [0.2, 0.1, 0.2, 0.3, 0.2])
    s = SensitivityPair(3.0, 2.0)
    sol = solve_two_layer(d, 2.0, 0.2, s, "+")
    assert sol.value == pytest.approx(g_nested(0.5, 0.2, s, "+"), abs=1e-9)


def test_single_layer_matches_binary_event_and_product():
    rng = np.random.default_rng(11)
    worst = 0.0
    for i in range(1000):
        k = int(rng.integers(2, 9))
        d = dirichlet_dist(rng, k)
        thr = float(rng.integers(0, k))
        ell, u = float(rng.uniform(0.05, 1.0)), float(rng.uniform(1.0, 6.0))
        lo, hi = binary_event_interval(d.mass_below(thr), ell, u)
        worst = max(worst, abs(solve_single_layer(d, thr, ell, u, "-").value - lo),
                    abs(solve_single_layer(d, thr, ell, u, "+").value - hi))
    assert worst < 1e-9
    d = dirichlet_dist(rng, 5)
    s = SensitivityPair(2.0, 1.5)
    ell, u = ell_u_gamma(0.3, 2.0)
    for side in "-+":
        v = solve_single_layer(d, 1.0, ell / 1.5, u * 1.5, side).value
        assert v == pytest.approx(product_relaxation(d.mass_below(1.0), 0.3, s, side), abs=1e-9)


def test_greedy_matches_simplex_and_has_threshold_structure():
    rng = np.random.default_rng(5)
    for _ in range(100):
        k = int(rng.integers(2, 12))
        d = dirichlet_dist(rng, k)
        thr = float(rng.integers(0, k - 1))
        e = float(rng.uniform(0.05, 0.95))
        s = SensitivityPair(float(rng.choice([1.25, 2, 5])), float(rng.choice([1.05, 1.5, 3])))
        for side in "-+":
            lp = solve_two_layer(d, thr, e, s, side)
            gr = greedy_two_layer(d, thr, e, s, side)
            assert abs(lp.value - gr.value) < 1e-8
            ell, u = ell_u_gamma(e, s.gamma)
            assert interior_atoms(gr.q_vars, d.masses, ell, u) <= 1


def test_greedy_tilt_normalized():
    w = np.array([0.1, 0.2, 0.3, 0.4])
    q = greedy_tilt(w, np.array([True, True, False, False]), 0.5, 2.0, "-")
    assert q.sum() == pytest.approx(1.0)
    assert np.all(q >= 0.5 * w - 1e-15) and np.all(q <= 2.0 * w + 1e-15)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([2, 3, 5, 8]), st.floats(0.05, 0.95),
       st.sampled_from([1.0, 1.5, 3.0]), st.sampled_from([1.0, 1.25, 2.0]))
def test_product_lp_contains_nested_lp(seed, k, e, g, l):
    rng = np.random.default_rng(seed)
    d = dirichlet_dist(rng, k)
    thr = float(rng.integers(0, k))
    s = SensitivityPair(g, l)
    ell, u = ell_u_gamma(e, g)
    lo_n = solve_two_layer(d, thr, e, s, "-").value
    hi_n = solve_two_layer(d, thr, e, s, "+").value
    lo_p = solve_single_layer(d, thr, ell / l, u * l, "-").value
    hi_p = solve_single_layer(d, thr, ell / l, u * l, "+").value
    assert lo_p <= lo_n + 1e-9 and hi_n <= hi_p + 1e-9
