import numpy as np
import pytest

from qtb.bounds import generalized_inverse, qte_hull
from qtb.dgp import AUDIT_K, ConfigError, gen_audit_cells, gen_nonregular_dgp, gen_regular_dgp
from qtb.envelope import SensitivityPair
from qtb.simulation import MetricsReport, TAUS, mc_se, run_audit, run_study, tipping_point


def test_audit_cells_reproducible():
    a = gen_audit_cells(3, n_cases=40)
    b = gen_audit_cells(3, n_cases=40)
    assert len(a) == 40
    for x, y in zip(a, b):
        assert np.array_equal(x.dist.masses, y.dist.masses) and (x.e, x.s, x.threshold) == (y.e, y.s, y.threshold)
    ks = [c.dist.k for c in a[:len(AUDIT_K)]]
    assert ks == list(AUDIT_K)
    assert all(abs(c.dist.masses.sum() - 1.0) < 1e-12 for c in a)
    assert all(c.threshold < c.dist.k - 1 for c in a)


def test_dgp_configuration_errors():
    with pytest.raises(ConfigError):
        gen_regular_dgp(support=(1.0, -1.0))
    with pytest.raises(ConfigError):
        gen_regular_dgp(e_range=(0.0, 0.9))
    with pytest.raises(ConfigError):
        gen_regular_dgp(mixture=1.0)
    with pytest.raises(ConfigError):
        gen_nonregular_dgp(zero_prob=((0.0, 0.1, 0.1, 0.1), (0.1, 0.1, 0.1, 0.1)))
    with pytest.raises(ConfigError):
        gen_regular_dgp().sample(0, 10, np.random.default_rng(0))


def test_regular_design_weights_and_sampling():
    dgp = gen_regular_dgp()
    assert dgp.source_weights.sum() == pytest.approx(1.0) and dgp.target_weights.sum() == pytest.approx(1.0)
    assert np.all(dgp.source_weights > 0) and np.all((dgp.e1 >= 0.18) & (dgp.e1 <= 0.82))
    grid = dgp.grid(41)
    data = dgp.sample(300, 450, np.random.default_rng(0), grid)
    assert (data.n1, data.n0) == (300, 450)
    y = data.y[data.r == 1]
    assert np.all(np.isin(y, grid.values))
    again = dgp.sample(300, 450, np.random.default_rng(0), grid)
    assert np.array_equal(data.x, again.x) and np.array_equal(data.y, again.y, equal_nan=True)


def test_truth_inside_hull_only_when_sensitivity_is_large_enough():
    dgp = gen_regular_dgp()
    grid = dgp.grid(801)
    truth = dgp.true_qte(grid, [0.5])[0]
    small, right = SensitivityPair(1.15, 1.10), dgp.s0
    proc = dgp.oracle(grid, [small, right])
    h_true = qte_hull(proc, 0.5, right)
    # arm 1 at its lower envelope and arm 0 at its upper one give the hull's upper endpoint
    assert h_true.delta_hi == pytest.approx(truth, abs=1e-12)
    assert h_true.delta_lo <= truth
    h_small = qte_hull(proc, 0.5, small)
    assert not h_small.delta_lo <= truth <= h_small.delta_hi


def test_nonregular_median_sits_on_zero_atom():
    dgp = gen_nonregular_dgp()
    grid = dgp.grid(181)
    proc = dgp.oracle(grid, [dgp.s0])
    tilted0 = proc.curve(0, "+", dgp.s0)
    k0 = int(np.argmin(np.abs(grid.values)))
    # the atom straddles the median: CDF jumps across 1/2 at zero
    assert tilted0[k0 - 1] < 0.5 <= tilted0[k0]
    assert generalized_inverse(grid.values, tilted0, 0.5) == pytest.approx(0.0, abs=1e-12)


def test_mc_se_and_report_helpers():
    assert mc_se(0.95, 100) == pytest.approx(np.sqrt(0.95 * 0.05 / 100))
    assert np.isnan(mc_se(0.5, 0))
    rep = MetricsReport("x", rows=[{"a": 1, "v": 0.1}, {"a": 2, "v": 1 / 3}], failures=1, attempts=10)
    assert rep.row(a=2)["v"] == pytest.approx(1 / 3)
    with pytest.raises(KeyError):
        rep.row(a=3)
    assert "0.333333333333" in rep.to_csv()
    with pytest.raises(RuntimeError):
        rep.check(0.05)


def test_tipping_point_interpolates_diagonal():
    g = np.linspace(1, 3, 5)
    l = np.linspace(1, 2, 5)
    kappa = np.add.outer(g, l) - 4.0  # diagonal crosses zero between nodes 2 and 3
    tip = tipping_point(g, l, kappa)
    assert 2.0 < tip < 2.5
    assert tipping_point(g, l, np.ones((5, 5))) == 1.0
    assert np.isnan(tipping_point(g, l, -np.ones((5, 5))))


def test_small_audit_is_exact():
    res = run_audit(n_cases=60, n_algebraic=2000)
    assert max(res["max_err_lower"], res["max_err_upper"], res["max_err_greedy"]) < 1e-12
    assert res["lp_infeasible"] == 0 and res["dominance_violations"] == 0
    assert res["lp_dominance_violations"] == 0


def test_study_runs_are_deterministic():
    kw = dict(sizes=(300,), reps=2, seed=5, n_draws=99, grid_size=41, oracle_grid=201)
    a = run_study("2", **kw)
    b = run_study("2", **kw)
    assert a.to_csv() == b.to_csv()
    assert {r["sensitivity"] for r in a.rows} == {"underspecified", "true", "overspecified"}
    with pytest.raises(ConfigError):
        run_study("9")


def test_nonregular_smoke_run():
    rep = run_study("4", sizes=(300,), reps=1, seed=2, n_draws=20, mesh=(7, 7), grid_size=61)
    sub = rep.row(method="subsample m=n^0.6")
    assert 0.0 <= sub["frontier_outer"] <= 1.0 and sub["hausdorff_missing"] in (0, 1)
    assert rep.row(method="wald")["reps"] == 1
    assert len(TAUS) == 9
