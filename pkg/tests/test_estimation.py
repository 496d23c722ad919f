import numpy as np
import pytest

from qtb.bounds import CellNuisances, marginal_cdf_bounds, sensitivity_mesh
from qtb.dgp import gen_regular_dgp
from qtb.envelope import POINT, DomainError, SensitivityPair, Side
from qtb.estimation import (EmptyArmError, NuisanceSet, SupportError, TwoSampleData, Variant, assign_folds,
                            estimate_nuisances, expected_score, fit_process, grid_index, one_step_estimate,
                            one_step_mesh, perturb, zeta_source_residual)

S_TRUE = SensitivityPair(1.6, 1.4)


def regular_sample(n1=600, seed=0, grid_size=41):
    dgp = gen_regular_dgp()
    grid = dgp.grid(grid_size)
    data = dgp.sample(n1, int(1.5 * n1), np.random.default_rng(seed), grid)
    return dgp, grid, data


def exact_population_data():
    # two cells whose empirical laws are exactly the cell nuisances below
    rows = []
    target = {0: 3, 1: 1}
    src = {(0, 0): [0.0, 1.0, 1.0, 2.0], (0, 1): [0.0, 2.0, 2.0, 2.0],
           (1, 0): [1.0, 1.0, 2.0, 2.0], (1, 1): [0.0, 0.0, 1.0, 2.0]}
    for x, n in target.items():
        rows += [(0, x, -1, np.nan)] * n
    for (x, a), ys in src.items():
        rows += [(1, x, a, y) for y in ys]
    r, x, a, y = map(np.array, zip(*rows))
    data = TwoSampleData(r, x, a, y, 2)
    grid = np.array([0.0, 1.0, 2.0])
    p = np.empty((2, 2, 3))
    for (xx, aa), ys in src.items():
        p[aa, xx] = [np.mean(np.array(ys) <= g) for g in grid]
    cells = CellNuisances(np.array([0.5, 0.5]), p, np.array([0.75, 0.25]), np.array([0.5, 0.5]))
    return data, grid, cells


def test_data_validation_and_masking():
    d = TwoSampleData([1, 1, 0], [0, 0, 0], [1, 0, 1], [0.5, 0.2, 9.0], 1)
    assert (d.n0, d.n1) == (1, 2)
    assert d.a[2] == -1 and np.isnan(d.y[2])
    with pytest.raises(DomainError):
        TwoSampleData([1, 0], [0, 0], [1, 0], [np.nan, 0.0], 1)
    with pytest.raises(DomainError):
        TwoSampleData([1, 1], [0, 0], [1, 0], [0.0, 0.0], 1)
    assert Variant.parse("DML") is Variant.FULL and Variant.parse("no-ge") is Variant.NOGE


def test_grid_index_convention():
    g = np.array([0.0, 1.0, 2.0])
    assert grid_index([0.0, 0.5, 1.0, 2.0], g).tolist() == [0, 1, 1, 2]
    with pytest.raises(DomainError):
        grid_index([2.5], g)


def test_folds_balanced_within_samples():
    r = np.array([0] * 10 + [1] * 7)
    f = assign_folds(r, 3, np.random.default_rng(0))
    assert np.bincount(f[r == 0]).tolist() == [4, 3, 3]
    assert np.bincount(f[r == 1]).tolist() == [3, 2, 2]


def test_nuisances_match_hand_counts():
    data, grid, cells = exact_population_data()
    nuis = estimate_nuisances(data, grid, k_folds=2, eta=0.0, rng=np.random.default_rng(0))
    # pooled over folds the training counts reproduce the empirical cell laws
    assert nuis.target_weights.mean(0) == pytest.approx([0.75, 0.25], abs=0.26)
    full = NuisanceSet.from_cells(cells, grid, data)
    assert full.omega[0] == pytest.approx([1.5, 0.5])
    assert np.all(np.diff(nuis.p, axis=-1) >= 0) and np.all(nuis.p[..., -1] == 1)
    assert nuis.pi0 + nuis.pi1 == pytest.approx(1.0)


def test_known_design_uses_supplied_propensity():
    _, grid, data = regular_sample(300)
    known = np.linspace(0.2, 0.8, data.n_cells)
    nuis = estimate_nuisances(data, grid, 5, 0.05, rng=np.random.default_rng(1), known_e1=known)
    assert nuis.chi == 0
    assert np.allclose(nuis.e1, known[None])


def test_support_and_empty_arm_errors():
    grid = np.array([0.0, 1.0])
    d = TwoSampleData([1, 1, 0, 0], [0, 0, 0, 1], [0, 1, -1, -1], [0.0, 1.0, np.nan, np.nan], 2)
    with pytest.raises(SupportError):
        estimate_nuisances(d, grid, 2)
    d = TwoSampleData([1, 1, 1, 0, 0], [0, 0, 1, 0, 1], [0, 0, 1, -1, -1], [0.0, 1.0, 1.0, np.nan, np.nan], 2)
    with pytest.raises(EmptyArmError):
        estimate_nuisances(d, grid, 2)


def test_nuisances_converge_to_truth():
    dgp = gen_regular_dgp()
    grid = dgp.grid(41)
    truth = dgp.cells(grid)
    errs = []
    for n1 in (400, 1600, 6400):
        data = dgp.sample(n1, n1, np.random.default_rng(n1), grid)
        nuis = estimate_nuisances(data, grid, 5, 0.0, rng=np.random.default_rng(0))
        errs.append(max(np.abs(nuis.p.mean(0) - truth.p).max(), np.abs(nuis.e1.mean(0) - truth.e1).max()))
    assert errs[0] > errs[1] > errs[2]


def test_zeta_reductions():
    # known design drops the propensity term
    with_e = zeta_source_residual(1, 0.3, 1, 0.5, 0.4, 0.6, 0.7, 0.2, chi=1)
    without = zeta_source_residual(1, 0.3, 1, 0.5, 0.4, 0.6, 0.7, 0.2, chi=0)
    assert with_e - without == pytest.approx(0.2 * (1 - 0.6))
    # point identification: classical transported-CDF residual
    assert zeta_source_residual(1, 0.3, 1, 0.5, 0.4, 0.6, 1.0, 0.0, 1) == pytest.approx((1 - 0.4) / 0.6)
    assert zeta_source_residual(0, 0.3, 1, 0.5, 0.4, 0.6, 1.0, 0.0, 1) == 0.0


def test_population_data_recovers_oracle_exactly():
    data, grid, cells = exact_population_data()
    s_points = [POINT, SensitivityPair(2.0, 1.5)]
    truth = marginal_cdf_bounds(cells, grid, s_points).values
    nuis = NuisanceSet.from_cells(cells, grid, data)
    for variant in (Variant.FULL, Variant.PLUGIN):
        res = one_step_estimate(data, nuis, s_points, variant)
        assert np.max(np.abs(res.process.values - truth)) < 1e-12


def test_compiled_and_reference_paths_agree():
    _, grid, data = regular_sample(500, seed=3)
    nuis = estimate_nuisances(data, grid, 5, 0.05, rng=np.random.default_rng(0))
    pts = [POINT, S_TRUE, SensitivityPair(2.2, 1.8)]
    for variant in Variant:
        a = one_step_estimate(data, nuis, pts, variant, compiled=True)
        b = one_step_estimate(data, nuis, pts, variant, compiled=False)
        assert np.max(np.abs(a.process.values - b.process.values)) < 1e-12
        assert np.max(np.abs(a.plugin - b.plugin)) < 1e-12
        assert np.array_equal(a.tie, b.tie)


def test_mesh_kernel_matches_one_step_away_from_ties():
    _, grid, data = regular_sample(500, seed=4)
    nuis = estimate_nuisances(data, grid, 5, 0.05, rng=np.random.default_rng(0))
    gammas, lams, pts = sensitivity_mesh((1, 3, 1, 2), (5, 4))
    mesh = one_step_mesh(data, nuis, gammas, lams)
    ref = one_step_estimate(data, nuis, pts, compiled=False)
    ok = ~ref.tie
    assert ok.mean() > 0.9
    assert np.max(np.abs(mesh - ref.process.values)[ok]) < 1e-12


def test_influence_mean_is_zero_and_matches_estimate():
    _, grid, data = regular_sample(400, seed=5)
    nuis = estimate_nuisances(data, grid, 5, 0.05, rng=np.random.default_rng(0))
    res = one_step_estimate(data, nuis, [S_TRUE], keep_phi=True)
    phi = res.eif.phi
    assert phi.shape == (data.n, 2, 2, 1, len(grid))
    assert np.max(np.abs(phi.mean(0))) < 1e-12
    # target rows hold the centered plug-in term, source rows the weighted residual
    tgt = res.eif.is_target
    assert np.all(res.eif.source_part[tgt] == 0) and np.all(res.eif.target_part[~tgt] == 0)


def test_point_variant_forces_unit_sensitivity():
    _, grid, data = regular_sample(300, seed=6)
    nuis = estimate_nuisances(data, grid, 5, 0.05, rng=np.random.default_rng(0))
    pt = one_step_estimate(data, nuis, [S_TRUE], Variant.POINT)
    full = one_step_estimate(data, nuis, [POINT], Variant.FULL)
    assert pt.process.s_points == (POINT,)
    assert np.allclose(pt.process.values, full.process.values)


def test_fit_process_deterministic():
    _, grid, data = regular_sample(300, seed=7)
    a = fit_process(data, grid, [S_TRUE], seed=3).process.values
    b = fit_process(data, grid, [S_TRUE], seed=3).process.values
    assert np.array_equal(a, b)


def test_expected_score_vanishes_at_truth_and_is_second_order():
    dgp = gen_regular_dgp()
    grid = dgp.grid(61)
    truth = dgp.cells(grid)
    assert np.max(np.abs(expected_score(truth, truth, S_TRUE))) < 1e-14
    J, G = truth.e1.size, len(grid)
    sign = np.where(np.arange(2) == 0, 1.0, -1.0)[:, None, None]
    h_p = truth.p * (1 - truth.p) * np.cos(np.arange(G) / 20.0)[None, None, :] * sign
    h_e = 0.5 * np.sin(np.arange(J) + 1.0)
    h_w = np.cos(2.0 * np.arange(J))
    drift = [np.abs(expected_score(truth, perturb(truth, t, h_p, h_e, h_w), S_TRUE)).max()
             for t in (0.02, 0.01, 0.005)]
    # first-order terms cancel, so drift is o(t)
    assert drift[1] / 0.01 < drift[0] / 0.02 and drift[2] / 0.005 < drift[1] / 0.01
