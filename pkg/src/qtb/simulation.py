"""Replication engine for the finite-support audit, the regular study and the nonregular frontier study."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .bounds import hull_arrays, sensitivity_mesh
from .dgp import AUDIT_K, ConfigError, gen_audit_cells, gen_nonregular_dgp, gen_regular_dgp
from .envelope import SIDES, SensitivityPair, branch_codes, ell_u_gamma, g_nested, product_relaxation
from .estimation import (NuisanceSet, Variant, estimate_nuisances, expected_score, one_step_estimate,
                         one_step_mesh, perturb)
from .inference import (DensityFloorError, EmptySetError, build_bands, hausdorff, multiplier_critical,
                        outer_band_arrays, subsample_critical, subsample_size, wald_quantile_ci,
                        zero_level_points)
from .lp import check_solution, greedy_two_layer, solve_single_layer, solve_two_layer

log = logging.getLogger(__name__)

TAUS = tuple(np.round(np.linspace(0.1, 0.9, 9), 10))
REGULAR_S = {"underspecified": (1.15, 1.10), "true": (1.60, 1.40), "overspecified": (2.20, 1.80)}


def mc_se(p: float, b: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / b) if b > 0 else float("nan")


@dataclass
class MetricsReport:
    """Rows of per-configuration metrics plus bookkeeping."""

    experiment: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    failures: int = 0
    attempts: int = 0
    runtime: float = 0.0

    @property
    def failure_rate(self) -> float:
        return self.failures / self.attempts if self.attempts else 0.0

    def check(self, max_failure_rate: float = 0.05) -> None:
        if self.failure_rate > max_failure_rate:
            raise RuntimeError(f"{self.failures}/{self.attempts} replications failed")

    def row(self, **match) -> dict:
        for r in self.rows:
            if all(r.get(k) == v for k, v in match.items()):
                return r
        raise KeyError(match)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, default=_jsonable)

    def to_csv(self) -> str:
        keys = []
        for r in self.rows:
            keys.extend(k for k in r if k not in keys)
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys)
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k)) for k in keys})
        return buf.getvalue()


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return v


def _coverage(hits, key: str, b: int) -> dict:
    p = float(np.mean(hits)) if len(hits) else float("nan")
    return {key: p, f"{key}_se": mc_se(p, b)}


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


# ---------------------------------------------------------------------------
# finite-support audit


def run_audit(n_cases: int = 500, seed: int = 7, n_algebraic: int = 20000, k_list=AUDIT_K) -> dict:
    """Closed form against the two-layer LP and the greedy construction; product dominance."""
    cases = gen_audit_cells(seed, k_list=tuple(k_list), n_cases=n_cases)
    worst = {"-": 0.0, "+": 0.0}
    greedy_worst = 0.0
    infeasible = 0
    lp_dominance = 0
    by_k: dict = {}
    for c in cases:
        p = c.dist.mass_below(c.threshold)
        ell, u = ell_u_gamma(c.e, c.s.gamma)
        nested_lp, product_lp = [], []
        for side in SIDES:
            nested_lp.append(solve_two_layer(c.dist, c.threshold, c.e, c.s, side).value)
            product_lp.append(solve_single_layer(c.dist, c.threshold, float(ell) / c.s.lam,
                                                 float(u) * c.s.lam, side).value)
        lp_dominance += (product_lp[0] > nested_lp[0] + 1e-9) or (product_lp[1] < nested_lp[1] - 1e-9)
        for side in SIDES:
            closed = float(g_nested(p, c.e, c.s, side))
            lp = solve_two_layer(c.dist, c.threshold, c.e, c.s, side)
            gr = greedy_two_layer(c.dist, c.threshold, c.e, c.s, side)
            err = abs(lp.value - closed)
            worst[side.value] = max(worst[side.value], err)
            greedy_worst = max(greedy_worst, abs(gr.value - closed))
            infeasible += not check_solution(lp, c.dist, c.e, c.s)
            k = c.dist.k
            by_k[k] = max(by_k.get(k, 0.0), err)
    rng = _rng(seed, 1)
    p = rng.uniform(0, 1, n_algebraic)
    e = rng.uniform(0.01, 0.99, n_algebraic)
    levels = np.array([1.0, 1.05, 1.25, 1.5, 2.0, 3.0, 5.0, 8.0])
    gam = rng.choice(levels, n_algebraic)
    lam = rng.choice(levels, n_algebraic)
    violations = 0
    strict = 0
    nontrivial = 0
    for i in range(n_algebraic):
        s = SensitivityPair(gam[i], lam[i])
        lo_n, hi_n = g_nested(p[i], e[i], s, "-"), g_nested(p[i], e[i], s, "+")
        lo_p, hi_p = product_relaxation(p[i], e[i], s, "-"), product_relaxation(p[i], e[i], s, "+")
        violations += (lo_p > lo_n + 1e-12) or (hi_p < hi_n - 1e-12)
        if gam[i] > 1 and lam[i] > 1 and 1e-9 < p[i] < 1 - 1e-9:
            nontrivial += 1
            strict += ((hi_p - lo_p) - (hi_n - lo_n)) > 1e-10
    return {
        "cases": len(cases),
        "max_err_lower": worst["-"],
        "max_err_upper": worst["+"],
        "max_err_greedy": greedy_worst,
        "lp_infeasible": infeasible,
        "max_err_by_k": {int(k): v for k, v in sorted(by_k.items())},
        "algebraic_cases": n_algebraic,
        "dominance_violations": int(violations),
        "lp_dominance_violations": int(lp_dominance),
        "strict_share_nontrivial": strict / nontrivial if nontrivial else float("nan"),
    }


# ---------------------------------------------------------------------------
# orthogonality diagnostic


def orthogonality_check(s=REGULAR_S["true"], grid_size: int = 61, t_max: float = 0.1, steps: int = 41,
                        dgp=None) -> dict:
    """Drift of the population score when all nuisances move jointly by ``t``.

    Only indices whose active branches stay fixed along the whole path are
    kept; there the drift is smooth and should scale like ``t**2``.
    Returns the sup drift on the path and the ratios
    ``drift(t_max) / drift(t_max / 2)`` and ``drift(t_max / 2) / drift(t_max / 4)``.
    """
    dgp = dgp if dgp is not None else gen_regular_dgp()
    s = SensitivityPair(*s) if not isinstance(s, SensitivityPair) else s
    grid = dgp.grid(grid_size)
    truth = dgp.cells(grid)
    J, G = truth.e1.size, len(grid)
    sign = np.array([1.0, -1.0])[:, None, None]
    h_p = truth.p * (1 - truth.p) * np.cos(np.arange(G) / 20.0)[None, None, :] * sign
    h_e = 0.5 * np.sin(np.arange(J) + 1.0)
    h_w = np.cos(2.0 * np.arange(J))
    ts = np.linspace(0.0, t_max, steps)
    stable = np.ones((2, 2, G), bool)
    ref = None
    for t in ts:
        c = perturb(truth, t, h_p, h_e, h_w)
        codes = np.stack([np.stack([np.stack(branch_codes(c.p[a], c.e(a)[:, None], s, side)[:2])
                                    for side in SIDES]) for a in (0, 1)])  # (2, 2, 2, J, G)
        if ref is None:
            ref = codes
        stable &= np.all(codes == ref, axis=(2, 3)) & np.all(ref != 0, axis=(2, 3))
    inner = (truth.p > 1e-6) & (truth.p < 1 - 1e-6)
    stable &= np.all(inner, axis=1)[:, None, :]

    def drift(t):
        d = np.abs(expected_score(truth, perturb(truth, t, h_p, h_e, h_w), s))
        return float(np.max(d[stable]))

    d1, d2, d4 = drift(t_max), drift(t_max / 2), drift(t_max / 4)
    return {"stable_share": float(stable.mean()), "drift": [d1, d2, d4],
            "path_drift": [drift(t) for t in ts[1:]], "ratios": [d1 / d2, d2 / d4]}


# ---------------------------------------------------------------------------
# regular study


@dataclass
class RegularConfig:
    sizes: tuple = (400, 800, 1600)
    reps: int = 100
    seed: int = 2024
    n_draws: int = 149
    grid_size: int = 121
    oracle_grid: int = 2001
    taus: tuple = TAUS
    alpha: float = 0.05
    k_folds: int = 5
    eta: float = 0.05
    target_ratio: float = 1.5
    min_expected: float = 5.0


def _usable_indices(cells, n1: int, min_expected: float) -> np.ndarray:
    """Grid points where every cell-arm expects ``min_expected`` source rows on both sides.

    Returns a ``(2, G)`` mask per arm.
    """
    e = np.stack([1.0 - cells.e1, cells.e1])[:, :, None]
    cnt = n1 * cells.source_weights[None, :, None] * e
    tail = np.minimum(cells.p, 1.0 - cells.p) * cnt
    need = cells.target_weights > 0
    return np.all(tail[:, need] >= min_expected, axis=1)


def run_regular(cfg: RegularConfig = RegularConfig(), dgp=None) -> MetricsReport:
    dgp = dgp if dgp is not None else gen_regular_dgp()
    t0 = time.time()
    grid = dgp.grid(cfg.grid_size)
    taus = np.asarray(cfg.taus)
    labels = list(REGULAR_S)
    s_points = [SensitivityPair(*REGULAR_S[k]) for k in labels]
    oracle = dgp.oracle(grid, s_points)
    truth = dgp.true_qte(grid, taus)
    o_lo, o_hi = hull_arrays(grid.values, oracle.values, taus)
    dense = dgp.grid(cfg.oracle_grid)
    dense_proc = dgp.oracle(dense, s_points)
    d_lo, d_hi = hull_arrays(dense.values, dense_proc.values, taus)
    pop_width = (d_hi - d_lo).mean(axis=1)
    truth_in_hull = [bool(np.all((o_lo[j] <= truth) & (truth <= o_hi[j]))) for j in range(len(s_points))]
    cells = dgp.cells(grid)
    j0 = labels.index("true")

    report = MetricsReport("regular", config=asdict(cfg))
    for n1 in cfg.sizes:
        n0 = int(round(cfg.target_ratio * n1))
        usable = _usable_indices(cells, n1, cfg.min_expected)
        usable_idx = np.broadcast_to(usable[:, None, :], (2, 2, len(grid)))
        acc = {lab: {"qte": [], "hull": [], "cdf": [], "plug": [], "width": [], "plug_width": []} for lab in labels}
        eif_hat_ok, eif_true_ok, lin_rem = [], [], []
        for b in range(cfg.reps):
            report.attempts += 1
            rng = _rng(cfg.seed, n1, b)
            try:
                data = dgp.sample(n1, n0, rng, grid)
                nuis = estimate_nuisances(data, grid, cfg.k_folds, cfg.eta, rng=rng)
                res = one_step_estimate(data, nuis, s_points, keep_phi=True)
                crit = [multiplier_critical(res.eif.for_s(j), cfg.alpha, cfg.n_draws, rng)
                        for j in range(len(s_points))]
                bands = build_bands(res.process, crit, data.n, cfg.alpha)
                lo, hi = outer_band_arrays(bands, taus)
                p_lo, p_hi = hull_arrays(grid.values, res.plugin, taus, strict=False)
                cdf_in = bands.contains(oracle.values)
                # gradient at the truth: its mean equals the truth-nuisance estimate minus psi
                tn = NuisanceSet.from_cells(cells, grid, data, chi=nuis.chi)
                tres = one_step_estimate(data, tn, [s_points[j0]], keep_phi=True,
                                         psi_center=oracle.values[:, :, j0:j0 + 1])
            except (ValueError, ArithmeticError) as exc:
                report.failures += 1
                log.info("replication %d at n1=%d failed: %s", b, n1, exc)
                continue
            for j, lab in enumerate(labels):
                a = acc[lab]
                a["qte"].append(bool(np.all((lo[j] <= truth) & (truth <= hi[j]))))
                a["hull"].append(bool(np.all((lo[j] <= o_lo[j]) & (o_hi[j] <= hi[j]))))
                a["cdf"].append(bool(cdf_in[j]))
                a["plug"].append(bool(np.all((p_lo[j] <= truth) & (truth <= p_hi[j]))))
                a["width"].append(float(np.mean(hi[j] - lo[j])))
                a["plug_width"].append(float(np.mean(p_hi[j] - p_lo[j])))
            phi_hat = res.eif.phi[:, :, :, j0, :]
            sd_hat = phi_hat.std(axis=0, ddof=1)
            eif_hat_ok.append(bool(np.all(np.abs(phi_hat.mean(0)) <= 3 * sd_hat / np.sqrt(data.n) + 1e-12)))
            phi_t = tres.eif.phi[:, :, :, 0, :]
            m_t = phi_t.mean(0)
            sd_t = phi_t.std(axis=0, ddof=1)
            eif_true_ok.append((np.abs(m_t) <= 3 * sd_t / np.sqrt(data.n)) | ~usable_idx)
            lin_rem.append(float(np.sqrt(data.n) * np.max(np.abs(res.process.values[:, :, j0] - tres.process.values[:, :, 0]))))
        b_ok = len(eif_hat_ok)
        frac_true = np.mean(np.array(eif_true_ok), axis=0) if eif_true_ok else np.full((2, 2, len(grid)), np.nan)
        for j, lab in enumerate(labels):
            a = acc[lab]
            row = {"n1": n1, "n0": n0, "sensitivity": lab, "gamma": s_points[j].gamma, "lam": s_points[j].lam,
                   "truth_in_hull": truth_in_hull[j], "reps": len(a["qte"])}
            row.update(_coverage(a["qte"], "qte_cover", len(a["qte"])))
            row.update(_coverage(a["hull"], "hull_contain", len(a["qte"])))
            row.update(_coverage(a["cdf"], "cdf_cover", len(a["qte"])))
            row.update(_coverage(a["plug"], "plugin_cover", len(a["qte"])))
            row["outer_width"] = float(np.mean(a["width"])) if a["width"] else float("nan")
            row["plugin_width"] = float(np.mean(a["plug_width"])) if a["plug_width"] else float("nan")
            row["pop_width"] = float(pop_width[j])
            if lab == "true":
                row["lin_remainder"] = float(np.mean(lin_rem)) if lin_rem else float("nan")
                row["eif_hat_pass"] = float(np.mean(eif_hat_ok)) if b_ok else float("nan")
                row["eif_true_min_pass"] = float(np.min(frac_true[usable_idx])) if usable.any() else float("nan")
                row["eif_usable_indices"] = int(usable_idx.sum())
            report.rows.append(row)
    report.runtime = time.time() - t0
    return report


# ---------------------------------------------------------------------------
# nonregular study


@dataclass
class NonregularConfig:
    sizes: tuple = (500, 1000, 2000)
    reps: int = 100
    seed: int = 4048
    n_draws: int = 99
    grid_size: int = 181
    taus: tuple = TAUS
    tau0: float = 0.5
    alpha: float = 0.05
    k_folds: int = 5
    eta: float = 0.05
    target_ratio: float = 1.5
    s_rect: tuple = (1.0, 4.0, 1.0, 3.0)
    mesh: tuple = (31, 31)
    methods: tuple = ("sub0.6", "wald")


def tipping_point(gammas, lams, kappa) -> float:
    """Smallest diagonal position (in Gamma units) where ``kappa >= 0``, interpolated.

    The diagonal runs from the lower-left to the upper-right mesh corner.
    """
    n = min(len(gammas), len(lams))
    idx_g = np.round(np.linspace(0, len(gammas) - 1, n)).astype(int)
    idx_l = np.round(np.linspace(0, len(lams) - 1, n)).astype(int)
    k = kappa[idx_g, idx_l]
    g = np.asarray(gammas)[idx_g]
    if k[0] >= 0:
        return float(g[0])
    hit = np.flatnonzero(k >= 0)
    if hit.size == 0:
        return float("nan")
    i = hit[0]
    t = k[i - 1] / (k[i - 1] - k[i])
    return float(g[i - 1] + t * (g[i] - g[i - 1]))


def _kappa(grid, values, tau0, shape):
    lo, hi = hull_arrays(grid, values, [tau0], strict=False)
    return np.minimum(hi[:, 0], -lo[:, 0]).reshape(shape)


def _wald_qte(res, s0, taus, alpha):
    """Wald interval for the QTE hull: endpoint estimates plus/minus normal margins."""
    z = norm.ppf(1.0 - alpha / 2.0)
    n = res.eif.phi.shape[0]
    lo, hi = np.empty(len(taus)), np.empty(len(taus))
    for i, t in enumerate(taus):
        q1p, _, _, f1p = wald_quantile_ci(res.process, res.eif.phi, t, 1, s0, "+", alpha)
        q0m, _, _, f0m = wald_quantile_ci(res.process, res.eif.phi, t, 0, s0, "-", alpha)
        q1m, _, _, f1m = wald_quantile_ci(res.process, res.eif.phi, t, 1, s0, "-", alpha)
        q0p, _, _, f0p = wald_quantile_ci(res.process, res.eif.phi, t, 0, s0, "+", alpha)
        se_hi = np.std(f1p - f0m, ddof=1) / np.sqrt(n)
        se_lo = np.std(f1m - f0p, ddof=1) / np.sqrt(n)
        lo[i] = q1m - q0p - z * se_lo
        hi[i] = q1p - q0m + z * se_hi
    return lo, hi


def run_nonregular(cfg: NonregularConfig = NonregularConfig(), dgp=None) -> MetricsReport:
    dgp = dgp if dgp is not None else gen_nonregular_dgp()
    t0 = time.time()
    grid = dgp.grid(cfg.grid_size)
    g = grid.values
    taus = np.asarray(cfg.taus)
    s0 = dgp.s0
    gammas, lams, points = sensitivity_mesh(cfg.s_rect, cfg.mesh)
    shape = (len(gammas), len(lams))
    oracle_mesh = dgp.oracle(grid, points)
    kappa_true = _kappa(g, oracle_mesh.values, cfg.tau0, shape)
    nonref_true = kappa_true >= 0.0
    front_true = zero_level_points(gammas, lams, kappa_true)
    tip_true = tipping_point(gammas, lams, kappa_true)
    truth = dgp.true_qte(grid, taus)
    oracle_s0 = dgp.oracle(grid, [s0])

    report = MetricsReport("nonregular", config=asdict(cfg))
    report.config["oracle_tip"] = tip_true
    report.config["oracle_nonrefuting_share"] = float(nonref_true.mean())
    sub_methods = [m for m in cfg.methods if m.startswith("sub")]
    for n1 in cfg.sizes:
        n0 = int(round(cfg.target_ratio * n1))
        acc = {m: {"qte": [], "width": [], "front": [], "haus": [], "cdf": []} for m in sub_methods}
        acc["wald"] = {"qte": [], "width": [], "floor": 0}
        tip_err, hull_in = [], []
        for b in range(cfg.reps):
            report.attempts += 1
            rng = _rng(cfg.seed, n1, b)
            try:
                data = dgp.sample(n1, n0, rng, grid)
                nuis = estimate_nuisances(data, grid, cfg.k_folds, cfg.eta, rng=rng)
                mesh_vals = one_step_mesh(data, nuis, gammas, lams)
                kappa_hat = _kappa(g, mesh_vals, cfg.tau0, shape)
                res = one_step_estimate(data, nuis, [s0], keep_phi="wald" in cfg.methods)
                psi_s0 = res.process.values

                def pipeline(sub, seed):
                    nu = estimate_nuisances(sub, grid, cfg.k_folds, cfg.eta, rng=np.random.default_rng(seed))
                    mv = one_step_mesh(sub, nu, gammas, lams)
                    ps = one_step_estimate(sub, nu, [s0]).process.values
                    return np.concatenate([_kappa(g, mv, cfg.tau0, shape).ravel(), ps.ravel()])

                full = np.concatenate([kappa_hat.ravel(), psi_s0.ravel()])
                crit = {}
                for m in sub_methods:
                    expo = float(m[3:])
                    msize = subsample_size(data.n, expo)
                    crit[m] = subsample_critical(data, pipeline, msize, cfg.n_draws, cfg.alpha, full_value=full,
                                                 rng=_rng(cfg.seed, n1, b, int(expo * 100)),
                                                 blocks=[slice(0, kappa_hat.size), slice(kappa_hat.size, None)])
            except (ValueError, ArithmeticError, RuntimeError) as exc:
                report.failures += 1
                log.info("replication %d at n1=%d failed: %s", b, n1, exc)
                continue
            tip_err.append(abs(tipping_point(gammas, lams, kappa_hat) - tip_true))
            p_lo, p_hi = hull_arrays(g, res.plugin, taus, strict=False)
            for m in sub_methods:
                d_k, c_psi = crit[m]
                bands = build_bands(res.process, c_psi, data.n, cfg.alpha)
                lo, hi = outer_band_arrays(bands, taus)
                a = acc[m]
                a["qte"].append(bool(np.all((lo[0] <= truth) & (truth <= hi[0]))))
                a["width"].append(float(np.mean(hi[0] - lo[0])))
                a["cdf"].append(bool(bands.contains(oracle_s0.values)[0]))
                shift = d_k / np.sqrt(data.n)
                outer = kappa_hat + shift >= 0.0
                a["front"].append(bool(np.all(outer[nonref_true])))
                pts = zero_level_points(gammas, lams, kappa_hat + shift)
                try:
                    a["haus"].append(hausdorff(pts, front_true))
                except EmptySetError:
                    a["haus"].append(float("nan"))
            if "wald" in cfg.methods:
                try:
                    w_lo, w_hi = _wald_qte(res, s0, taus, cfg.alpha)
                    acc["wald"]["qte"].append(bool(np.all((w_lo <= truth) & (truth <= w_hi))))
                    acc["wald"]["width"].append(float(np.mean(w_hi - w_lo)))
                except DensityFloorError:
                    # no regular Wald interval exists; counted as a miss
                    acc["wald"]["floor"] += 1
                    acc["wald"]["qte"].append(False)
        for m in sub_methods:
            a = acc[m]
            reps = len(a["qte"])
            row = {"n1": n1, "n0": n0, "method": f"subsample m=n^{m[3:]}", "reps": reps}
            row.update(_coverage(a["qte"], "qte_cover", reps))
            row.update(_coverage(a["cdf"], "cdf_cover", reps))
            row.update(_coverage(a["front"], "frontier_outer", reps))
            row["qte_width"] = float(np.mean(a["width"])) if reps else float("nan")
            h = np.array(a["haus"], float)
            row["hausdorff"] = float(np.nanmean(h)) if np.any(np.isfinite(h)) else float("nan")
            row["hausdorff_missing"] = int(np.sum(~np.isfinite(h)))
            row["plugin_tip_err"] = float(np.mean(tip_err)) if tip_err else float("nan")
            report.rows.append(row)
        if "wald" in cfg.methods:
            a = acc["wald"]
            reps = len(a["qte"])
            row = {"n1": n1, "n0": n0, "method": "wald", "reps": reps, "density_floor_hits": a["floor"]}
            row.update(_coverage(a["qte"], "qte_cover", reps))
            row["qte_width"] = float(np.mean(a["width"])) if a["width"] else float("nan")
            report.rows.append(row)
    report.runtime = time.time() - t0
    return report


# ---------------------------------------------------------------------------
# propensity-stress ablation


@dataclass
class AblationConfig:
    n1: int = 1600
    reps: int = 100
    seed: int = 99
    s0: tuple = (8.0, 1.10)
    grid_size: int = 61
    taus: tuple = TAUS
    k_folds: int = 5
    eta: float = 0.05
    target_ratio: float = 1.5


def run_ablation(cfg: AblationConfig = AblationConfig()) -> MetricsReport:
    """Endpoint RMSE of each variant when the propensity model ignores the covariate.

    The pooled propensity is misspecified, so only the full score's
    propensity term removes the resulting first-order bias.
    """
    t0 = time.time()
    dgp = gen_regular_dgp(s0=cfg.s0)
    grid = dgp.grid(cfg.grid_size)
    taus = np.asarray(cfg.taus)
    s0 = dgp.s0
    oracle = dgp.oracle(grid, [s0])
    o_lo, o_hi = hull_arrays(grid.values, oracle.values, taus)
    truth = dgp.true_qte(grid, taus)
    groups = np.zeros(dgp.n_cells, dtype=np.int64)
    variants = [Variant.FULL, Variant.PLUGIN, Variant.NOGE, Variant.POINT]
    rmse = {v: [] for v in variants}
    report = MetricsReport("ablation", config=asdict(cfg))
    n0 = int(round(cfg.target_ratio * cfg.n1))
    for b in range(cfg.reps):
        report.attempts += 1
        rng = _rng(cfg.seed, b)
        try:
            data = dgp.sample(cfg.n1, n0, rng, grid)
            nuis = estimate_nuisances(data, grid, cfg.k_folds, cfg.eta, rng=rng, propensity_groups=groups)
            for v in variants:
                proc = one_step_estimate(data, nuis, [s0], v).process
                lo, hi = hull_arrays(grid.values, np.clip(proc.values, 0.0, 1.0), taus, strict=False)
                if v is Variant.POINT:
                    err = np.concatenate([lo[0] - truth, hi[0] - truth])
                else:
                    err = np.concatenate([lo[0] - o_lo[0], hi[0] - o_hi[0]])
                rmse[v].append(float(np.sqrt(np.mean(err ** 2))))
        except (ValueError, ArithmeticError) as exc:
            report.failures += 1
            log.info("ablation replication %d failed: %s", b, exc)
    full = np.array(rmse[Variant.FULL])
    for v in variants:
        r = np.array(rmse[v])
        row = {"method": v.value, "n1": cfg.n1, "reps": r.size, "endpoint_rmse": float(np.mean(r))}
        if v is not Variant.FULL and r.size:
            row["share_rmse_ge_full"] = float(np.mean(r >= full))
        report.rows.append(row)
    report.runtime = time.time() - t0
    return report


def run_study(experiment, sizes=None, reps: int = 100, seed: Optional[int] = None, full: bool = False,
              methods=None, **overrides) -> MetricsReport:
    """Dispatch to the audit (1), regular (2) or nonregular (4) study.

    ``full`` switches to the larger replication counts and resampling draws.
    """
    exp = str(experiment)
    if exp == "1":
        n_cases = 6000 if full else overrides.get("n_cases", 500)
        res = run_audit(n_cases=n_cases, seed=7 if seed is None else seed,
                        n_algebraic=200000 if full else overrides.get("n_algebraic", 20000))
        return MetricsReport("audit", rows=[res], config={"n_cases": n_cases})
    if exp == "2":
        cfg = RegularConfig(reps=300 if full else reps, **overrides)
        if sizes:
            cfg.sizes = tuple(sizes)
        if seed is not None:
            cfg.seed = seed
        if reps < 50 and not full:
            log.warning("fewer than 50 replications; coverage numbers are indicative only")
        rep = run_regular(cfg)
    elif exp == "4":
        cfg = NonregularConfig(reps=300 if full else reps, **overrides)
        if full:
            cfg.n_draws = 149
            cfg.methods = ("sub0.6", "sub0.7", "wald")
        if methods:
            cfg.methods = tuple(methods)
        if sizes:
            cfg.sizes = tuple(sizes)
        if seed is not None:
            cfg.seed = seed
        rep = run_nonregular(cfg)
    elif exp in ("ablation", "3"):
        cfg = AblationConfig(reps=reps, **overrides)
        if seed is not None:
            cfg.seed = seed
        rep = run_ablation(cfg)
    else:
        raise ConfigError(f"unknown experiment {experiment!r}")
    rep.check()
    return rep
