"""Finite-cell nuisance estimation and the cross-fitted one-step estimator.

All sums run over sufficient statistics: per (fold, cell, arm) counts and
cumulative outcome histograms on the threshold grid.  Per-observation
influence values are only materialized on request.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .bounds import CdfBoundProcess, CellNuisances, ThresholdGrid
from .envelope import POINT, SIDES, DomainError, SensitivityPair, nested_kernel

log = logging.getLogger(__name__)


class SupportError(ValueError):
    """A covariate cell carries target mass but no source observations."""


class EmptyArmError(ValueError):
    """A cell-arm stratum needed for estimation has no observations at all."""


class Variant(enum.Enum):
    FULL = "full"
    PLUGIN = "plugin"
    NOGE = "noge"
    POINT = "point"

    @classmethod
    def parse(cls, value):
        if isinstance(value, Variant):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"dml": "full", "onestep": "full", "plugin": "plugin", "noge": "noge", "point": "point"}
        return cls(aliases.get(key, key))


@dataclass(frozen=True)
class TwoSampleData:
    """Pooled source (``r == 1``) and target (``r == 0``) rows.

    ``x`` holds integer cell ids in ``range(n_cells)``.  Target rows carry
    ``a = -1`` and ``y = nan``.
    """

    r: np.ndarray
    x: np.ndarray
    a: np.ndarray
    y: np.ndarray
    n_cells: int

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.int64)
        x = np.asarray(self.x, dtype=np.int64)
        a = np.asarray(self.a, dtype=np.int64).copy()
        y = np.asarray(self.y, dtype=float).copy()
        n = r.size
        if not (x.size == a.size == y.size == n):
            raise DomainError("columns have different lengths")
        if np.any((r != 0) & (r != 1)):
            raise DomainError("r must be 0 or 1")
        if np.any((x < 0) | (x >= self.n_cells)):
            raise DomainError("cell id out of range")
        src = r == 1
        if np.any((a[src] != 0) & (a[src] != 1)) or np.any(~np.isfinite(y[src])):
            raise DomainError("source rows need a in {0, 1} and a finite y")
        a[~src] = -1
        y[~src] = np.nan
        if src.sum() < 1 or (~src).sum() < 1:
            raise DomainError("need at least one source and one target row")
        for name, val in (("r", r), ("x", x), ("a", a), ("y", y)):
            val.flags.writeable = False
            object.__setattr__(self, name, val)

    @property
    def n(self) -> int:
        return self.r.size

    @property
    def n0(self) -> int:
        return int(np.sum(self.r == 0))

    @property
    def n1(self) -> int:
        return int(np.sum(self.r == 1))

    def subset(self, idx) -> "TwoSampleData":
        idx = np.asarray(idx)
        return TwoSampleData(self.r[idx], self.x[idx], self.a[idx], self.y[idx], self.n_cells)


def assign_folds(r, k_folds: int, rng: np.random.Generator) -> np.ndarray:
    """Random fold labels, balanced within each sample."""
    if k_folds < 2:
        raise DomainError("need at least 2 folds")
    r = np.asarray(r)
    folds = np.empty(r.size, dtype=np.int64)
    for val in (0, 1):
        idx = np.flatnonzero(r == val)
        folds[rng.permutation(idx)] = np.arange(idx.size) % k_folds
    return folds


def grid_index(y, grid: np.ndarray) -> np.ndarray:
    """Smallest grid index ``j`` with ``y <= grid[j]`` so that ``1(y <= grid[j]) == (j >= idx)``."""
    y = np.asarray(y, dtype=float)
    if np.any(y > grid[-1] + 1e-12):
        raise DomainError("outcome above the top grid point; extend the grid")
    return np.searchsorted(grid, y - 1e-12, side="left")


@dataclass
class SampleStats:
    """Counts per fold: target cells, source cell-arms and cumulative outcome counts."""

    target: np.ndarray  # (K, J)
    source_arm: np.ndarray  # (K, J, 2)
    cum: np.ndarray  # (K, 2, J, G): rows with y <= grid[g]

    @property
    def source(self) -> np.ndarray:
        return self.source_arm.sum(axis=2)

    @classmethod
    def build(cls, data: TwoSampleData, folds: np.ndarray, k_folds: int, grid: np.ndarray):
        J, G = data.n_cells, grid.size
        tgt = data.r == 0
        target = np.zeros((k_folds, J))
        np.add.at(target, (folds[tgt], data.x[tgt]), 1.0)
        src = ~tgt
        ks, xs, arms = folds[src], data.x[src], data.a[src]
        source_arm = np.zeros((k_folds, J, 2))
        np.add.at(source_arm, (ks, xs, arms), 1.0)
        hist = np.zeros((k_folds, 2, J, G))
        np.add.at(hist, (ks, arms, xs, grid_index(data.y[src], grid)), 1.0)
        return cls(target, source_arm, np.cumsum(hist, axis=-1))


@dataclass
class NuisanceSet:
    """Cross-fitted nuisances; slot ``k`` is trained without fold ``k``.

    Shapes: ``e1`` (K, J), ``p`` (K, 2, J, G), ``omega`` (K, J).  ``chi`` is 1
    for an observational source and 0 when the propensity is known.
    """

    grid: np.ndarray
    folds: np.ndarray
    e1: np.ndarray
    p: np.ndarray
    omega: np.ndarray
    target_weights: np.ndarray
    source_weights: np.ndarray
    pi0: float
    pi1: float
    chi: int = 1
    eta: float = 0.05
    warnings: list = field(default_factory=list)

    @property
    def k_folds(self) -> int:
        return self.e1.shape[0]

    def fold(self, k: int) -> CellNuisances:
        return CellNuisances(self.e1[k], self.p[k], self.target_weights[k], self.source_weights[k])

    @classmethod
    def from_cells(cls, cells: CellNuisances, grid, data: TwoSampleData, chi: int = 1) -> "NuisanceSet":
        """Single-slot nuisance set holding fixed (e.g. true) values for every row."""
        grid = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, float)
        omega = np.where(cells.source_weights > 0, cells.target_weights / np.where(cells.source_weights > 0, cells.source_weights, 1.0), 0.0)
        return cls(grid, np.zeros(data.n, dtype=np.int64), cells.e1[None].copy(), cells.p[None].copy(),
                   omega[None], cells.target_weights[None].copy(), cells.source_weights[None].copy(),
                   data.n0 / data.n, data.n1 / data.n, chi, 0.0)


def _safe_div(num, den):
    return num / np.where(den > 0, den, 1.0)


def estimate_nuisances(data: TwoSampleData, grid, k_folds: int = 5, eta: float = 0.05,
                       rng: Optional[np.random.Generator] = None, folds: Optional[np.ndarray] = None,
                       known_e1: Optional[np.ndarray] = None, propensity_groups: Optional[np.ndarray] = None
                       ) -> NuisanceSet:
    """Fold-complement cell proportions, propensities and empirical arm CDFs.

    ``known_e1`` switches to the known-design mode (``chi = 0``).
    ``propensity_groups`` maps cells to coarser groups used only for the
    propensity fit; a misspecified propensity model for stress tests.
    """
    grid = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, float)
    if not 0.0 <= eta < 0.5:
        raise DomainError("eta must lie in [0, 0.5)")
    if folds is None:
        folds = assign_folds(data.r, k_folds, rng if rng is not None else np.random.default_rng(0))
    else:
        folds = np.asarray(folds, dtype=np.int64)
        k_folds = int(folds.max()) + 1
    if k_folds < 2:
        raise DomainError("need at least 2 folds")
    J = data.n_cells
    st = SampleStats.build(data, folds, k_folds, grid)
    tot_t = st.target.sum(0)
    tot_sa = st.source_arm.sum(0)
    tot_s = tot_sa.sum(1)
    tot_cum = st.cum.sum(0)
    if np.any((tot_t > 0) & (tot_s == 0)):
        bad = np.flatnonzero((tot_t > 0) & (tot_s == 0)).tolist()
        raise SupportError(f"target cells {bad} have no source observations")
    empty_arm = (tot_t[:, None] > 0) & (tot_sa == 0)
    if np.any(empty_arm):
        bad = [tuple(v) for v in np.argwhere(empty_arm).tolist()]
        raise EmptyArmError(f"(cell, arm) strata {bad} have no source observations")

    tr_t = tot_t[None] - st.target
    tr_sa = tot_sa[None] - st.source_arm
    tr_s = tr_sa.sum(2)
    tr_cum = tot_cum[None] - st.cum
    notes = []

    # empty training strata borrow the all-fold estimate
    miss_arm = tr_sa == 0
    if np.any(miss_arm & (tot_sa[None] > 0)):
        notes.append(f"{int(np.sum(miss_arm & (tot_sa[None] > 0)))} empty fold-cell-arm strata borrowed all-fold CDFs")
    counts = np.where(miss_arm, tot_sa[None], tr_sa)  # (K, J, 2)
    cums = np.where(np.moveaxis(miss_arm, 2, 1)[..., None], tot_cum[None], tr_cum)  # (K, 2, J, G)
    p = _safe_div(cums, np.moveaxis(counts, 2, 1)[..., None])
    # strata empty everywhere only occur in cells without target mass; fill with the pooled arm CDF
    pooled = _safe_div(tot_cum.sum(1), tot_sa.sum(0)[:, None])  # (2, G)
    dead = np.moveaxis(counts, 2, 1) == 0
    p = np.where(dead[..., None], pooled[None, :, None, :], p)
    p[..., -1] = 1.0

    ws1 = _safe_div(tr_s, tr_s.sum(1, keepdims=True))
    ws0 = _safe_div(tr_t, tr_t.sum(1, keepdims=True))
    miss_cell = (ws1 == 0) & (tot_s[None] > 0)
    if np.any(miss_cell & (tot_t[None] > 0)):
        notes.append("empty fold-cell source strata borrowed all-fold cell shares")
    ws1 = np.where(miss_cell, (tot_s / tot_s.sum())[None], ws1)
    omega = _safe_div(ws0, ws1) * (ws1 > 0)

    if known_e1 is not None:
        e1 = np.broadcast_to(np.asarray(known_e1, float), (k_folds, J)).copy()
        chi = 0
    else:
        if propensity_groups is None:
            groups = np.arange(J)
        else:
            groups = np.asarray(propensity_groups, dtype=np.int64)
        n_g = int(groups.max()) + 1
        g_tr = np.zeros((k_folds, n_g, 2))
        g_tot = np.zeros((n_g, 2))
        for j in range(J):
            g_tr[:, groups[j]] += np.where(tr_s[:, j, None] > 0, tr_sa[:, j], 0.0)
            g_tot[groups[j]] += tot_sa[j]
        g_tr = np.where(g_tr.sum(2, keepdims=True) > 0, g_tr, g_tot[None])
        share = _safe_div(g_tr[..., 1], g_tr.sum(2))
        e1 = share[:, groups]
        chi = 1
    e1 = np.clip(e1, eta, 1.0 - eta)
    for msg in notes:
        log.info(msg)
    return NuisanceSet(grid, folds, e1, p, omega, ws0, ws1, data.n0 / data.n, data.n1 / data.n, chi, eta, notes)


# ---------------------------------------------------------------------------
# influence function and one-step estimator


def _s_arrays(s_points):
    gam = np.array([s.gamma for s in s_points])[:, None, None, None]
    lam = np.array([s.lam for s in s_points])[:, None, None, None]
    return gam, lam


def zeta_source_residual(a_obs: int, y_obs: float, a: int, y_thr: float, p_ax: float, e_ax: float,
                         d_p: float, d_e: float, chi: int) -> float:
    """Source residual of the canonical gradient for one observation.

    ``d_p`` and ``d_e`` are the partial derivatives of the nested map at
    ``(p_ax, e_ax)``; ``e_ax`` is the propensity of arm ``a``.
    """
    hit = 1.0 if a_obs == a else 0.0
    out = d_p * hit / e_ax * ((1.0 if y_obs <= y_thr else 0.0) - p_ax)
    if chi:
        out += d_e * (hit - e_ax)
    return out


@dataclass
class EifEvaluation:
    """Per-observation influence values ``phi[i, a, side, s, y]``.

    ``target_part`` and ``source_part`` split ``phi`` by sample.
    """

    phi: np.ndarray
    is_target: np.ndarray
    chi: int

    @property
    def target_part(self) -> np.ndarray:
        return np.where(self.is_target[:, None, None, None, None], self.phi, 0.0)

    @property
    def source_part(self) -> np.ndarray:
        return np.where(self.is_target[:, None, None, None, None], 0.0, self.phi)

    def for_s(self, j: int) -> np.ndarray:
        """``(n, 2 * 2 * G)`` slice for one sensitivity point."""
        sub = self.phi[:, :, :, j, :]
        return sub.reshape(sub.shape[0], -1)


@dataclass
class OneStepResult:
    process: CdfBoundProcess
    eif: Optional[EifEvaluation]
    tie: np.ndarray  # (2, 2, S, G) any active-set tie among relevant cells
    plugin: np.ndarray  # (2, 2, S, G) target-sample average of the plug-in bounds


def _one_step_numpy(st: SampleStats, nuis: NuisanceSet, s_points, n0, n1, chi, augment, relevant, keep_phi):
    """Reference implementation with numpy broadcasting; also yields the pieces needed for ``phi``."""
    gam, lam = _s_arrays(s_points)
    S, G = len(s_points), nuis.grid.size
    plugin = np.empty((2, 2, S, G))
    psi = np.empty((2, 2, S, G))
    tie_out = np.zeros((2, 2, S, G), dtype=bool)
    keep = []
    for a in (0, 1):
        e_a = nuis.e1 if a == 1 else 1.0 - nuis.e1  # (K, J)
        p_a = nuis.p[:, a]  # (K, J, G)
        n_arm = st.source_arm[:, :, a]  # (K, J)
        for si, side in enumerate(SIDES):
            val, d_p, d_e, tie = nested_kernel(p_a[None], e_a[None, :, :, None], gam, lam, side, derivatives=True)
            plugin[a, si] = np.einsum("skjg,kj->sg", val, st.target) / n0
            total = plugin[a, si].copy()
            if augment:
                resid = st.cum[:, a] - n_arm[..., None] * p_a  # (K, J, G)
                src = d_p * (resid / e_a[..., None])[None]
                if chi:
                    src = src + d_e * (n_arm - st.source * e_a)[None, :, :, None]
                total += np.einsum("skjg,kj->sg", src, nuis.omega) / n1
            psi[a, si] = total
            tie_out[a, si] = np.any(tie[:, :, relevant, :], axis=(1, 2))
            if keep_phi:
                keep.append((a, si, val, d_p, d_e, e_a, p_a))
    return psi, plugin, tie_out, keep


def one_step_estimate(data: TwoSampleData, nuis: NuisanceSet, s_points: Sequence[SensitivityPair],
                      variant=Variant.FULL, keep_phi: bool = False, psi_center=None,
                      compiled: bool = True) -> OneStepResult:
    """Cross-fitted one-step estimates on the full (arm, side, s, grid) index set.

    ``variant`` selects the ablations: PLUGIN drops the source augmentation,
    NOGE drops its propensity term and POINT forces ``s = (1, 1)``.
    ``psi_center`` replaces the estimate when centering ``phi`` (e.g. the
    true value when checking the gradient at the truth).
    """
    variant = Variant.parse(variant)
    if variant is Variant.POINT:
        s_points = [POINT]
    s_points = tuple(s_points)
    grid = nuis.grid
    st = SampleStats.build(data, nuis.folds, nuis.k_folds, grid)
    n0, n1 = data.n0, data.n1
    chi = 0 if variant is Variant.NOGE else nuis.chi
    augment = variant is not Variant.PLUGIN
    relevant = (st.target.sum(0) + st.source.sum(0)) > 0
    keep = []
    if compiled and not keep_phi:
        from ._kernels import one_step_sums
        gam = np.array([s.gamma for s in s_points])
        lam = np.array([s.lam for s in s_points])
        psi, plugin, tie_out = one_step_sums(
            np.ascontiguousarray(nuis.p), nuis.e1, nuis.omega, st.target, st.source_arm,
            np.ascontiguousarray(st.cum), gam, lam, float(n0), float(n1), bool(chi), augment, relevant)
    else:
        psi, plugin, tie_out, keep = _one_step_numpy(st, nuis, s_points, n0, n1, chi, augment, relevant, keep_phi)
    proc = CdfBoundProcess(grid, s_points, psi, meta={"variant": variant.value, "chi": chi})
    eif = None
    if keep_phi:
        center = psi if psi_center is None else np.asarray(psi_center)
        eif = _materialize_phi(data, nuis, keep, center, chi, augment, len(s_points), grid.size)
    return OneStepResult(proc, eif, tie_out, plugin)


def _materialize_phi(data, nuis, keep, center, chi, augment, S, G) -> EifEvaluation:
    n = data.n
    tgt = data.r == 0
    src = ~tgt
    k_i, x_i = nuis.folds, data.x
    phi = np.zeros((n, 2, 2, S, G))
    yi = np.full(n, G)
    yi[src] = grid_index(data.y[src], nuis.grid)
    below = np.arange(G)[None, :] >= yi[src][:, None]  # (n1, G)
    for a, si, val, d_p, d_e, e_a, p_a in keep:
        kt, xt = k_i[tgt], x_i[tgt]
        b = val[:, kt, xt, :]  # (S, n0, G)
        phi[tgt, a, si] = np.moveaxis(b - center[a, si][:, None, :], 0, 1) / nuis.pi0
        if not augment:
            continue
        ks, xs = k_i[src], x_i[src]
        hit = (data.a[src] == a).astype(float)
        e = e_a[ks, xs]
        w = nuis.omega[ks, xs] / nuis.pi1
        res = hit[:, None] / e[:, None] * (below - p_a[ks, xs])  # (n1, G)
        z = d_p[:, ks, xs, :] * res[None]
        if chi:
            z = z + d_e[:, ks, xs, :] * (hit - e)[None, :, None]
        phi[src, a, si] = np.moveaxis(z, 0, 1) * w[:, None, None]
    return EifEvaluation(phi, tgt, chi)


def ablation_estimates(data: TwoSampleData, nuis: NuisanceSet, s_points, variant) -> CdfBoundProcess:
    return one_step_estimate(data, nuis, s_points, variant).process


def fit_process(data: TwoSampleData, grid, s_points, k_folds: int = 5, eta: float = 0.05,
                seed: int = 0, variant=Variant.FULL, known_e1=None, propensity_groups=None,
                keep_phi: bool = False) -> OneStepResult:
    """Nuisance fit followed by the one-step estimator; the pipeline used by resampling."""
    rng = np.random.default_rng(seed)
    nuis = estimate_nuisances(data, grid, k_folds, eta, rng=rng, known_e1=known_e1,
                              propensity_groups=propensity_groups)
    return one_step_estimate(data, nuis, s_points, variant, keep_phi=keep_phi)


# ---------------------------------------------------------------------------
# population score (orthogonality diagnostics)


def expected_score(truth: CellNuisances, working: CellNuisances, s: SensitivityPair, chi: int = 1) -> np.ndarray:
    """Population mean of the estimating equation at ``working`` nuisances.

    Returns ``E{b(working) | R=0} + E{omega * zeta(working) | R=1} - psi(truth)``
    with shape ``(2, 2, G)``; zero at ``working == truth``.
    """
    out = np.empty((2, 2, truth.p.shape[-1]))
    w0 = truth.target_weights
    w1 = truth.source_weights
    omega_w = working.omega
    omega_w = np.where(np.isfinite(omega_w), omega_w, 0.0)
    for a in (0, 1):
        e_t, e_w = truth.e(a), working.e(a)
        p_t, p_w = truth.p[a], working.p[a]
        for si, side in enumerate(SIDES):
            b_t = nested_kernel(p_t, e_t[:, None], s.gamma, s.lam, side)
            b_w, d_p, d_e, _ = nested_kernel(p_w, e_w[:, None], s.gamma, s.lam, side, derivatives=True)
            zeta = d_p / e_w[:, None] * e_t[:, None] * (p_t - p_w)
            if chi:
                zeta = zeta + d_e * (e_t - e_w)[:, None]
            out[a, si] = w0 @ b_w + (w1 * omega_w) @ zeta - w0 @ b_t
    return out


def perturb(cells: CellNuisances, t: float, h_p: np.ndarray, h_e: np.ndarray, h_w: np.ndarray) -> CellNuisances:
    """Move ``(p, e1, target weights)`` along a direction, keeping them valid laws."""
    p = np.clip(cells.p + t * h_p, 0.0, 1.0)
    p = np.maximum.accumulate(p, axis=-1)
    p[..., -1] = 1.0
    e1 = np.clip(cells.e1 + t * h_e, 1e-6, 1 - 1e-6)
    w = cells.target_weights * np.exp(t * h_w)
    return replace(cells, p=p, e1=e1, target_weights=w / w.sum())


def one_step_mesh(data: TwoSampleData, nuis: NuisanceSet, gammas, lams) -> np.ndarray:
    """Full one-step values on a sensitivity mesh, shape ``(2, 2, nG * nL, G)``.

    Rows follow :func:`qtb.bounds.sensitivity_mesh` ordering (gamma major).
    """
    from ._kernels import mesh_sums
    st = SampleStats.build(data, nuis.folds, nuis.k_folds, nuis.grid)
    out = mesh_sums(np.ascontiguousarray(nuis.p), nuis.e1, nuis.omega, st.target, st.source_arm,
                    np.ascontiguousarray(st.cum), np.asarray(gammas, float), np.asarray(lams, float),
                    float(data.n0), float(data.n1), bool(nuis.chi))
    out = np.moveaxis(out, 4, 3)  # (2, 2, nG, nL, G)
    return out.reshape(2, 2, -1, out.shape[-1])
