"""Critical values, monotone CDF bands, band inversion, Wald endpoints and frontier sets."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import norm

from .bounds import CdfBoundProcess, FrontierGrid, TailError, generalized_inverse
from .envelope import SIDES, DomainError, SensitivityPair, Side
from .estimation import TwoSampleData

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e-3


class DegenerateSubsampleError(RuntimeError):
    """Subsamples kept violating the estimator's preconditions."""


class DensityFloorError(ArithmeticError):
    """Local density estimate below the floor; the endpoint is not regular."""


class EmptySetError(ValueError):
    """Hausdorff distance requested for an empty point set."""


# ---------------------------------------------------------------------------
# critical values


def multiplier_critical(phi, alpha: float = 0.05, n_draws: int = 149,
                        rng: Optional[np.random.Generator] = None, chunk: int = 50) -> float:
    """Gaussian multiplier bootstrap quantile of ``sup |n^{-1/2} sum xi_i phi_i|``.

    ``phi`` is ``(n, m)``: observations by indices.  It is centered here.
    """
    if n_draws < 99:
        raise DomainError("need at least 99 multiplier draws")
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    if not np.all(np.isfinite(phi)):
        raise DomainError("influence matrix has non-finite entries")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = phi.shape[0]
    centered = phi - phi.mean(axis=0)
    sups = np.empty(n_draws)
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        xi = rng.standard_normal((stop - start, n))
        sups[start:stop] = np.abs(xi @ centered).max(axis=1) / np.sqrt(n)
    return float(np.quantile(sups, 1.0 - alpha))


def subsample_size(n: int, exponent: float) -> int:
    return int(np.floor(n ** exponent))


def stratified_subsample(data: TwoSampleData, m: int, rng: np.random.Generator) -> np.ndarray:
    """Row indices of a without-replacement subsample of size ``m`` split proportionally by sample."""
    idx0 = np.flatnonzero(data.r == 0)
    idx1 = np.flatnonzero(data.r == 1)
    m1 = int(round(m * idx1.size / data.n))
    m1 = min(max(m1, 1), idx1.size)
    m0 = min(max(m - m1, 1), idx0.size)
    return np.sort(np.concatenate([rng.choice(idx0, m0, replace=False), rng.choice(idx1, m1, replace=False)]))


def subsample_critical(data: TwoSampleData, pipeline: Callable[[TwoSampleData, int], np.ndarray],
                       m: int, n_draws: int = 99, alpha: float = 0.05, full_value=None,
                       rng: Optional[np.random.Generator] = None, max_retries: int = 10,
                       blocks: Optional[Sequence[slice]] = None):
    """m-out-of-n subsampling quantile of ``sqrt(m) sup |theta_m - theta_n|``.

    ``pipeline(data, seed)`` must rerun the whole estimator (nuisances
    included) and return an array of statistic values.  With ``blocks``
    the sup is taken within each slice and one critical value per block
    is returned.
    """
    n = data.n
    if m >= n:
        raise DomainError(f"subsample size m={m} must be smaller than n={n}")
    if m < 30:
        raise DomainError(f"subsample size m={m} below the minimum of 30")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta_n = np.asarray(full_value if full_value is not None else pipeline(data, 0), float)
    parts = list(blocks) if blocks is not None else [slice(None)]
    sups = np.empty((n_draws, len(parts)))
    for b in range(n_draws):
        for attempt in range(max_retries + 1):
            sub = data.subset(stratified_subsample(data, m, rng))
            try:
                theta_m = np.asarray(pipeline(sub, int(rng.integers(2**31))), float)
                break
            except (ValueError, ArithmeticError) as exc:
                log.debug("subsample %d attempt %d failed: %s", b, attempt, exc)
        else:
            raise DegenerateSubsampleError(f"subsample {b} failed {max_retries + 1} times")
        diff = np.abs(theta_m - theta_n)
        diff = np.where(np.isfinite(diff), diff, 0.0)
        sups[b] = [np.sqrt(m) * np.max(diff[part]) for part in parts]
    crit = np.quantile(sups, 1.0 - alpha, axis=0)
    return float(crit[0]) if blocks is None else tuple(float(c) for c in crit)


# ---------------------------------------------------------------------------
# bands and inversion


@dataclass
class BandSet:
    """Raw and monotone simultaneous bands for every (arm, side, s, y)."""

    grid: np.ndarray
    s_points: tuple
    critical: float
    n: int
    alpha: float
    lower_raw: np.ndarray
    upper_raw: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def s_index(self, s: SensitivityPair) -> int:
        return self.s_points.index(s)

    def contains(self, values, monotone: bool = False) -> np.ndarray:
        """Per-s indicator that ``values`` lies inside the band at every (a, side, y)."""
        lo, hi = (self.lower, self.upper) if monotone else (self.lower_raw, self.upper_raw)
        inside = (values >= lo - 1e-12) & (values <= hi + 1e-12)
        return inside.all(axis=(0, 1, 3))


def monotone_envelopes(lower_raw, upper_raw):
    """Running max from the left and running min from the right along the last axis."""
    lower = np.maximum.accumulate(lower_raw, axis=-1)
    upper = np.flip(np.minimum.accumulate(np.flip(upper_raw, axis=-1), axis=-1), axis=-1)
    return lower, upper


def build_bands(proc: CdfBoundProcess, c, n: int, alpha: float = 0.05) -> BandSet:
    """Truncated raw bands ``psi +- c / sqrt(n)`` and their monotone envelopes.

    ``c`` is a scalar or one value per sensitivity point.
    """
    c_arr = np.asarray(c, dtype=float)
    if np.any(c_arr < 0):
        raise DomainError("critical value must be nonnegative")
    shift = (c_arr.reshape(-1, 1) if c_arr.ndim else c_arr) / np.sqrt(n)
    lo_raw = np.maximum(0.0, proc.values - shift)
    hi_raw = np.minimum(1.0, proc.values + shift)
    lo, hi = monotone_envelopes(lo_raw, hi_raw)
    return BandSet(proc.grid, proc.s_points, c_arr if c_arr.ndim else float(c_arr), n, alpha,
                   lo_raw, hi_raw, lo, hi)


@dataclass(frozen=True)
class QuantileCi:
    """Confidence intervals for the lower (``minus``) and upper (``plus``) quantile bounds."""

    tau: float
    a: int
    minus_lo: float
    minus_hi: float
    plus_lo: float
    plus_hi: float
    tail_flag: bool = False


def _inv(grid, curve, tau):
    idx = np.argmax(curve >= tau - 1e-12)
    if curve[idx] < tau - 1e-12:
        return float(grid[-1]), True
    return float(grid[idx]), False


def invert_bands(bands: BandSet, tau_list, a: int, s: SensitivityPair) -> list[QuantileCi]:
    """Quantile-bound confidence intervals from the monotone envelopes.

    Lower bands that never reach ``tau`` report the top grid point and set
    ``tail_flag``.
    """
    j = bands.s_index(s)
    g = bands.grid
    up_minus, up_plus = bands.upper[a, 0, j], bands.upper[a, 1, j]
    lo_minus, lo_plus = bands.lower[a, 0, j], bands.lower[a, 1, j]
    out = []
    for tau in np.atleast_1d(tau_list):
        if not 0.0 < tau < 1.0:
            raise DomainError(f"tau must lie in (0, 1), got {tau}")
        m_lo, f1 = _inv(g, up_plus, tau)
        m_hi, f2 = _inv(g, lo_plus, tau)
        p_lo, f3 = _inv(g, up_minus, tau)
        p_hi, f4 = _inv(g, lo_minus, tau)
        out.append(QuantileCi(float(tau), a, m_lo, m_hi, p_lo, p_hi, f1 or f2 or f3 or f4))
    return out


def qte_outer_band(ci1: QuantileCi, ci0: QuantileCi) -> tuple[float, float]:
    """Outer QTE band from arm-1 and arm-0 quantile-bound intervals."""
    return ci1.minus_lo - ci0.plus_hi, ci1.plus_hi - ci0.minus_lo


def outer_band_arrays(bands: BandSet, taus) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized outer QTE band, shape ``(S, T)`` each; tail cases use the top grid point."""
    taus = np.atleast_1d(np.asarray(taus, float))
    def inv(curves):  # (S, G) -> (S, T)
        c = np.broadcast_to(curves[:, None, :], (curves.shape[0], taus.size, curves.shape[1]))
        t = np.broadcast_to(taus[None, :], c.shape[:2])
        return generalized_inverse(bands.grid, c, t, strict=False)
    m_lo1 = inv(bands.upper[1, 1])
    p_hi1 = inv(bands.lower[1, 0])
    m_lo0 = inv(bands.upper[0, 1])
    p_hi0 = inv(bands.lower[0, 0])
    return m_lo1 - p_hi0, p_hi1 - m_lo0


# ---------------------------------------------------------------------------
# Wald comparator


def local_density(grid, curve, y0: float, bandwidth: float) -> float:
    """Symmetric finite-difference slope of a CDF curve at ``y0`` (step convention)."""
    grid = np.asarray(grid, float)
    def at(y):
        j = np.searchsorted(grid, y + 1e-12, side="right") - 1
        return 0.0 if j < 0 else float(curve[min(j, grid.size - 1)])
    return (at(y0 + bandwidth) - at(y0 - bandwidth)) / (2.0 * bandwidth)


def wald_quantile_ci(proc: CdfBoundProcess, phi, tau: float, a: int, s: SensitivityPair, side,
                     alpha: float = 0.05, bandwidth: Optional[float] = None, tie: bool = False):
    """Wald interval for one quantile bound with influence ``-phi / f``.

    ``phi`` is ``(n, 2, 2, S, G)``.  Returns ``(estimate, lo, hi, influence)``.
    """
    side = Side.parse(side)
    if tie:
        raise DensityFloorError("index sits on a switch surface; not regular")
    grid = proc.grid
    h = bandwidth if bandwidth is not None else 2.0 * float(np.min(np.diff(grid)))
    j = proc.s_index(s)
    # lower quantile bound inverts the upper CDF envelope
    k = 1 if side is Side.LOWER else 0
    curve = proc.values[a, k, j]
    q = generalized_inverse(grid, curve, tau)
    f = local_density(grid, curve, q, h)
    if not f >= DENSITY_FLOOR:
        raise DensityFloorError(f"density estimate {f:.3g} below floor {DENSITY_FLOOR}")
    g_idx = int(np.searchsorted(grid, q - 1e-12))
    infl = -np.asarray(phi)[:, a, k, j, g_idx] / f
    n = infl.size
    se = float(np.std(infl, ddof=1)) / np.sqrt(n)
    z = norm.ppf(1.0 - alpha / 2.0)
    return q, q - z * se, q + z * se, infl


# ---------------------------------------------------------------------------
# frontier sets


@dataclass
class FrontierSets:
    inner: np.ndarray
    outer: np.ndarray
    outer_level: np.ndarray  # (m, 2) zero-level points of kappa + d / sqrt(n)
    caveat: str = "frontier rate conditions are not checkable from data"


def zero_level_points(gammas, lams, field_values) -> np.ndarray:
    """Boundary of ``{field >= 0}`` located on mesh edges by linear interpolation."""
    pts = []
    f = np.asarray(field_values, float)
    pos = f >= 0.0
    for axis in (0, 1):
        a = f.take(range(f.shape[axis] - 1), axis=axis)
        b = f.take(range(1, f.shape[axis]), axis=axis)
        pa = pos.take(range(f.shape[axis] - 1), axis=axis)
        pb = pos.take(range(1, f.shape[axis]), axis=axis)
        for i, j in np.argwhere(pa != pb):
            fa, fb = a[i, j], b[i, j]
            t = fa / (fa - fb) if fa != fb else 0.0
            t = min(max(t, 0.0), 1.0)
            if axis == 0:
                pts.append((gammas[i] + t * (gammas[i + 1] - gammas[i]), lams[j]))
            else:
                pts.append((gammas[i], lams[j] + t * (lams[j + 1] - lams[j])))
    return np.array(pts, dtype=float).reshape(-1, 2)


def frontier_confidence(frontier: FrontierGrid, d: float, n: int) -> FrontierSets:
    if d < 0:
        raise DomainError("critical value must be nonnegative")
    frontier.d, frontier.n = float(d), int(n)
    shift = d / np.sqrt(n)
    return FrontierSets(frontier.inner(), frontier.outer(),
                        zero_level_points(frontier.gammas, frontier.lams, frontier.kappa + shift))


def hausdorff(set_a, set_b) -> float:
    """Symmetric Hausdorff distance between finite point sets in the (gamma, lambda) plane."""
    a = np.asarray(set_a, float).reshape(-1, 2)
    b = np.asarray(set_b, float).reshape(-1, 2)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise EmptySetError("Hausdorff distance needs two nonempty sets")
    dist = cdist(a, b)
    return float(max(dist.min(axis=1).max(), dist.min(axis=0).max()))
