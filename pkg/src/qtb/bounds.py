"""Population CDF-bound process, quantile bounds, QTE hulls and the frontier scan."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .envelope import SIDES, DomainError, SensitivityPair, Side, g_nested, nested_kernel

QUANTILE_TOL = 1e-12


class MissingCellError(ValueError):
    """A covariate cell with positive target weight has no nuisance values."""


class TailError(ValueError):
    """A CDF curve never reaches the requested quantile level on the grid."""


@dataclass(frozen=True)
class ThresholdGrid:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size < 2 or np.any(np.diff(v) <= 0):
            raise DomainError("threshold grid must be strictly ascending with >= 2 points")
        object.__setattr__(self, "values", v)

    @classmethod
    def uniform(cls, lo: float, hi: float, size: int) -> "ThresholdGrid":
        return cls(np.linspace(lo, hi, size))

    @property
    def spacing(self) -> float:
        return float(np.min(np.diff(self.values)))

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class CellNuisances:
    """Nuisances on a finite covariate support.

    ``e1[x]`` is the arm-1 propensity; ``p[a, x, j]`` is the source-arm CDF at
    grid point ``j``.  Covariate weights are laws over cells.
    """

    e1: np.ndarray
    p: np.ndarray
    target_weights: np.ndarray
    source_weights: np.ndarray

    def e(self, a: int) -> np.ndarray:
        return self.e1 if a == 1 else 1.0 - self.e1

    @property
    def omega(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.source_weights > 0, self.target_weights / self.source_weights, np.inf)

    def check(self) -> None:
        need = self.target_weights > 0
        if np.any(need & (self.source_weights <= 0)):
            raise MissingCellError("target cell without source mass")
        if np.any(~np.isfinite(self.e1[need])) or np.any(~np.isfinite(self.p[:, need, :])):
            raise MissingCellError("nuisance values missing on a target-supported cell")


@dataclass
class CdfBoundProcess:
    """Values ``psi[a, side, s, y]`` of the CDF-bound process on a grid.

    Side index 0 is the lower envelope, 1 the upper.
    """

    grid: np.ndarray
    s_points: tuple
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def s_index(self, s: SensitivityPair) -> int:
        try:
            return self.s_points.index(s)
        except ValueError:
            raise KeyError(f"sensitivity point {s} not in process") from None

    def curve(self, a: int, side, s: SensitivityPair) -> np.ndarray:
        side = Side.parse(side)
        return self.values[a, SIDES.index(side), self.s_index(s)]

    def check_invariants(self, tol: float = 1e-10) -> None:
        v = self.values
        if np.any(np.diff(v, axis=-1) < -tol):
            raise AssertionError("CDF bound not monotone in y")
        if np.any(v[:, 0] > v[:, 1] + tol):
            raise AssertionError("lower envelope exceeds upper envelope")
        if np.any(np.abs(v[..., -1] - 1.0) > tol):
            raise AssertionError("terminal value differs from 1")


@dataclass(frozen=True)
class QteHull:
    tau: float
    delta_lo: float
    delta_hi: float

    @property
    def kappa(self) -> float:
        return min(self.delta_hi, -self.delta_lo)

    @property
    def width(self) -> float:
        return self.delta_hi - self.delta_lo

    def contains(self, value: float) -> bool:
        return self.delta_lo <= value <= self.delta_hi


def conditional_bound(p_ax, e_ax, s: SensitivityPair, side):
    """Conditional target CDF bound for one arm and covariate cell."""
    return g_nested(p_ax, e_ax, s, side)


def bound_values(nuis: CellNuisances, s_points: Sequence[SensitivityPair]) -> np.ndarray:
    """Array ``psi[a, side, s, y]`` for population nuisances (vectorized over s)."""
    nuis.check()
    w = nuis.target_weights
    cells = np.flatnonzero(w > 0)
    gam = np.array([s.gamma for s in s_points])[:, None, None]
    lam = np.array([s.lam for s in s_points])[:, None, None]
    n_grid = nuis.p.shape[-1]
    out = np.empty((2, 2, len(s_points), n_grid))
    for a in (0, 1):
        p = nuis.p[a, cells, :][None]
        e = nuis.e(a)[cells][None, :, None]
        for k, side in enumerate(SIDES):
            b = nested_kernel(p, e, gam, lam, side)
            out[a, k] = np.einsum("sxy,x->sy", b, w[cells])
    return out


def marginal_cdf_bounds(nuis: CellNuisances, grid, s_points: Sequence[SensitivityPair]) -> CdfBoundProcess:
    """Sharp target CDF envelopes: target-weighted mixtures of conditional bounds."""
    grid = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, dtype=float)
    if nuis.p.shape[-1] != grid.size:
        raise DomainError("nuisance CDFs and grid have different lengths")
    s_points = tuple(s_points)
    return CdfBoundProcess(grid, s_points, bound_values(nuis, s_points))


# ---------------------------------------------------------------------------
# quantile inversion


def first_crossing_index(values, tau, strict: bool = True):
    """Index of the first grid point where ``values >= tau`` (last axis).

    When ``strict`` is False, curves that never reach ``tau`` get index
    ``-1``; otherwise :class:`TailError` is raised.
    """
    values = np.asarray(values, dtype=float)
    hit = values >= np.asarray(tau, dtype=float)[..., None] - QUANTILE_TOL if np.ndim(tau) else values >= tau - QUANTILE_TOL
    idx = np.argmax(hit, axis=-1)
    reached = np.take_along_axis(hit, idx[..., None], axis=-1)[..., 0]
    if np.all(reached):
        return idx
    if strict:
        raise TailError(f"curve never reaches tau={tau}")
    return np.where(reached, idx, -1)


def generalized_inverse(grid, values, tau, strict: bool = True):
    """``inf{y in grid: values(y) >= tau}`` for (stacks of) curves on a grid."""
    grid = np.asarray(grid, dtype=float)
    idx = first_crossing_index(values, tau, strict)
    out = grid[np.where(idx < 0, grid.size - 1, idx)]
    return float(out) if np.ndim(out) == 0 else out


def quantile_bounds(proc: CdfBoundProcess, tau: float, a: int, s: SensitivityPair) -> tuple[float, float]:
    """Sharp quantile bounds: invert the upper envelope for the lower bound and vice versa."""
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    lo = generalized_inverse(proc.grid, proc.curve(a, Side.UPPER, s), tau)
    hi = generalized_inverse(proc.grid, proc.curve(a, Side.LOWER, s), tau)
    return lo, hi


def hull_arrays(grid, values, taus, strict: bool = True):
    """QTE hull endpoints for every sensitivity point and quantile level.

    ``values`` has shape ``(2, 2, S, G)``; returns ``(delta_lo, delta_hi)`` of
    shape ``(S, T)``.
    """
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    v = np.asarray(values)[..., None, :]  # (2, 2, S, 1, G)
    t = np.broadcast_to(taus[:, None], v.shape[:-2] + (taus.size, 1))[..., 0]
    q = generalized_inverse(grid, np.broadcast_to(v, v.shape[:-2] + (taus.size, v.shape[-1])), t, strict)
    # q[a, side, s, tau]: side 0 (lower CDF) gives the upper quantile bound
    q_minus = q[:, 1]
    q_plus = q[:, 0]
    delta_lo = q_minus[1] - q_plus[0]
    delta_hi = q_plus[1] - q_minus[0]
    return delta_lo, delta_hi


def qte_hull(proc: CdfBoundProcess, tau: float, s: SensitivityPair) -> QteHull:
    q1_lo, q1_hi = quantile_bounds(proc, tau, 1, s)
    q0_lo, q0_hi = quantile_bounds(proc, tau, 0, s)
    return QteHull(float(tau), q1_lo - q0_hi, q1_hi - q0_lo)


# ---------------------------------------------------------------------------
# sensitivity frontier


@dataclass
class FrontierGrid:
    """Non-refutation function ``kappa`` on a (gamma, lambda) mesh.

    ``kappa[i, j]`` belongs to ``(gammas[i], lams[j])``.  Confidence sets need
    a critical value ``d`` and sample size ``n``.
    """

    gammas: np.ndarray
    lams: np.ndarray
    kappa: np.ndarray
    tau: float
    d: Optional[float] = None
    n: Optional[int] = None

    @property
    def nodes(self) -> np.ndarray:
        g, l = np.meshgrid(self.gammas, self.lams, indexing="ij")
        return np.stack([g.ravel(), l.ravel()], axis=1)

    def non_refuting(self) -> np.ndarray:
        return self.kappa >= 0.0

    def _shift(self) -> float:
        if self.d is None or self.n is None:
            raise ValueError("frontier has no critical value attached")
        return self.d / np.sqrt(self.n)

    def inner(self) -> np.ndarray:
        return self.kappa - self._shift() >= 0.0

    def outer(self) -> np.ndarray:
        return self.kappa + self._shift() >= 0.0


def sensitivity_mesh(s_rect=(1.0, 4.0, 1.0, 3.0), mesh=(31, 31)):
    g_lo, g_hi, l_lo, l_hi = s_rect
    n_g, n_l = mesh
    if n_g < 2 or n_l < 2:
        raise DomainError("mesh needs at least 2 nodes per axis")
    gammas = np.linspace(g_lo, g_hi, n_g)
    lams = np.linspace(l_lo, l_hi, n_l)
    points = [SensitivityPair(g, l) for g in gammas for l in lams]
    return gammas, lams, points


def frontier_scan(proc_builder: Callable[[list], CdfBoundProcess], tau: float,
                  s_rect=(1.0, 4.0, 1.0, 3.0), mesh=(31, 31)) -> FrontierGrid:
    """Evaluate ``kappa`` at every mesh node from one process instance."""
    gammas, lams, points = sensitivity_mesh(s_rect, mesh)
    proc = proc_builder(points)
    lo, hi = hull_arrays(proc.grid, proc.values, [tau])
    kappa = np.minimum(hi[:, 0], -lo[:, 0]).reshape(len(gammas), len(lams))
    return FrontierGrid(gammas, lams, kappa, float(tau))
