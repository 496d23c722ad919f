"""Finite-cell data-generating processes with exact sensitivity-model truths."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import truncnorm

from .bounds import CdfBoundProcess, CellNuisances, ThresholdGrid, bound_values, hull_arrays
from .envelope import DomainError, SensitivityPair
from .estimation import TwoSampleData
from .lp import FiniteDist

GAMMA_LEVELS = (1.0, 1.05, 1.25, 1.5, 2.0, 3.0, 5.0, 8.0)
AUDIT_K = (2, 3, 5, 8, 12, 20)


class ConfigError(ValueError):
    """Invalid simulation configuration."""


class DgpKind(enum.Enum):
    AUDIT = "FiniteAuditCells"
    REGULAR = "RegularTiltDgp"
    ZERO_INFLATED = "ZeroInflatedDgp"


@dataclass(frozen=True)
class AuditCase:
    dist: FiniteDist
    e: float
    s: SensitivityPair
    threshold: float


def gen_audit_cells(seed: int, k_list=AUDIT_K, n_cases: int = 500) -> list[AuditCase]:
    """Random finite-support cases with Dirichlet(2, ..., 2) masses.

    Cases cycle through ``k_list``; atoms are ``0..K-1`` and the threshold is
    one of them (the top atom is excluded so the event is nontrivial).
    """
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_cases):
        k = int(k_list[i % len(k_list)])
        g = rng.gamma(2.0, size=k)
        dist = FiniteDist(np.arange(k, dtype=float), g / g.sum())
        e = float(rng.uniform(0.05, 0.95))
        s = SensitivityPair(float(rng.choice(GAMMA_LEVELS)), float(rng.choice(GAMMA_LEVELS)))
        thr = float(rng.integers(0, k - 1))
        out.append(AuditCase(dist, e, s, thr))
    return out


def _law(logits, eps: float, n: int) -> np.ndarray:
    w = np.exp(logits - np.max(logits))
    w /= w.sum()
    return (1.0 - eps) * w + eps / n


def _tn_cdf(y, lo, hi, mu, sd):
    return truncnorm.cdf(y, (lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd)


def _tn_ppf(u, lo, hi, mu, sd):
    return truncnorm.ppf(u, (lo - mu) / sd, (hi - mu) / sd, loc=mu, scale=sd)


@dataclass
class CellDgp:
    """Base class: source covariates, propensity and arm laws on finite cells.

    Target potential-outcome laws are exact nested tilts at ``s0``: arm 1
    takes the lower envelope and arm 0 the upper one.  Hence the true
    target QTE equals the upper hull endpoint at ``s0``.
    """

    source_weights: np.ndarray
    target_weights: np.ndarray
    e1: np.ndarray
    lo: float
    hi: float
    s0: SensitivityPair
    kind: DgpKind = DgpKind.REGULAR
    seed: int = 0

    @property
    def n_cells(self) -> int:
        return self.e1.size

    def cdf(self, y) -> np.ndarray:  # (2, J, len(y))
        raise NotImplementedError

    def draw(self, a, x, rng) -> np.ndarray:
        raise NotImplementedError

    def grid(self, size: int) -> ThresholdGrid:
        return ThresholdGrid.uniform(self.lo, self.hi, size)

    def cells(self, grid) -> CellNuisances:
        y = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, float)
        p = self.cdf(y)
        p[..., -1] = 1.0
        return CellNuisances(self.e1.copy(), p, self.target_weights.copy(), self.source_weights.copy())

    def oracle(self, grid, s_points) -> CdfBoundProcess:
        y = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, float)
        s_points = tuple(s_points)
        return CdfBoundProcess(y, s_points, bound_values(self.cells(y), s_points), meta={"oracle": True})

    def true_qte(self, grid, taus) -> np.ndarray:
        """Target QTE of the exact-tilt law on ``grid``."""
        proc = self.oracle(grid, [self.s0])
        _, hi = hull_arrays(proc.grid, proc.values, taus)
        return hi[0]

    def sample(self, n1: int, n0: int, rng: np.random.Generator, grid=None) -> TwoSampleData:
        """Draw source and target rows; outcomes are rounded up onto ``grid`` when given."""
        if n1 < 1 or n0 < 1:
            raise ConfigError("sample sizes must be positive")
        J = self.n_cells
        x1 = rng.choice(J, size=n1, p=self.source_weights)
        a1 = (rng.random(n1) < self.e1[x1]).astype(np.int64)
        y1 = self.draw(a1, x1, rng)
        if grid is not None:
            g = grid.values if isinstance(grid, ThresholdGrid) else np.asarray(grid, float)
            y1 = g[np.minimum(np.searchsorted(g, y1 - 1e-12, side="left"), g.size - 1)]
        x0 = rng.choice(J, size=n0, p=self.target_weights)
        r = np.concatenate([np.ones(n1, np.int64), np.zeros(n0, np.int64)])
        x = np.concatenate([x1, x0])
        a = np.concatenate([a1, -np.ones(n0, np.int64)])
        y = np.concatenate([y1, np.full(n0, np.nan)])
        return TwoSampleData(r, x, a, y, J)


@dataclass
class RegularTiltDgp(CellDgp):
    """Smooth truncated-normal arm laws with cell-varying means."""

    means: np.ndarray = field(default_factory=lambda: np.zeros((2, 1)))
    scales: np.ndarray = field(default_factory=lambda: np.ones(2))

    def cdf(self, y):
        y = np.asarray(y, float)
        out = np.empty((2, self.n_cells, y.size))
        for a in (0, 1):
            for j in range(self.n_cells):
                out[a, j] = _tn_cdf(y, self.lo, self.hi, self.means[a, j], self.scales[a])
        return out

    def draw(self, a, x, rng):
        mu = self.means[a, x]
        sd = self.scales[a]
        return _tn_ppf(rng.random(a.size), self.lo, self.hi, mu, sd)


@dataclass
class ZeroInflatedDgp(CellDgp):
    """Mass ``pi[a, x]`` at zero plus a truncated-normal component."""

    zero_prob: np.ndarray = field(default_factory=lambda: np.zeros((2, 1)))
    means: np.ndarray = field(default_factory=lambda: np.zeros((2, 1)))
    scales: np.ndarray = field(default_factory=lambda: np.ones(2))

    def cdf(self, y):
        y = np.asarray(y, float)
        out = np.empty((2, self.n_cells, y.size))
        for a in (0, 1):
            for j in range(self.n_cells):
                pi = self.zero_prob[a, j]
                cont = _tn_cdf(y, self.lo, self.hi, self.means[a, j], self.scales[a])
                out[a, j] = pi * (y >= 0.0) + (1.0 - pi) * cont
        return out

    def draw(self, a, x, rng):
        cont = _tn_ppf(rng.random(a.size), self.lo, self.hi, self.means[a, x], self.scales[a])
        zero = rng.random(a.size) < self.zero_prob[a, x]
        return np.where(zero, 0.0, cont)


def gen_regular_dgp(J: int = 6, s0=(1.60, 1.40), mixture: float = 0.05, mean_slope: float = 0.8,
                    scales=(0.76, 0.912), e_range=(0.18, 0.82), support=(-4.5, 4.5), seed: int = 0
                    ) -> RegularTiltDgp:
    """Smooth finite-cell design with an observational source.

    ``scales`` are (arm 0, arm 1); arm means are ``-mean_slope * z`` for arm 0
    and ``+mean_slope * z`` for arm 1.
    """
    lo, hi = support
    if not lo < hi:
        raise ConfigError("truncation range must satisfy lo < hi")
    if not 0.0 < e_range[0] < e_range[1] < 1.0:
        raise ConfigError("propensity truncation must lie inside (0, 1)")
    if not 0.0 <= mixture < 1.0:
        raise ConfigError("mixture weight must lie in [0, 1)")
    x = np.arange(J)
    z = (x - (J - 1) / 2) / ((J - 1) / 2)
    ws = _law(0.15 * np.sin(2 * np.pi * (x + 1) / J) - 0.10 * z, mixture, J)
    wt = _law(0.70 * z + 0.20 * np.cos(2 * np.pi * x / J), mixture, J)
    e1 = np.clip(expit(-0.10 + 0.85 * z + 0.25 * np.sin(2 * np.pi * x / J)), *e_range)
    means = np.stack([-mean_slope * z, mean_slope * z])
    return RegularTiltDgp(ws, wt, e1, float(lo), float(hi), SensitivityPair(*s0), DgpKind.REGULAR, seed,
                          means=means, scales=np.asarray(scales, float))


def gen_nonregular_dgp(s0=(1.20, 1.20), support=(-3.0, 3.0), seed: int = 0,
                       zero_prob=((0.30, 0.34, 0.38, 0.42), (0.06, 0.08, 0.10, 0.12)),
                       means=((-0.40, -0.30, -0.20, -0.10), (1.60, 1.70, 1.80, 1.90)),
                       scales=(1.0, 1.0)) -> ZeroInflatedDgp:
    """Zero-inflated four-cell design whose arm-0 median sits on the zero atom."""
    zp = np.asarray(zero_prob, float)
    if np.any((zp <= 0) | (zp >= 1)):
        raise ConfigError("zero-inflation probabilities must lie in (0, 1)")
    J = zp.shape[1]
    x = np.arange(J)
    z = (x - (J - 1) / 2) / ((J - 1) / 2)
    ws = _law(-0.2 * z, 0.0, J)
    wt = _law(0.4 * z, 0.0, J)
    e1 = np.clip(expit(0.1 + 0.6 * z), 0.15, 0.85)
    lo, hi = support
    return ZeroInflatedDgp(ws, wt, e1, float(lo), float(hi), SensitivityPair(*s0), DgpKind.ZERO_INFLATED,
                           seed, zero_prob=zp, means=np.asarray(means, float), scales=np.asarray(scales, float))
