"""Least-favorable threshold tilts that attain a whole envelope CDF at once."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .envelope import DomainError, SensitivityPair, Side, ell_u_gamma
from .lp import FiniteDist


class DegenerateError(ValueError):
    """The base distribution cannot be tilted (no mass)."""


@dataclass(frozen=True)
class ThresholdTilt:
    """Radon-Nikodym derivative that is constant below and above one threshold atom.

    ``below_value`` applies to atoms with index < ``threshold_atom_index``,
    ``above_value`` to atoms with index greater, ``atom_value`` on the
    threshold atom itself.  An identity tilt has no threshold atom.
    """

    threshold_prob: float
    threshold_atom_index: Optional[int]
    below_value: float
    above_value: float
    atom_value: Optional[float] = None

    def values(self, k: int) -> np.ndarray:
        if self.threshold_atom_index is None:
            return np.ones(k)
        j = self.threshold_atom_index
        h = np.empty(k)
        h[:j] = self.below_value
        h[j + 1:] = self.above_value
        h[j] = self.atom_value
        return h


IDENTITY = ThresholdTilt(threshold_prob=0.0, threshold_atom_index=None, below_value=1.0, above_value=1.0)


def _threshold_tilt(base: FiniteDist, ell: float, u: float, side: Side):
    if not (0.0 < ell <= 1.0 <= u):
        raise DomainError(f"need 0 < ell <= 1 <= u, got ell={ell}, u={u}")
    r = base.masses
    if r.sum() <= 0:
        raise DegenerateError("base distribution has no mass")
    if u - ell <= 0.0:
        return IDENTITY, base
    if side is Side.LOWER:
        below, above = ell, u
        r_thr = (u - 1.0) / (u - ell)
    else:
        below, above = u, ell
        r_thr = (1.0 - ell) / (u - ell)
    cdf = base.cdf()
    # generalized inverse: first atom whose CDF reaches the threshold probability
    j = int(np.searchsorted(cdf, r_thr - 1e-15, side="left"))
    j = min(j, r.size - 1)
    f_left = cdf[j - 1] if j > 0 else 0.0
    f_at = cdf[j]
    jump = f_at - f_left
    if jump > 0.0:
        atom = (1.0 - below * f_left - above * (1.0 - f_at)) / jump
        atom = float(np.clip(atom, ell, u))
    else:
        atom = 1.0
    tilt = ThresholdTilt(float(r_thr), j, float(below), float(above), atom)
    masses = tilt.values(r.size) * r
    return tilt, FiniteDist(base.atoms, masses)


def lower_tilt(base: FiniteDist, ell: float, u: float):
    """Tilt putting ``ell`` below the threshold and ``u`` above it.

    The tilted CDF equals ``max(ell * F, 1 - u * (1 - F))`` at every atom.
    """
    return _threshold_tilt(base, ell, u, Side.LOWER)


def upper_tilt(base: FiniteDist, ell: float, u: float):
    """Mirror of :func:`lower_tilt`; attains ``min(u * F, 1 - ell * (1 - F))``."""
    return _threshold_tilt(base, ell, u, Side.UPPER)


def side_tilt(base: FiniteDist, ell: float, u: float, side):
    side = Side.parse(side)
    return _threshold_tilt(base, ell, u, side)


def nested_exact_tilt(base: FiniteDist, e, s: SensitivityPair, side) -> FiniteDist:
    """Apply the source threshold tilt and then the transport threshold tilt."""
    side = Side.parse(side)
    ell, u = ell_u_gamma(e, s.gamma)
    _, source = _threshold_tilt(base, float(ell), float(u), side)
    _, target = _threshold_tilt(source, 1.0 / s.lam, s.lam, side)
    return target


def tilted_cdf_on_grid(cdf, e, s: SensitivityPair, side) -> np.ndarray:
    """Target CDF on a grid from a base CDF on the same grid via exact tilts.

    Grid points with zero base mass are carried along; the result is the CDF
    of :func:`nested_exact_tilt` evaluated at every grid point.
    """
    cdf = np.asarray(cdf, dtype=float)
    mass = np.diff(np.concatenate([[0.0], cdf]))
    keep = mass > 0
    idx = np.flatnonzero(keep)
    base = FiniteDist(idx.astype(float), mass[keep] / mass[keep].sum())
    tilted = nested_exact_tilt(base, e, s, side)
    full = np.zeros_like(cdf)
    full[idx] = tilted.masses
    out = np.cumsum(full)
    out[idx[-1]:] = 1.0
    return np.minimum(out, 1.0)
