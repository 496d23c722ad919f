"""Primitive sensitivity maps and the nested CDF envelope.

Everything here is a pure function of event probabilities.  The source layer
bounds an inverse treatment-selection tilt by ``[ell, u]`` where

    ell = e + (1 - e) / gamma,     u = e + gamma * (1 - e),

and the transport layer bounds a target/source likelihood ratio by
``[1/lam, lam]``.  For a binary event of probability ``p`` each layer maps
``p`` to a max (lower side) or min (upper side) of two affine pieces; the
nested endpoint map composes the transport layer after the source layer.

Functions accept scalars or numpy arrays and broadcast.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

TIE_TOL = 1e-10
CLAMP_TOL = 1e-12


class DomainError(ValueError):
    """An argument lies outside the domain of a sensitivity map."""


class TieError(ArithmeticError):
    """Two affine pieces are tied, so the envelope has no two-sided derivative."""


class Side(enum.Enum):
    LOWER = "-"
    UPPER = "+"

    @classmethod
    def parse(cls, value: "Side | str") -> "Side":
        if isinstance(value, Side):
            return value
        key = str(value).strip().lower()
        if key in ("-", "lower", "lo", "l"):
            return cls.LOWER
        if key in ("+", "upper", "hi", "u"):
            return cls.UPPER
        raise ValueError(f"unknown envelope side {value!r}")

    @property
    def sign(self) -> int:
        return -1 if self is Side.LOWER else 1


SIDES = (Side.LOWER, Side.UPPER)


@dataclass(frozen=True, order=True)
class SensitivityPair:
    """Odds-ratio bound ``gamma`` and likelihood-ratio bound ``lam``."""

    gamma: float
    lam: float

    def __post_init__(self):
        g, l = float(self.gamma), float(self.lam)
        if not (np.isfinite(g) and np.isfinite(l)):
            raise DomainError(f"sensitivity values must be finite, got ({g}, {l})")
        if g < 1.0 or l < 1.0:
            raise DomainError(f"need gamma >= 1 and lambda >= 1, got ({g}, {l})")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "lam", l)

    def __iter__(self):
        yield self.gamma
        yield self.lam

    def dominates(self, other: "SensitivityPair") -> bool:
        """Componentwise ``self >= other``."""
        return self.gamma >= other.gamma and self.lam >= other.lam


POINT = SensitivityPair(1.0, 1.0)


def unit_prob(x, name: str = "probability"):
    """Validate values in [0, 1], clamping round-off within ``CLAMP_TOL``."""
    arr = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(arr)):
        raise DomainError(f"{name} must be finite")
    if np.any(arr < -CLAMP_TOL) or np.any(arr > 1.0 + CLAMP_TOL):
        raise DomainError(f"{name} outside [0, 1]: {arr.min()}..{arr.max()}")
    out = np.clip(arr, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _as_out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def ell_u_gamma(e, gamma: float):
    """Return the tilt bounds ``(ell, u)`` for propensity ``e`` and odds bound ``gamma``."""
    if gamma < 1.0:
        raise DomainError(f"gamma must be >= 1, got {gamma}")
    e = np.asarray(unit_prob(e, "propensity"), dtype=float)
    if gamma == 1.0:
        one = np.ones_like(e)
        return _as_out(one), _as_out(one)
    ell = e + (1.0 - e) / gamma
    u = e + gamma * (1.0 - e)
    return _as_out(ell), _as_out(u)


def _two_piece(p, lo, hi, side: Side):
    # lower: max{lo*p, 1 - hi*(1-p)}; upper: min{hi*p, 1 - lo*(1-p)}
    if side is Side.LOWER:
        return np.maximum(lo * p, 1.0 - hi * (1.0 - p))
    return np.minimum(hi * p, 1.0 - lo * (1.0 - p))


def c_envelope(p, e, gamma: float, side):
    """Sharp bound on a source potential-outcome event probability."""
    side = Side.parse(side)
    p = np.asarray(unit_prob(p, "p"), dtype=float)
    ell, u = ell_u_gamma(e, gamma)
    if gamma == 1.0:
        # identity reduction, exact rather than up to round-off
        return _as_out(p + 0.0 * np.asarray(ell))
    return _as_out(np.clip(_two_piece(p, np.asarray(ell), np.asarray(u), side), 0.0, 1.0))


def t_envelope(q, lam: float, side):
    """Sharp bound on a target event probability given source probability ``q``."""
    side = Side.parse(side)
    if lam < 1.0:
        raise DomainError(f"lambda must be >= 1, got {lam}")
    q = np.asarray(unit_prob(q, "q"), dtype=float)
    if lam == 1.0:
        return _as_out(q)
    return _as_out(np.clip(_two_piece(q, 1.0 / lam, lam, side), 0.0, 1.0))


def g_nested(p, e, s: SensitivityPair, side):
    """Nested endpoint map: transport layer applied to the source-layer bound."""
    side = Side.parse(side)
    return t_envelope(c_envelope(p, e, s.gamma, side), s.lam, side)


def product_relaxation(p, e, s: SensitivityPair, side):
    """Bound from a single normalized tilt in ``[ell/lam, u*lam]``.

    Never tighter than :func:`g_nested`.
    """
    side = Side.parse(side)
    p = np.asarray(unit_prob(p, "p"), dtype=float)
    ell, u = ell_u_gamma(e, s.gamma)
    lo = np.asarray(ell) / s.lam
    hi = np.asarray(u) * s.lam
    return _as_out(np.clip(_two_piece(p, lo, hi, side), 0.0, 1.0))


# ---------------------------------------------------------------------------
# active sets and derivatives


class Branch(enum.Enum):
    PIECE1 = 1
    PIECE2 = 2
    TIE = 0


@dataclass(frozen=True)
class ActiveBranches:
    c_branch: Branch
    t_branch: Branch
    c_margin: float
    t_margin: float

    @property
    def regular(self) -> bool:
        return self.c_branch is not Branch.TIE and self.t_branch is not Branch.TIE


@dataclass(frozen=True)
class EnvelopeDerivatives:
    d_p: float
    d_e: float


def _pieces(p, e, s: SensitivityPair, side: Side):
    """Affine pieces and their partials for both layers (array version).

    Returns a dict of arrays; ``c1, c2`` are the source pieces, ``q`` the
    source-layer value and ``t1, t2`` the transport pieces at ``q``.
    """
    p = np.asarray(p, dtype=float)
    e = np.asarray(e, dtype=float)
    g = s.gamma
    ell = e + (1.0 - e) / g
    u = e + g * (1.0 - e)
    dell = 1.0 - 1.0 / g
    du = 1.0 - g
    if side is Side.LOWER:
        c1, c2 = ell * p, 1.0 - u * (1.0 - p)
        c1_p, c1_e = ell, dell * p
        c2_p, c2_e = u, -du * (1.0 - p)
        q = np.maximum(c1, c2)
        t1, t2 = q / s.lam, 1.0 - s.lam * (1.0 - q)
        t1_slope, t2_slope = 1.0 / s.lam, s.lam
    else:
        c1, c2 = u * p, 1.0 - ell * (1.0 - p)
        c1_p, c1_e = u, du * p
        c2_p, c2_e = ell, -dell * (1.0 - p)
        q = np.minimum(c1, c2)
        t1, t2 = s.lam * q, 1.0 - (1.0 - q) / s.lam
        t1_slope, t2_slope = s.lam, 1.0 / s.lam
    return dict(
        c1=c1, c2=c2, c1_p=c1_p, c1_e=c1_e, c2_p=c2_p, c2_e=c2_e, q=q,
        t1=t1, t2=t2, t1_slope=t1_slope, t2_slope=t2_slope,
    )


def _pick(better_is_1, tie):
    return np.where(tie, Branch.TIE.value, np.where(better_is_1, Branch.PIECE1.value, Branch.PIECE2.value))


def branch_codes(p, e, s: SensitivityPair, side):
    """Vectorized active-piece codes (1, 2, or 0 for a tie) for both layers."""
    side = Side.parse(side)
    pc = _pieces(p, e, s, side)
    cm = np.abs(pc["c1"] - pc["c2"])
    tm = np.abs(pc["t1"] - pc["t2"])
    if side is Side.LOWER:
        c1_wins, t1_wins = pc["c1"] > pc["c2"], pc["t1"] > pc["t2"]
    else:
        c1_wins, t1_wins = pc["c1"] < pc["c2"], pc["t1"] < pc["t2"]
    return _pick(c1_wins, cm <= TIE_TOL), _pick(t1_wins, tm <= TIE_TOL), cm, tm


def classify_branches(p, e, s: SensitivityPair, side) -> ActiveBranches:
    p = unit_prob(p, "p")
    e = unit_prob(e, "propensity")
    cc, tc, cm, tm = branch_codes(p, e, s, side)
    return ActiveBranches(Branch(int(cc)), Branch(int(tc)), float(cm), float(tm))


def nested_derivatives(p, e, s: SensitivityPair, side):
    """Vectorized chain-rule derivatives of the nested map.

    Returns ``(d_p, d_e, tie)`` where ``tie`` flags entries with a tied
    non-degenerate layer (there ``d_p, d_e`` hold the piece-1 values and must
    not be used as derivatives).  A layer with ``gamma == 1`` or ``lam == 1``
    is the identity and never counts as tied.
    """
    side = Side.parse(side)
    pc = _pieces(p, e, s, side)
    cc, tc, _, _ = branch_codes(p, e, s, side)
    if s.gamma == 1.0:
        cp = np.ones_like(np.asarray(pc["q"]))
        ce = np.zeros_like(cp)
        c_tie = np.zeros(cp.shape, dtype=bool)
    else:
        use2 = cc == Branch.PIECE2.value
        cp = np.where(use2, pc["c2_p"], pc["c1_p"])
        ce = np.where(use2, pc["c2_e"], pc["c1_e"])
        c_tie = cc == Branch.TIE.value
    if s.lam == 1.0:
        slope = np.ones_like(np.asarray(pc["q"]))
        t_tie = np.zeros(slope.shape, dtype=bool)
    else:
        slope = np.where(tc == Branch.PIECE2.value, pc["t2_slope"], pc["t1_slope"])
        t_tie = tc == Branch.TIE.value
    return slope * cp, slope * ce, c_tie | t_tie


def envelope_derivatives(p, e, s: SensitivityPair, side) -> EnvelopeDerivatives:
    """Partial derivatives of the nested map in ``p`` and ``e``.

    Raises
    ------
    TieError
        If an affine-piece tie occurs in a non-degenerate layer; use
        :func:`directional_derivative` there instead.
    """
    p = unit_prob(p, "p")
    e = unit_prob(e, "propensity")
    d_p, d_e, tie = nested_derivatives(p, e, s, side)
    if bool(tie):
        raise TieError(f"switch surface at p={p}, e={e}, s={s}")
    return EnvelopeDerivatives(float(d_p), float(d_e))


def directional_derivative(p, e, s: SensitivityPair, side, h_p: float, h_e: float) -> float:
    """Hadamard directional derivative of the nested map in direction ``(h_p, h_e)``.

    Inner layer takes the max (lower) or min (upper) of the linearized
    increments of the active source pieces; the outer layer does the same
    over the active transport slopes applied to the inner value.
    """
    side = Side.parse(side)
    p = unit_prob(p, "p")
    e = unit_prob(e, "propensity")
    pc = _pieces(p, e, s, side)
    cc, tc, _, _ = branch_codes(p, e, s, side)
    cc, tc = int(cc), int(tc)
    agg = max if side is Side.LOWER else min

    inc1 = float(pc["c1_p"]) * h_p + float(pc["c1_e"]) * h_e
    inc2 = float(pc["c2_p"]) * h_p + float(pc["c2_e"]) * h_e
    if s.gamma == 1.0:
        inner = h_p
    elif cc == Branch.TIE.value:
        inner = agg(inc1, inc2)
    else:
        inner = inc1 if cc == Branch.PIECE1.value else inc2

    if s.lam == 1.0:
        return float(inner)
    v1 = pc["t1_slope"] * inner
    v2 = pc["t2_slope"] * inner
    if tc == Branch.TIE.value:
        return float(agg(v1, v2))
    return float(v1 if tc == Branch.PIECE1.value else v2)


# ---------------------------------------------------------------------------
# broadcastable kernels (no validation; gamma and lam may be arrays)


def nested_kernel(p, e, gamma, lam, side: Side, derivatives: bool = False):
    """Nested map value, optionally with ``(d_p, d_e, tie)``, for broadcastable arrays.

    Used by the estimators, which evaluate many sensitivity points at once.
    Degenerate layers (``gamma == 1`` or ``lam == 1``) never report ties.
    """
    p = np.asarray(p, dtype=float)
    e = np.asarray(e, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    lam = np.asarray(lam, dtype=float)
    flat_c, flat_t = gamma == 1.0, lam == 1.0
    ell = np.where(flat_c, 1.0, e + (1.0 - e) / gamma)
    u = np.where(flat_c, 1.0, e + gamma * (1.0 - e))
    # degenerate layers take the first (identity) piece so reductions are exact
    if side is Side.LOWER:
        c1 = ell * p
        c2 = 1.0 - u * (1.0 - p)
        use2 = (c2 > c1) & ~flat_c
        q = np.where(use2, c2, c1)
        t1 = q / lam
        t2 = 1.0 - lam * (1.0 - q)
        out2 = (t2 > t1) & ~flat_t
    else:
        c1 = u * p
        c2 = 1.0 - ell * (1.0 - p)
        use2 = (c2 < c1) & ~flat_c
        q = np.where(use2, c2, c1)
        t1 = lam * q
        t2 = 1.0 - (1.0 - q) / lam
        out2 = (t2 < t1) & ~flat_t
    value = np.clip(np.where(out2, t2, t1), 0.0, 1.0)
    if not derivatives:
        return value
    if side is Side.LOWER:
        cp = np.where(use2, u, ell)
        ce = np.where(use2, (gamma - 1.0) * (1.0 - p), (1.0 - 1.0 / gamma) * p)
        slope = np.where(out2, lam, 1.0 / lam)
    else:
        cp = np.where(use2, ell, u)
        ce = np.where(use2, -(1.0 - 1.0 / gamma) * (1.0 - p), (1.0 - gamma) * p)
        slope = np.where(out2, 1.0 / lam, lam)
    tie = ((np.abs(c1 - c2) <= TIE_TOL) & (gamma > 1.0)) | ((np.abs(t1 - t2) <= TIE_TOL) & (lam > 1.0))
    return value, slope * cp, slope * ce, tie
