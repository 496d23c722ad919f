"""Exact finite-support linear programs used to audit the closed-form envelopes.

The solver is a dense two-phase tableau simplex with Bland's rule.  The
programs here have at most a few dozen variables, so clarity wins over speed.
A constructive greedy solution is computed alongside as a second route.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .envelope import DomainError, SensitivityPair, Side, ell_u_gamma, unit_prob

FEAS_TOL = 1e-9
_PIVOT_TOL = 1e-12


class LpStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"


class SolverError(RuntimeError):
    """The simplex failed to terminate or became unbounded on a bounded problem."""


@dataclass(frozen=True)
class FiniteDist:
    """Finite-support distribution with strictly ascending atoms."""

    atoms: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float).ravel()
        masses = np.asarray(self.masses, dtype=float).ravel()
        if atoms.size == 0 or atoms.size != masses.size:
            raise DomainError("atoms and masses must be nonempty and of equal length")
        if np.any(np.diff(atoms) <= 0):
            raise DomainError("atoms must be strictly ascending")
        if np.any(masses <= 0):
            raise DomainError("masses must be positive")
        if abs(masses.sum() - 1.0) > 1e-12:
            raise DomainError(f"masses sum to {masses.sum()!r}, not 1")
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def from_weights(cls, atoms, weights) -> "FiniteDist":
        w = np.asarray(weights, dtype=float)
        return cls(atoms, w / w.sum())

    @property
    def k(self) -> int:
        return self.atoms.size

    def cdf(self) -> np.ndarray:
        """CDF at each atom, with the terminal value pinned to exactly 1."""
        c = np.cumsum(self.masses)
        c[-1] = 1.0
        return np.minimum(c, 1.0)

    def mass_below(self, threshold: float) -> float:
        return float(self.masses[self.atoms <= threshold].sum())


@dataclass
class LpSolution:
    value: float
    status: LpStatus
    q_vars: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t_vars: np.ndarray = field(default_factory=lambda: np.zeros(0))


# ---------------------------------------------------------------------------
# generic dense simplex


def _pivot(tab: np.ndarray, row: int, col: int) -> None:
    tab[row] /= tab[row, col]
    for i in range(tab.shape[0]):
        if i != row and tab[i, col] != 0.0:
            tab[i] -= tab[i, col] * tab[row]


def _run_simplex(tab: np.ndarray, basis: list[int], n_allowed: int, max_iter: int) -> None:
    """Minimize the objective in the last row of ``tab`` using Bland's rule.

    The last row holds reduced costs, the last column the right-hand side.
    Only the first ``n_allowed`` columns may enter the basis.
    """
    m = tab.shape[0] - 1
    for _ in range(max_iter):
        cost = tab[-1, :n_allowed]
        entering = np.flatnonzero(cost < -_PIVOT_TOL)
        if entering.size == 0:
            return
        col = int(entering[0])
        column = tab[:m, col]
        rows = np.flatnonzero(column > _PIVOT_TOL)
        if rows.size == 0:
            raise SolverError("unbounded direction in a bounded program")
        ratios = tab[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-14]
        row = int(min(ties, key=lambda r: basis[r]))
        _pivot(tab, row, col)
        basis[row] = col
    raise SolverError("simplex iteration limit reached")


def simplex(c, a_ub=None, b_ub=None, a_eq=None, b_eq=None, lower=None, upper=None, max_iter=5000):
    """Minimize ``c @ x`` subject to linear constraints and finite boxes.

    Parameters
    ----------
    c : array_like, shape (n,)
    a_ub, b_ub : inequality constraints ``a_ub @ x <= b_ub``.
    a_eq, b_eq : equality constraints.
    lower, upper : per-variable bounds (``lower`` defaults to 0, ``upper`` to +inf).

    Returns
    -------
    (x, value, status)
    """
    c = np.asarray(c, dtype=float)
    n = c.size
    lower = np.zeros(n) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if np.any(upper < lower - FEAS_TOL):
        return None, np.nan, LpStatus.INFEASIBLE

    rows_ub, rhs_ub = [], []
    if a_ub is not None:
        a_ub = np.atleast_2d(np.asarray(a_ub, dtype=float))
        rows_ub.extend(a_ub)
        rhs_ub.extend(np.asarray(b_ub, dtype=float) - a_ub @ lower)
    span = upper - lower
    for j in np.flatnonzero(np.isfinite(span)):
        row = np.zeros(n)
        row[j] = 1.0
        rows_ub.append(row)
        rhs_ub.append(span[j])
    rows_eq, rhs_eq = [], []
    if a_eq is not None:
        a_eq = np.atleast_2d(np.asarray(a_eq, dtype=float))
        rows_eq.extend(a_eq)
        rhs_eq.extend(np.asarray(b_eq, dtype=float) - a_eq @ lower)

    m_ub, m_eq = len(rows_ub), len(rows_eq)
    m = m_ub + m_eq
    # columns: shifted x (n), slacks (m_ub), artificials (m)
    n_cols = n + m_ub + m
    tab = np.zeros((m + 1, n_cols + 1))
    for i, (row, rhs) in enumerate(zip(rows_ub + rows_eq, rhs_ub + rhs_eq)):
        sign = -1.0 if rhs < 0 else 1.0
        tab[i, :n] = sign * row
        if i < m_ub:
            tab[i, n + i] = sign
        tab[i, n + m_ub + i] = 1.0
        tab[i, -1] = sign * rhs
    basis = list(range(n + m_ub, n + m_ub + m))

    # phase one: minimize the sum of artificials
    tab[-1, :] = 0.0
    tab[-1, n + m_ub:n_cols] = 1.0
    for i in range(m):
        tab[-1] -= tab[i]
    _run_simplex(tab, basis, n + m_ub, max_iter)
    if -tab[-1, -1] > FEAS_TOL:
        return None, np.nan, LpStatus.INFEASIBLE
    # drive degenerate artificials out of the basis where possible
    for i, b in enumerate(basis):
        if b >= n + m_ub:
            nz = np.flatnonzero(np.abs(tab[i, :n + m_ub]) > _PIVOT_TOL)
            if nz.size:
                _pivot(tab, i, int(nz[0]))
                basis[i] = int(nz[0])

    # phase two
    tab[-1, :] = 0.0
    tab[-1, :n] = c
    for i, b in enumerate(basis):
        if tab[-1, b] != 0.0:
            tab[-1] -= tab[-1, b] * tab[i]
    _run_simplex(tab, basis, n + m_ub, max_iter)

    x = np.zeros(n_cols)
    for i, b in enumerate(basis):
        x[b] = tab[i, -1]
    xs = x[:n] + lower
    return xs, float(c @ xs), LpStatus.OPTIMAL


# ---------------------------------------------------------------------------
# binary-event and finite-support programs


def binary_event_interval(p, ell: float, u: float) -> tuple[float, float]:
    """Range of ``E(h * Z)`` over tilts ``ell <= h <= u`` with ``E(h) = 1``."""
    if not (0.0 < ell <= 1.0 <= u):
        raise DomainError(f"need 0 < ell <= 1 <= u, got ell={ell}, u={u}")
    p = unit_prob(p, "p")
    lo = max(ell * p, 1.0 - u * (1.0 - p))
    hi = min(u * p, 1.0 - ell * (1.0 - p))
    return float(lo), float(hi)


def _event_mask(dist: FiniteDist, threshold: float) -> np.ndarray:
    return dist.atoms <= threshold


def solve_single_layer(dist: FiniteDist, threshold: float, ell: float, u: float, side) -> LpSolution:
    """Optimize the event mass under one bounded normalized tilt of ``dist``."""
    if not (0.0 < ell <= 1.0 <= u):
        raise DomainError(f"need 0 < ell <= 1 <= u, got ell={ell}, u={u}")
    side = Side.parse(side)
    r = dist.masses
    ev = _event_mask(dist, threshold).astype(float)
    c = ev if side is Side.LOWER else -ev
    x, val, status = simplex(c, a_eq=np.ones((1, r.size)), b_eq=[1.0], lower=ell * r, upper=u * r)
    if status is not LpStatus.OPTIMAL:
        raise SolverError("single-layer program reported infeasible")
    value = val if side is Side.LOWER else -val
    return LpSolution(float(value), status, q_vars=x)


def solve_two_layer(dist: FiniteDist, threshold: float, e, s: SensitivityPair, side) -> LpSolution:
    """Two-layer program: source tilt within ``[ell, u]`` then transport within ``[1/lam, lam]``.

    Variables are ``(q_1..q_K, t_1..t_K)``.
    """
    side = Side.parse(side)
    e = unit_prob(e, "propensity")
    ell, u = ell_u_gamma(e, s.gamma)
    r = dist.masses
    k = r.size
    ev = _event_mask(dist, threshold).astype(float)
    c = np.concatenate([np.zeros(k), ev if side is Side.LOWER else -ev])
    lam = s.lam
    eye = np.eye(k)
    # t_j - lam q_j <= 0 and q_j / lam - t_j <= 0
    a_ub = np.vstack([np.hstack([-lam * eye, eye]), np.hstack([eye / lam, -eye])])
    b_ub = np.zeros(2 * k)
    a_eq = np.zeros((2, 2 * k))
    a_eq[0, :k] = 1.0
    a_eq[1, k:] = 1.0
    lower = np.concatenate([ell * r, np.zeros(k)])
    upper = np.concatenate([u * r, np.full(k, np.inf)])
    x, val, status = simplex(c, a_ub, b_ub, a_eq, [1.0, 1.0], lower, upper)
    if status is not LpStatus.OPTIMAL:
        raise SolverError("two-layer program reported infeasible")
    value = val if side is Side.LOWER else -val
    return LpSolution(float(value), status, q_vars=x[:k], t_vars=x[k:])


def greedy_tilt(weights, event, ell: float, u: float, side) -> np.ndarray:
    """Constructive optimum of the single-layer program.

    Every atom starts at ``ell * w``; the free mass ``1 - ell`` is poured into
    atoms outside the event first (lower side) or inside it first (upper
    side), each atom taking at most ``(u - ell) * w``.
    """
    side = Side.parse(side)
    w = np.asarray(weights, dtype=float)
    event = np.asarray(event, dtype=bool)
    out = ell * w
    free = 1.0 - out.sum()
    first = ~event if side is Side.LOWER else event
    for group in (first, ~first):
        for j in np.flatnonzero(group):
            add = min(free, (u - ell) * w[j])
            out[j] += add
            free -= add
    return out


def greedy_two_layer(dist: FiniteDist, threshold: float, e, s: SensitivityPair, side) -> LpSolution:
    """Compose the greedy source and transport tilts; a second route to the LP value."""
    side = Side.parse(side)
    ell, u = ell_u_gamma(e, s.gamma)
    ev = _event_mask(dist, threshold)
    q = greedy_tilt(dist.masses, ev, ell, u, side)
    t = greedy_tilt(q, ev, 1.0 / s.lam, s.lam, side)
    return LpSolution(float(t[ev].sum()), LpStatus.OPTIMAL, q_vars=q, t_vars=t)


def check_solution(sol: LpSolution, dist: FiniteDist, e, s: SensitivityPair, tol: float = FEAS_TOL) -> bool:
    """Feasibility of a two-layer solution within ``tol``."""
    ell, u = ell_u_gamma(e, s.gamma)
    r, q, t = dist.masses, sol.q_vars, sol.t_vars
    return bool(
        abs(q.sum() - 1.0) <= tol
        and abs(t.sum() - 1.0) <= tol
        and np.all(q >= ell * r - tol)
        and np.all(q <= u * r + tol)
        and np.all(t >= q / s.lam - tol)
        and np.all(t <= s.lam * q + tol)
    )


def interior_atoms(q, weights, ell: float, u: float, tol: float = 1e-9) -> int:
    """Number of atoms whose tilt ``q_j / w_j`` is strictly between ``ell`` and ``u``."""
    ratio = np.asarray(q) / np.asarray(weights)
    return int(np.sum((ratio > ell + tol) & (ratio < u - tol)))
