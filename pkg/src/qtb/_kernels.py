"""Compiled loops for evaluating the one-step estimator over many sensitivity points."""
from __future__ import annotations

import numpy as np
from numba import njit

from .envelope import TIE_TOL


@njit(cache=True)
def _nested(p, e, gamma, lam, lower):
    flat_c = gamma == 1.0
    flat_t = lam == 1.0
    ell = 1.0 if flat_c else e + (1.0 - e) / gamma
    u = 1.0 if flat_c else e + gamma * (1.0 - e)
    if lower:
        c1 = ell * p
        c2 = 1.0 - u * (1.0 - p)
        use2 = c2 > c1 and not flat_c
        q = c2 if use2 else c1
        t1 = q / lam
        t2 = 1.0 - lam * (1.0 - q)
        out2 = t2 > t1 and not flat_t
        cp = u if use2 else ell
        ce = (gamma - 1.0) * (1.0 - p) if use2 else (1.0 - 1.0 / gamma) * p
        slope = lam if out2 else 1.0 / lam
    else:
        c1 = u * p
        c2 = 1.0 - ell * (1.0 - p)
        use2 = c2 < c1 and not flat_c
        q = c2 if use2 else c1
        t1 = lam * q
        t2 = 1.0 - (1.0 - q) / lam
        out2 = t2 < t1 and not flat_t
        cp = ell if use2 else u
        ce = -(1.0 - 1.0 / gamma) * (1.0 - p) if use2 else (1.0 - gamma) * p
        slope = 1.0 / lam if out2 else lam
    val = t2 if out2 else t1
    if val < 0.0:
        val = 0.0
    elif val > 1.0:
        val = 1.0
    tie = (abs(c1 - c2) <= TIE_TOL and gamma > 1.0) or (abs(t1 - t2) <= TIE_TOL and lam > 1.0)
    return val, slope * cp, slope * ce, tie


@njit(cache=True)
def one_step_sums(p, e1, omega, target, source_arm, cum, gam, lam, n0, n1, chi, augment, relevant):
    """Plug-in and one-step sums for every (arm, side, s, grid point).

    Shapes: ``p`` (K, 2, J, G), ``e1``/``omega``/``target`` (K, J),
    ``source_arm`` (K, J, 2), ``cum`` (K, 2, J, G), ``gam``/``lam`` (S,).
    """
    K, _, J, G = p.shape
    S = gam.shape[0]
    psi = np.zeros((2, 2, S, G))
    plug = np.zeros((2, 2, S, G))
    tie = np.zeros((2, 2, S, G), dtype=np.bool_)
    for a in range(2):
        for si in range(2):
            lower = si == 0
            for s in range(S):
                g_, l_ = gam[s], lam[s]
                for k in range(K):
                    for j in range(J):
                        wt = target[k, j] / n0
                        ws = omega[k, j] / n1
                        ea = e1[k, j] if a == 1 else 1.0 - e1[k, j]
                        n_arm = source_arm[k, j, a]
                        n_src = source_arm[k, j, 0] + source_arm[k, j, 1]
                        ge = n_arm - n_src * ea
                        for y in range(G):
                            pv = p[k, a, j, y]
                            v, dp, de, t = _nested(pv, ea, g_, l_, lower)
                            plug[a, si, s, y] += wt * v
                            acc = wt * v
                            if augment:
                                acc += ws * dp * (cum[k, a, j, y] - n_arm * pv) / ea
                                if chi:
                                    acc += ws * de * ge
                            psi[a, si, s, y] += acc
                            if t and relevant[j]:
                                tie[a, si, s, y] = True
    return psi, plug, tie


@njit(cache=True)
def mesh_sums(p, e1, omega, target, source_arm, cum, gammas, lams, n0, n1, chi):
    """One-step values on a (gamma, lambda) mesh, shape (2, 2, nG, G, nL).

    The source layer depends on gamma only, so it is computed once per gamma
    and reused across the lambda axis.
    """
    K, _, J, G = p.shape
    nG = gammas.shape[0]
    nL = lams.shape[0]
    out = np.zeros((2, 2, nG, G, nL))
    inv_l = 1.0 / lams
    for a in range(2):
        for si in range(2):
            lower = si == 0
            for gi in range(nG):
                gamma = gammas[gi]
                flat_c = gamma == 1.0
                for k in range(K):
                    for j in range(J):
                        wt = target[k, j] / n0
                        ws = omega[k, j] / n1
                        ea = e1[k, j] if a == 1 else 1.0 - e1[k, j]
                        n_arm = source_arm[k, j, a]
                        ge = n_arm - (source_arm[k, j, 0] + source_arm[k, j, 1]) * ea
                        ell = 1.0 if flat_c else ea + (1.0 - ea) / gamma
                        u = 1.0 if flat_c else ea + gamma * (1.0 - ea)
                        for y in range(G):
                            pv = p[k, a, j, y]
                            if lower:
                                c1 = ell * pv
                                c2 = 1.0 - u * (1.0 - pv)
                                if c2 > c1 and not flat_c:
                                    q = c2
                                    cp = u
                                    ce = (gamma - 1.0) * (1.0 - pv)
                                else:
                                    q = c1
                                    cp = ell
                                    ce = (1.0 - 1.0 / gamma) * pv
                            else:
                                c1 = u * pv
                                c2 = 1.0 - ell * (1.0 - pv)
                                if c2 < c1 and not flat_c:
                                    q = c2
                                    cp = ell
                                    ce = -(1.0 - 1.0 / gamma) * (1.0 - pv)
                                else:
                                    q = c1
                                    cp = u
                                    ce = (1.0 - gamma) * pv
                            lin = ws * (cp * (cum[k, a, j, y] - n_arm * pv) / ea)
                            if chi:
                                lin += ws * ce * ge
                            row = out[a, si, gi, y]
                            for li in range(nL):
                                lam = lams[li]
                                if lower:
                                    t1 = q * inv_l[li]
                                    t2 = 1.0 - lam * (1.0 - q)
                                    if t2 > t1 and lam != 1.0:
                                        v = t2
                                        sl = lam
                                    else:
                                        v = t1
                                        sl = inv_l[li]
                                else:
                                    t1 = lam * q
                                    t2 = 1.0 - (1.0 - q) * inv_l[li]
                                    if t2 < t1 and lam != 1.0:
                                        v = t2
                                        sl = inv_l[li]
                                    else:
                                        v = t1
                                        sl = lam
                                if v < 0.0:
                                    v = 0.0
                                elif v > 1.0:
                                    v = 1.0
                                row[li] += wt * v + sl * lin
    return out
