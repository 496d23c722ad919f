import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qtb.envelope import SensitivityPair, g_nested
from qtb.lp import FiniteDist
from qtb.tilts import IDENTITY, lower_tilt, nested_exact_tilt, tilted_cdf_on_grid, upper_tilt


def test_two_atom_lower_tilt():
    base = FiniteDist([0.0, 1.0], [0.5, 0.5])
    tilt, out = lower_tilt(base, 0.5, 1.5)
    assert tilt.threshold_prob == pytest.approx(0.5)
    assert tilt.threshold_atom_index == 0
    assert out.masses == pytest.approx([0.25, 0.75], abs=1e-15)
    assert out.cdf()[0] == pytest.approx(max(0.5 * 0.5, 1 - 1.5 * 0.5))


def test_identity_tilts():
    base = FiniteDist([0.0, 1.0, 2.0], [0.2, 0.3, 0.5])
    for fn in (lower_tilt, upper_tilt):
        tilt, out = fn(base, 1.0, 1.0)
        assert tilt is IDENTITY
        assert np.array_equal(out.masses, base.masses)
    same = nested_exact_tilt(base, 0.3, SensitivityPair(1.0, 1.0), "-")
    assert np.array_equal(same.masses, base.masses)


def test_upper_tilt_reflects_lower_tilt_on_symmetric_base():
    base = FiniteDist([-2.0, -1.0, 0.0, 1.0, 2.0], [0.1, 0.2, 0.4, 0.2, 0.1])
    u = 2.5
    _, lo = lower_tilt(base, 1 / u, u)
    _, up = upper_tilt(base, 1 / u, u)
    assert up.masses == pytest.approx(lo.masses[::-1], abs=1e-14)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 100_000), st.integers(1, 15), st.floats(0.05, 1.0), st.floats(1.0, 8.0))
def test_path_attainment(seed, k, ell, u):
    rng = np.random.default_rng(seed)
    g = rng.gamma(2.0, size=k)
    base = FiniteDist(np.arange(k, dtype=float), g / g.sum())
    f = base.cdf()
    for fn, env in ((lower_tilt, np.maximum(ell * f, 1 - u * (1 - f))),
                    (upper_tilt, np.minimum(u * f, 1 - ell * (1 - f)))):
        tilt, out = fn(base, ell, u)
        h = tilt.values(k)
        assert np.all(h >= ell - 1e-12) and np.all(h <= u + 1e-12)
        assert abs(np.sum(h * base.masses) - 1.0) < 1e-12
        assert np.max(np.abs(out.cdf() - env)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 12), st.floats(0.05, 0.95),
       st.floats(1.0, 6.0), st.floats(1.0, 4.0))
def test_nested_tilt_attains_nested_map(seed, k, e, g, l):
    rng = np.random.default_rng(seed)
    w = rng.gamma(2.0, size=k)
    base = FiniteDist(np.arange(k, dtype=float), w / w.sum())
    s = SensitivityPair(g, l)
    for side in "-+":
        out = nested_exact_tilt(base, e, s, side)
        want = np.array([g_nested(p, e, s, side) for p in base.cdf()])
        assert np.max(np.abs(out.cdf() - want)) < 1e-12
        assert np.all(np.diff(out.cdf()) >= -1e-15)


def test_grid_tilt_with_empty_grid_points():
    cdf = np.array([0.1, 0.1, 0.5, 0.5, 0.8, 1.0, 1.0])
    s = SensitivityPair(1.6, 1.4)
    for side in "-+":
        out = tilted_cdf_on_grid(cdf, 0.4, s, side)
        want = np.array([g_nested(p, 0.4, s, side) for p in cdf])
        assert np.max(np.abs(out - want)) < 1e-12
