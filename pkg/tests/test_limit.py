import math

import numpy as np
import pytest

from xbmarket import paths
from xbmarket.analytics import survival_probability
from xbmarket.core import MarketState, ReinitSpec
from xbmarket.errors import CovarianceNotPSD
from xbmarket.flow import GridPath
from xbmarket.limit import (
    BmSpec, first_change, renewal_counts, sample_bm_path, simulate_active_limit, simulate_inactive_limit,
    simulate_regime_switching_limit,
)

ZERO = tuple((0.0,) * 4 for _ in range(4))
EYE = tuple(tuple(float(i == j) for j in range(4)) for i in range(4))
POINT = ReinitSpec(point=(1, 1, 1, 1))


def test_path_without_noise_is_a_line():
    spec = BmSpec((1, 2, 3, 4), mu=(1, -1, 0.5, 0), sigma=ZERO, grid_dt=0.01)
    x = sample_bm_path(0, spec, 1.0)
    t = x.times[:, None]
    assert np.allclose(x.values, np.array([1, 2, 3, 4]) + t * np.array([1, -1, 0.5, 0]))
    assert np.allclose(sample_bm_path(0, BmSpec((1, 2, 3, 4), sigma=ZERO), 0.1).values, [1, 2, 3, 4])


def test_terminal_covariance():
    spec = BmSpec((1, 1, 1, 1), sigma=EYE, grid_dt=0.1)
    rng = np.random.default_rng(0)
    term = np.array([sample_bm_path(rng, spec, 1.0).values[-1] for _ in range(20_000)]) - 1
    cov = np.cov(term, rowvar=False)
    assert np.all(np.abs(cov - np.eye(4)) < 4 * math.sqrt(2 / len(term)))


def test_non_psd_covariance():
    bad = np.eye(4)
    bad[0, 1] = bad[1, 0] = 2.0
    with pytest.raises(CovarianceNotPSD):
        sample_bm_path(0, BmSpec((1, 1, 1, 1), sigma=tuple(map(tuple, bad))), 1.0)


def test_deterministic_active_price_change():
    # bF drains at rate 4: empty at 0.25, then bG feeds it; bid sum 2 - 4t hits zero at 0.5
    spec = BmSpec((1, 1, 1, 1), mu=(-4, 0, 0, 0), sigma=ZERO, grid_dt=1e-3)
    tr = simulate_active_limit(None, 0, spec, POINT, 0.6)
    assert tr.n_price_changes == 1 and tr.pc_dir[0] == -1
    assert abs(tr.price_change_times[0] - 0.5) <= 1e-3
    assert tr.C[400] == pytest.approx(-0.6)  # bF short 0.6 by t = 0.4, taken from G


def test_symmetric_first_move():
    spec = BmSpec((0.5,) * 4, sigma=EYE, grid_dt=2e-3)
    ups = []
    for r in range(2000):
        tr = simulate_active_limit(None, r, spec, POINT, 3.0)
        if tr.n_price_changes:
            ups.append(tr.pc_dir[0] > 0)
    p = np.mean(ups)
    assert abs(p - 0.5) < 4 * math.sqrt(0.25 / len(ups))


def test_active_limit_segment_identities():
    spec = BmSpec((0.4, 0.5, 0.6, 0.3), mu=(-1, 0.5, 0.2, -0.3), sigma=EYE, grid_dt=1e-3)
    path = sample_bm_path(3, spec, 2.0)
    tr = simulate_active_limit(None, 3, spec, POINT, 2.0, path=path)
    w = path.values
    starts = [0] + list(tr.pc_step)
    ends = list(tr.pc_step) + [len(w)]
    for s, e in zip(starts, ends):
        seg = w[s:e] - w[s] + tr.Q[s]
        hb = seg[:, 0] + seg[:, 2]
        # h(Q) is the reflected bid sum until absorption
        hq = tr.Q[s:e, 0] + tr.Q[s:e, 2]
        assert np.allclose(hq, hb + np.maximum.accumulate(np.maximum(-hb, 0)), atol=1e-12)
        # capacity increments come from the four regulators
        _, rb = paths.g_map(seg[:, [0, 2]])
        _, ra = paths.g_map(seg[:, [1, 3]])
        dc = rb.regulators[:, 1] - rb.regulators[:, 0] - ra.regulators[:, 1] + ra.regulators[:, 0]
        assert np.allclose(tr.C[s:e] - tr.C[s], dc, atol=1e-12)


def test_inactive_limit_quiet():
    spec = BmSpec((5, 5, 5, 5), sigma=tuple(tuple(0.01 * v for v in row) for row in EYE), grid_dt=1e-3)
    tr = simulate_inactive_limit(None, 0, spec, POINT, 1.0)
    assert tr.n_price_changes == 0 and (tr.B == 0).all()


def test_inactive_limit_only_F_bid_moves():
    spec = BmSpec((1, 1, 1, 1), mu=(-5, 0, 0, 0), sigma=ZERO, grid_dt=1e-3)
    tr = simulate_inactive_limit(None, 0, spec, POINT, 1.0)
    assert (tr.B[:, 1] == 0).all() and tr.B[-1, 0] < 0 and set(tr.pc_country) == {0}


def test_inactive_limit_coincident_jumps_vanish_with_grid():
    # both countries can cross zero inside one grid step; that rate is O(dt)
    counts = {}
    for dt in (1e-3, 1e-4):
        spec = BmSpec((0.3,) * 4, sigma=EYE, grid_dt=dt)
        co = jumps = 0
        for r in range(2000):
            tr = simulate_inactive_limit(None, r, spec, ReinitSpec(point=(3, 3, 3, 3)), 0.5, reinit_unit=0.1)
            d = np.diff(tr.B, axis=0) != 0
            co += (d[:, 0] & d[:, 1]).sum()
            jumps += d.sum()
        counts[dt] = (co, jumps)
    (c3, j3), (c4, j4) = counts[1e-3], counts[1e-4]
    assert c4 / j4 < 2e-3 and c4 < c3 / 3


def test_switching_with_infinite_capacity():
    spec = BmSpec((0.5,) * 4, mu=(-1, 0, 0, -1), sigma=EYE, grid_dt=1e-3)
    a = simulate_active_limit(None, 5, spec, ReinitSpec(1, 3), 1.0, 0.2)
    b = simulate_regime_switching_limit(None, 5, spec, ReinitSpec(1, 3), math.inf, math.inf, 1.0, 0.2)
    assert len(b.sigma_steps) == 0
    assert np.array_equal(a.Q, b.Q) and np.array_equal(a.B, b.B) and np.array_equal(a.C, b.C)


def test_switching_tiny_window():
    spec = BmSpec((0.5,) * 4, mu=(-2.5, 0, 0, -2.5), sigma=tuple(tuple(0.25 * v for v in row) for row in EYE),
                  grid_dt=2e-3)
    hits = 0
    for r in range(1000):
        tr = simulate_regime_switching_limit(None, r, spec, ReinitSpec(10, 20), 0.02, 0.02, 1.0, 0.01)
        hits += len(tr.sigma_steps) > 0
    assert hits / 1000 >= 0.99


def test_switching_limit_invariants():
    spec = BmSpec((0.15,) * 4, mu=(-2.5, 0, 0, -2.5), sigma=tuple(tuple(0.25 * v for v in row) for row in EYE),
                  grid_dt=1e-3)
    for r in range(30):
        tr = simulate_regime_switching_limit(MarketState.make((0, 0, 0, 0)), r, spec, ReinitSpec(10, 20),
                                             0.1, 0.1, 1.0, 0.01)
        assert (tr.C >= -0.1 - 1e-12).all() and (tr.C <= 0.1 + 1e-12).all()
        act = tr.regime == 1
        assert (tr.B[act, 0] == tr.B[act, 1]).all()
        for s, e in zip(tr.sigma_steps, list(tr.rho_steps) + [len(tr.C)]):
            assert np.all(tr.C[s:e] == tr.C[s]) and abs(tr.C[s]) == pytest.approx(0.1)


def test_first_change_reproducible_and_unbiased_direction():
    t1, s1 = first_change(4, (1, 1), (0, 0), np.eye(2), 5.0, 1e-3, 4000)
    t2, s2 = first_change(4, (1, 1), (0, 0), np.eye(2), 5.0, 1e-3, 4000)
    assert np.array_equal(t1, t2) and np.array_equal(s1, s2)
    done = np.isfinite(t1)
    assert abs(np.mean(s1[done] > 0) - 0.5) < 4 * math.sqrt(0.25 / done.sum())


def test_first_change_survival_coarse():
    # coarse grid: agreement within 3 SE plus the known monitoring bias
    n = 20_000
    t, _ = first_change(8, (1, 1), (-1, -1), 0.5 * np.eye(2), 1.0, 1e-3, n)
    a = survival_probability((1, 1), (-1, -1), 0.5 * np.eye(2), 1.0)
    assert abs(np.mean(t > 1) - a) < 3 * math.sqrt(a * (1 - a) / n) + 0.01


def test_renewal_counts_start_at_zero():
    cnt, rg = renewal_counts(1, (50, 50), (0, 0), np.eye(2), 1.0, 1e-3, 200)
    assert not cnt.any() and not rg.any()
    cnt, rg = renewal_counts(1, (0.2, 0.2), (0, 0), np.eye(2), 1.0, 1e-3, 200)
    assert (rg <= cnt).all() and cnt.mean() > 1
