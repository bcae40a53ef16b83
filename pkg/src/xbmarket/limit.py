"""Diffusion-limit dynamics: the composite path maps applied to sampled Brownian paths."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from . import paths
from .core import MomentSet, ReinitSpec
from .errors import CovarianceNotPSD, InvariantViolation
from .flow import GridPath
from .micro import ReinitDraws, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BmSpec:
    x0: tuple
    mu: tuple = (0.0, 0.0, 0.0, 0.0)
    sigma: tuple = ((1.0, 0, 0, 0), (0, 1.0, 0, 0), (0, 0, 1.0, 0), (0, 0, 0, 1.0))
    grid_dt: float = 1e-4

    @classmethod
    def from_moments(cls, x0, m: MomentSet, grid_dt: float = 1e-4) -> "BmSpec":
        return cls(tuple(float(v) for v in x0), tuple(m.mu), tuple(map(tuple, m.cov)), grid_dt)


def _sqrt_psd(sigma: np.ndarray) -> np.ndarray:
    if not np.allclose(sigma, sigma.T, atol=1e-12):
        raise CovarianceNotPSD("covariance is not symmetric")
    w, v = np.linalg.eigh(sigma)
    tol = 1e-10 * max(1.0, float(np.abs(w).max()))
    if w.min() < -tol:
        raise CovarianceNotPSD(f"covariance has eigenvalue {w.min():.3g}")
    return v * np.sqrt(np.clip(w, 0, None))


def sample_bm_path(seed, spec: BmSpec, T: float) -> GridPath:
    """x0 + t mu + Sigma^{1/2} B(t) on the grid k * grid_dt."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(round(T / spec.grid_dt))
    root = _sqrt_psd(np.asarray(spec.sigma, dtype=float))
    d = len(spec.x0)
    inc = rng.standard_normal((n, d)) @ root.T * math.sqrt(spec.grid_dt) + np.asarray(spec.mu) * spec.grid_dt
    x = np.empty((n + 1, d))
    x[0] = spec.x0
    np.cumsum(inc, axis=0, out=x[1:])
    x[1:] += x[0]
    return GridPath(spec.grid_dt, x)


def _check_start(q0) -> np.ndarray:
    q0 = np.asarray(q0, dtype=float)
    if np.any(q0 <= 0):
        raise InvariantViolation(f"limit start queues must be strictly positive, got {q0}")
    return q0


class LimitReinit:
    """Reinit values for the limit maps: unit * eps, or phi(q_pre, unit * eps)."""

    def __init__(self, spec: ReinitSpec, rng: np.random.Generator, unit: float = 1.0):
        self.spec = spec
        self.draws = ReinitDraws(spec, rng)
        self.unit = unit

    def __call__(self, k: int, up: bool, q_pre: np.ndarray) -> np.ndarray:
        eps = self.draws.eps(k, up) * self.unit
        if self.spec.phi is None:
            return eps.astype(float)
        r = np.asarray(self.spec.phi(np.asarray(q_pre), eps), dtype=float)
        if np.any(r < self.spec.alpha_floor * eps - 1e-12):
            raise InvariantViolation("phi violates the reinit floor")
        return r


def _streams(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return np.random.default_rng(a), np.random.default_rng(b)


def _pieces(n, B, C, Q, regime, pcs, pcd, pcc, reinit, dt, sig=(), rho=()):
    return Trajectory(dt, Q, B, C, np.zeros((0, 4), np.int64), regime,
                      np.asarray(pcs, np.int64), np.asarray(pcd, np.int64), np.asarray(pcc, np.int64),
                      np.asarray(reinit, float).reshape(-1, 4),
                      np.asarray(sig, np.int64), np.asarray(rho, np.int64))


def simulate_active_limit(s0, seed, spec: BmSpec, r: ReinitSpec, T: float, reinit_unit: float = 1.0,
                          path: Optional[GridPath] = None) -> Trajectory:
    """Coupled limit book. `s0` supplies B (ticks) and C; the start queues are spec.x0."""
    rng_path, rng_r = _streams(seed)
    _check_start(spec.x0)
    x = path if path is not None else sample_bm_path(rng_path, spec, T)
    f = LimitReinit(r, rng_r, reinit_unit)
    b0 = np.zeros(2, np.int64) if s0 is None else np.asarray(s0.B, np.int64)
    c0 = 0.0 if s0 is None else float(s0.C)
    res = paths.psi_active(x.values, f, f, c0=c0)
    n = len(res.C)
    B = np.stack([res.B, res.B], 1) + b0
    pcd = np.where(res.up, 1, -1)
    return _pieces(n, B, res.C, res.Q, np.ones(n, np.int8), res.tau, pcd, np.full(len(pcd), -1),
                   res.reinit, x.dt)


def simulate_inactive_limit(s0, seed, spec: BmSpec, r: ReinitSpec, T: float, reinit_unit: float = 1.0,
                            path: Optional[GridPath] = None) -> Trajectory:
    rng_path, rng_r = _streams(seed)
    _check_start(spec.x0)
    x = path if path is not None else sample_bm_path(rng_path, spec, T)
    f = LimitReinit(r, rng_r, reinit_unit)
    b0 = np.zeros(2, np.int64) if s0 is None else np.asarray(s0.B, np.int64)
    c0 = 0.0 if s0 is None else float(s0.C)
    res = paths.psi_inactive(x.values, f, f)
    n = len(res.Q)
    pcs, pcd, pcc = [], [], []
    for k in res.tau:
        for c in (0, 1):
            d = res.B[k, c] - res.B[k - 1, c]
            if d:
                pcs.append(k)
                pcd.append(int(np.sign(d)))
                pcc.append(c)
    return _pieces(n, res.B + b0, np.full(n, c0), res.Q, np.zeros(n, np.int8), pcs, pcd, pcc, res.reinit, x.dt)


# components whose reflection pushes the capacity up / down, with the price move
# of the owning country under decoupling: (component, country, move)
_EXIT_UP = ((2, 1, -1), (1, 0, +1))
_EXIT_DOWN = ((0, 0, -1), (3, 1, +1))


def simulate_regime_switching_limit(s0, seed, spec: BmSpec, r: ReinitSpec, kappa_minus: float,
                                    kappa_plus: float, T: float, reinit_unit: float = 1.0,
                                    spec_inactive: Optional[BmSpec] = None,
                                    path: Optional[GridPath] = None,
                                    path_inactive: Optional[GridPath] = None) -> Trajectory:
    """Alternate coupled and decoupled limit books.

    The coupled book runs until the capacity leaves [-kappa_minus, kappa_plus];
    the capacity is then frozen at the boundary it crossed. The country whose
    queue was being drained across the border moves its price one tick and
    reinitializes its pair; the other pair keeps its pre-switch value. The
    decoupled book runs until the prices agree again. If a price change and
    the capacity exit fall on the same grid point the switch wins.

    The decoupled book is driven by the increments of `spec_inactive`
    (default: same law) sampled on the same grid.
    """
    rng_path, rng_r = _streams(seed)
    _check_start(spec.x0)
    x = path if path is not None else sample_bm_path(rng_path, spec, T)
    if path_inactive is not None:
        xi = path_inactive
    elif spec_inactive is None:
        xi = x
    else:
        xi = sample_bm_path(rng_path, spec_inactive, T)
    w, wi = x.values, xi.values
    f = LimitReinit(r, rng_r, reinit_unit)
    n = len(w)
    Q = np.zeros((n, 4))
    B = np.zeros((n, 2), np.int64)
    C = np.zeros(n)
    reg = np.zeros(n, np.int8)
    pcs, pcd, pcc, rein, sig, rho = [], [], [], [], [], []
    b = np.zeros(2, np.int64) if s0 is None else np.asarray(s0.B, np.int64).copy()
    if b[0] != b[1]:
        raise InvariantViolation("regime-switching run must start coupled")
    c = 0.0 if s0 is None else float(s0.C)
    q = np.asarray(spec.x0, dtype=float).copy()
    start, active, k_count = 0, True, 0
    if not -kappa_minus <= c <= kappa_plus:
        raise InvariantViolation(f"start capacity {c} outside the window")
    while True:
        if active:
            seg = w[start:] - w[start] + q
            res = paths.psi_active(seg, f, f, k0=k_count, c0=c)
            out = np.flatnonzero((res.C < -kappa_minus) | (res.C > kappa_plus))
            end = int(out[0]) if len(out) else len(seg)
            Q[start:start + end] = res.Q[:end]
            C[start:start + end] = res.C[:end]
            B[start:start + end] = b + res.B[:end, None]
            reg[start:start + end] = 1
            for t, up, rv in zip(res.tau, res.up, res.reinit):
                if t < end:
                    pcs.append(start + t)
                    pcd.append(1 if up else -1)
                    pcc.append(-1)
                    rein.append(rv)
                    k_count += 1
            if not len(out):
                break
            j = start + end
            if end in set(res.tau.tolist()):
                log.info("capacity exit and price change on the same grid point %d; switching", j)
            b = B[j - 1].copy()
            q_pre = Q[j - 1].copy()
            up_exit = res.C[end] > kappa_plus
            c = kappa_plus if up_exit else -kappa_minus
            cands = _EXIT_UP if up_exit else _EXIT_DOWN
            free = [q_pre[comp] + w[j, comp] - w[j - 1, comp] for comp, _, _ in cands]
            comp, country, move = cands[int(np.argmin(free))]
            k_count += 1
            rv = f(k_count, move > 0, q_pre)
            q = q_pre.copy()
            q[2 * country:2 * country + 2] = rv[2 * country:2 * country + 2]
            b[country] += move
            pcs.append(j)
            pcd.append(move)
            pcc.append(country)
            rein.append(rv)
            sig.append(j)
            Q[j], B[j], C[j], reg[j] = q, b, c, 0
            start, active = j, False
            if np.any(q <= 0):
                # a pre-switch queue sitting at zero: let the decoupled map handle it next step
                log.debug("decoupled start with an empty queue at %d", j)
        else:
            seg = wi[start:] - wi[start] + q
            res = paths.psi_inactive(seg, f, f, k0=k_count)
            Bseg = b + res.B
            eq = np.flatnonzero(Bseg[1:, 0] == Bseg[1:, 1])
            end = int(eq[0]) + 1 if len(eq) else len(seg) - 1
            Q[start + 1:start + end + 1] = res.Q[1:end + 1]
            B[start + 1:start + end + 1] = Bseg[1:end + 1]
            C[start + 1:start + end + 1] = c
            reg[start + 1:start + end + 1] = 0
            ri = 0
            for t in res.tau:
                for cc in (0, 1):
                    d = res.B[t, cc] - res.B[t - 1, cc]
                    if d:
                        if t <= end:
                            pcs.append(start + t)
                            pcd.append(int(np.sign(d)))
                            pcc.append(cc)
                            rein.append(res.reinit[ri])
                        ri += 1
                if t <= end:
                    k_count += 1
            if not len(eq):
                break
            j = start + end
            rho.append(j)
            q = Q[j].copy()
            b = B[j].copy()
            reg[j] = 1
            start, active = j, True
    return _pieces(n, B, C, Q, reg, pcs, pcd, pcc, rein, x.dt, sig, rho)


# ---------------------------------------------------------------- first price change
#
# Monte Carlo of the summed (bid, ask) flows only. Between price changes the
# cumulative queues of the coupled limit book are exactly this planar Brownian
# motion, so the first change time and side need nothing else.


@njit(cache=True)
def _exit_chunk(x, z, root, drift, k0, dt, h0, renew, times, side, count, b, lo, hi, alive):
    # z has shape (paths, steps, 2); only paths flagged alive are advanced
    for p in range(x.shape[0]):
        x0 = x[p, 0]
        x1 = x[p, 1]
        for k in range(z.shape[1]):
            z0 = z[p, k, 0]
            z1 = z[p, k, 1]
            x0 += root[0, 0] * z0 + root[0, 1] * z1 + drift[0]
            x1 += root[1, 0] * z0 + root[1, 1] * z1 + drift[1]
            if x0 <= 0 or x1 <= 0:
                up = x1 <= 0 and not x0 <= 0
                if x0 <= 0 and x1 <= 0:
                    up = x1 < x0
                if count[p] == 0:
                    times[p] = (k0 + k + 1) * dt
                    side[p] = 1 if up else -1
                count[p] += 1
                b[p] += 1 if up else -1
                lo[p] = min(lo[p], b[p])
                hi[p] = max(hi[p], b[p])
                if not renew:
                    alive[p] = False
                    break
                x0 = h0[0]
                x1 = h0[1]
        x[p, 0] = x0
        x[p, 1] = x1


def _exit_mc(seed, h0, mu_h, cov_h, T, dt, reps, renew, batch=10_000, chunk=200):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    root = _sqrt_psd(np.asarray(cov_h, dtype=float)) * math.sqrt(dt)
    drift = np.asarray(mu_h, dtype=float) * dt
    h0 = np.asarray(h0, dtype=float)
    steps = int(round(T / dt))
    times = np.full(reps, np.inf)
    side = np.zeros(reps, np.int8)
    count = np.zeros(reps, np.int64)
    width = np.zeros(reps, np.int64)
    for s0 in range(0, reps, batch):
        m = min(batch, reps - s0)
        st = [np.tile(h0, (m, 1)), np.full(m, np.inf), np.zeros(m, np.int8), np.zeros(m, np.int64),
              np.zeros(m, np.int64), np.zeros(m, np.int64), np.zeros(m, np.int64), np.ones(m, np.bool_)]
        live = np.arange(m)
        for k0 in range(0, steps, chunk):
            if not len(live):
                break
            c = min(chunk, steps - k0)
            z = rng.standard_normal((len(live), c, 2))
            sub = [a[live] for a in st]
            _exit_chunk(sub[0], z, root, drift, k0, dt, h0, renew, *sub[1:])
            for a, v in zip(st, sub):
                a[live] = v
            live = live[sub[7]]
        times[s0:s0 + m] = st[1]
        side[s0:s0 + m] = st[2]
        count[s0:s0 + m] = st[3]
        width[s0:s0 + m] = st[6] - st[5]
    return times, side, count, width


def first_change(seed, h0, mu_h, cov_h, T: float, dt: float, reps: int) -> tuple[np.ndarray, np.ndarray]:
    """Exit times (inf if none by T) and sides (+1: ask sum hit, price up) of the summed flows.

    Grid-monitored, no bridge correction.
    """
    t, sd, _, _ = _exit_mc(seed, h0, mu_h, cov_h, T, dt, reps, False)
    return t, sd


def first_change_times(seed, h0, mu_h, cov_h, T: float, dt: float, reps: int) -> np.ndarray:
    return first_change(seed, h0, mu_h, cov_h, T, dt, reps)[0]


def renewal_counts(seed, h0, mu_h, cov_h, T: float, dt: float, reps: int) -> tuple[np.ndarray, np.ndarray]:
    """Number of price changes and bid-price range (ticks) when every reinit equals the start point."""
    _, _, cnt, rg = _exit_mc(seed, h0, mu_h, cov_h, T, dt, reps, True)
    return cnt, rg
