"""Regulated-path functionals on uniform grids.

Paths are arrays of shape (N+1, d). Integer arrays (dv units) give exact
results for lattice paths; float arrays are used by the limit engine.

The two-dimensional map alternates one-sided reflections at zero with
reflection matrix [[1,-1],[-1,1]]: the component currently held at zero pushes
its deficit onto the other one. Once both are depleted the pair is absorbed at
the origin.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit

from .flow import GridPath

R_MAT = np.array([[1, -1], [-1, 1]])

FREE, REFL0, REFL1, ABSORBED = 0, 1, 2, 3


@dataclass
class ReflectionRecord:
    reflection_times: np.ndarray  # grid indices of the successive reflection switches
    regulators: np.ndarray  # (N+1, 2) cumulative reflection amounts
    absorbed_at: int  # grid index, or -1


def skorokhod1d(w):
    """z = w + l with l_t = sup_{s<=t} (-w_s)^+."""
    vals = w.values if isinstance(w, GridPath) else np.asarray(w)
    vals = vals.reshape(len(vals), -1)[:, 0]
    l = np.maximum.accumulate(np.maximum(-vals, 0))
    z = vals + l
    if isinstance(w, GridPath):
        return GridPath(w.dt, z[:, None], w.interp), GridPath(w.dt, l[:, None], w.interp)
    return z, l


@njit(cache=True)
def _g_advance(x, gb, sp, mode, d0, d1):
    """Advance one grid step of the reflected pair. Returns 0, 1 (switch) or 2 (absorbed)."""
    m = mode[0]
    if m == 3:
        return 0
    x0 = x[0] + d0
    x1 = x[1] + d1
    zero = x0 - x0
    if m == 0:
        if x0 <= 0 and x1 <= 0:
            gb[0] += max(zero, -x0)
            gb[1] += max(zero, -x1)
            x[0] = zero
            x[1] = zero
            mode[0] = 3
            return 2
        if x0 <= 0 or x1 <= 0:
            j = 0 if x0 <= 0 else 1
            xs = (x0, x1)
            xj = xs[j]
            xi = xs[1 - j]
            push = -xj
            xj = zero
            xi -= push
            gb[j] += push
            sp[0] = push
            if xi <= 0:
                gb[1 - j] += max(zero, -(xi + push))
                x[0] = zero
                x[1] = zero
                mode[0] = 3
                return 2
            x[j] = xj
            x[1 - j] = xi
            mode[0] = j + 1
            return 1
        x[0] = x0
        x[1] = x1
        return 0
    j = m - 1
    i = 1 - j
    xj = x0 if j == 0 else x1
    xi = x1 if j == 0 else x0
    push = max(zero, -xj)
    xj += push
    xi -= push
    gb[j] += push
    sp[0] += push
    if xi <= 0:
        if xj <= 0:
            gb[i] += max(zero, -(xi + sp[0]))
            x[0] = zero
            x[1] = zero
            mode[0] = 3
            return 2
        push2 = -xi
        xi = zero
        xj -= push2
        gb[i] += push2
        sp[0] = push2
        if xj <= 0:
            x[0] = zero
            x[1] = zero
            mode[0] = 3
            return 2
        mode[0] = i + 1
        x[i] = xi
        x[j] = xj
        return 1
    x[i] = xi
    x[j] = xj
    return 0


@njit(cache=True)
def _g_path(w):
    n = w.shape[0]
    g = np.zeros_like(w)
    gb = np.zeros_like(w)
    x = np.zeros(2, w.dtype)
    b = np.zeros(2, w.dtype)
    sp = np.zeros(1, w.dtype)
    mode = np.zeros(1, np.int64)
    times = np.full(n + 1, -1, np.int64)
    nt = 0
    absorbed = -1
    # start from the origin so that step 0 is classified like any other step
    for k in range(n):
        if k == 0:
            ev = _g_advance(x, b, sp, mode, w[0, 0], w[0, 1])
        else:
            ev = _g_advance(x, b, sp, mode, w[k, 0] - w[k - 1, 0], w[k, 1] - w[k - 1, 1])
        if ev == 1:
            times[nt] = k
            nt += 1
        elif ev == 2 and absorbed < 0:
            absorbed = k
        g[k, 0] = x[0]
        g[k, 1] = x[1]
        gb[k, 0] = b[0]
        gb[k, 1] = b[1]
    return g, gb, times[:nt], absorbed


def _vals(w) -> np.ndarray:
    v = w.values if isinstance(w, GridPath) else np.asarray(w)
    if v.dtype.kind not in "if":
        v = v.astype(float)
    if v.dtype.kind == "i":
        return np.ascontiguousarray(v, dtype=np.int64)
    return np.ascontiguousarray(v, dtype=np.float64)


def g_map(w) -> tuple[np.ndarray, ReflectionRecord]:
    v = _vals(w)
    g, gb, times, absorbed = _g_path(v)
    return g, ReflectionRecord(times, gb, int(absorbed))


def gbar_map(w) -> np.ndarray:
    return g_map(w)[1].regulators


def h(q: np.ndarray) -> np.ndarray:
    """(bid sum, ask sum) of a four-component path."""
    q = np.asarray(q)
    return np.stack([q[:, 0] + q[:, 2], q[:, 1] + q[:, 3]], axis=1)


def hitting_maps(q, T: Optional[float] = None, dt: float = 1.0) -> tuple[float, float, float]:
    """First grid times where the summed bid / ask components are <= 0, capped at T."""
    v = q.values if isinstance(q, GridPath) else np.asarray(q)
    if isinstance(q, GridPath):
        dt = q.dt
    T = (len(v) - 1) * dt if T is None else T
    hh = h(v)
    out = []
    for c in (0, 1):
        idx = np.flatnonzero(hh[:, c] <= 0)
        out.append(min(idx[0] * dt, T) if len(idx) else T)
    return out[0], out[1], min(out)


def G_map(q) -> np.ndarray:
    v = _vals(q)
    gb_, _ = g_map(v[:, [0, 2]])
    ga_, _ = g_map(v[:, [1, 3]])
    return np.stack([gb_[:, 0], ga_[:, 0], gb_[:, 1], ga_[:, 1]], axis=1)


def Ghat_map(q) -> np.ndarray:
    v = _vals(q)
    bb = gbar_map(v[:, [0, 2]])
    ba = gbar_map(v[:, [1, 3]])
    return bb[:, 1] - bb[:, 0] - ba[:, 1] + ba[:, 0]


# ---------------------------------------------------------------- composite maps


@njit(cache=True)
def _active_segment(w, start, r, Q, C, c0):
    """Run G from index `start` with value r until the first side is absorbed.

    Writes Q and C (capacity offset c0) in place. Returns (hit index or -1, side)
    with side 0 = bid, 1 = ask.
    """
    n = w.shape[0]
    xb = np.zeros(2, w.dtype)
    xa = np.zeros(2, w.dtype)
    gbb = np.zeros(2, w.dtype)
    gba = np.zeros(2, w.dtype)
    spb = np.zeros(1, w.dtype)
    spa = np.zeros(1, w.dtype)
    mb = np.zeros(1, np.int64)
    ma = np.zeros(1, np.int64)
    xb[0] = r[0]
    xb[1] = r[2]
    xa[0] = r[1]
    xa[1] = r[3]
    zero = r[0] - r[0]
    # the start value is strictly positive, so no reflection at `start`
    Q[start, 0] = r[0]
    Q[start, 1] = r[1]
    Q[start, 2] = r[2]
    Q[start, 3] = r[3]
    C[start] = c0
    for k in range(start + 1, n):
        eb = _g_advance(xb, gbb, spb, mb, w[k, 0] - w[k - 1, 0], w[k, 2] - w[k - 1, 2])
        ea = _g_advance(xa, gba, spa, ma, w[k, 1] - w[k - 1, 1], w[k, 3] - w[k - 1, 3])
        Q[k, 0] = xb[0]
        Q[k, 1] = xa[0]
        Q[k, 2] = xb[1]
        Q[k, 3] = xa[1]
        C[k] = c0 + gbb[1] - gbb[0] - gba[1] + gba[0]
        if eb == 2 or ea == 2:
            if eb == 2 and ea == 2:
                return k, 2
            return k, 0 if eb == 2 else 1
    return -1, 0


@njit(cache=True)
def _inactive_segment(w, start, x0, Q):
    n = w.shape[0]
    x = x0.copy()
    for j in range(4):
        Q[start, j] = x[j]
    for k in range(start + 1, n):
        hit = False
        for j in range(4):
            x[j] += w[k, j] - w[k - 1, j]
            Q[k, j] = x[j]
            if x[j] <= 0:
                hit = True
        if hit:
            return k
    return -1


ReinitFn = Callable[[int, bool, np.ndarray], np.ndarray]


def _reinit_fn(r_plus, r_minus) -> ReinitFn:
    if callable(r_plus):
        return r_plus
    rp = np.asarray(r_plus)
    rm = np.asarray(r_minus)

    def f(k: int, up: bool, q_pre: np.ndarray) -> np.ndarray:
        return (rp if up else rm)[k - 1]

    return f


@dataclass
class ActiveMapResult:
    Q: np.ndarray
    C: np.ndarray
    B: np.ndarray  # (N+1,) price offset in ticks, equal for both countries
    tau: np.ndarray  # hitting indices
    up: np.ndarray  # True for ask-side hits
    reinit: np.ndarray


def psi_active(q, r_plus, r_minus, tie: str = "up", k0: int = 0, c0=0) -> ActiveMapResult:
    """Composite map for the coupled book: queues, capacity increments and price offsets.

    `q` is the start value plus net flow. `r_plus` / `r_minus` are sequences
    indexed by price change (first entry used first) or a callable
    f(k, up, q_pre) returning the k-th reinit value. A price change on the last
    grid point reinitializes like any other, as in the event-level book.
    `k0` offsets the price-change index (for runs spliced across regimes) and
    `c0` is the starting capacity.
    """
    v = _vals(q)
    n = len(v)
    Q = np.zeros_like(v)
    C = np.zeros(n, dtype=v.dtype)
    f = _reinit_fn(r_plus, r_minus)
    taus, ups, rs = [], [], []
    start, r, c0 = 0, v[0].copy(), v.dtype.type(c0)
    while True:
        k, side = _active_segment(v, start, r, Q, C, c0)
        if k < 0:
            break
        up = side == 1 or (side == 2 and tie == "up")
        q_pre = Q[k - 1].copy()
        r = np.asarray(f(k0 + len(taus) + 1, up, q_pre), dtype=v.dtype)
        taus.append(k)
        ups.append(up)
        rs.append(r.copy())
        start, c0 = k, C[k]
    B = np.zeros(n, dtype=np.int64)
    for k, up in zip(taus, ups):
        B[k:] += 1 if up else -1
    return ActiveMapResult(Q, C, B, np.array(taus, np.int64), np.array(ups, bool),
                           np.array(rs, dtype=v.dtype).reshape(-1, 4))


def psi_q_active(q, r_plus, r_minus) -> np.ndarray:
    return psi_active(q, r_plus, r_minus).Q


def psi_c_active(q, r_plus, r_minus) -> np.ndarray:
    return psi_active(q, r_plus, r_minus).C


def psi_b_active(q, r_plus, r_minus, delta: float = 1.0) -> np.ndarray:
    b = psi_active(q, r_plus, r_minus).B
    return np.stack([b, b], axis=1) * delta


@dataclass
class InactiveMapResult:
    Q: np.ndarray
    B: np.ndarray  # (N+1, 2) price offsets in ticks
    tau: np.ndarray
    comp: np.ndarray  # which component hit (0..3)
    reinit: np.ndarray


def psi_inactive(q, r_plus, r_minus, k0: int = 0) -> InactiveMapResult:
    """Decoupled books: a hit of one component reinitializes its country's pair only.

    If both components of one country are <= 0 at the same grid point the more
    negative one is taken as the depleted queue (bid on exact ties).
    """
    v = _vals(q)
    n = len(v)
    Q = np.zeros_like(v)
    f = _reinit_fn(r_plus, r_minus)
    taus, comps, rs = [], [], []
    start, x = 0, v[0].copy()
    B = np.zeros((n, 2), dtype=np.int64)
    while True:
        k = _inactive_segment(v, start, x, Q)
        if k < 0:
            break
        q_pre = Q[k - 1].copy()
        x = Q[k].copy()
        idx = k0 + len(taus) + 1
        hit_c = []
        for c in (0, 1):
            pair = Q[k, 2 * c:2 * c + 2]
            if pair.min() <= 0:
                j = 2 * c + (1 if pair[1] < pair[0] else 0)
                hit_c.append(j)
        for j in hit_c:
            up = bool(j & 1)
            c = j >> 1
            r = np.asarray(f(idx, up, q_pre), dtype=v.dtype)
            x[2 * c:2 * c + 2] = r[2 * c:2 * c + 2]
            B[k:, c] += 1 if up else -1
            rs.append(r)
        taus.append(k)
        comps.append(hit_c[0] if len(hit_c) == 1 else -1)
        start = k
    return InactiveMapResult(Q, B, np.array(taus, np.int64), np.array(comps, np.int64),
                             np.array(rs, dtype=v.dtype).reshape(-1, 4))


def psi_q_inactive(q, r_plus, r_minus) -> np.ndarray:
    return psi_inactive(q, r_plus, r_minus).Q


def psi_b_inactive(q, r_plus, r_minus, delta: float = 1.0) -> np.ndarray:
    return psi_inactive(q, r_plus, r_minus).B * delta
