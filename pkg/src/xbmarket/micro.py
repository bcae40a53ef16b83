"""Event-by-event simulation of the coupled, decoupled and regime-switching books.

Two routes exist. `step_active` / `step_inactive` are a plain per-event
reference. The `run_*` folds use compiled kernels when the reinit map is the
identity in eps, and fall back to folding the reference steps otherwise.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numba import njit

from .core import INF_UNITS, MarketState, ModelParams, ReinitSpec
from .errors import InvariantViolation
from .flow import OrderEvent, OrderStream

log = logging.getLogger(__name__)

# C changes by this much when an order of the given type trades across the border
CROSS_SIGN = np.array([-1, 1, 1, -1], dtype=np.int64)


class ReinitDraws:
    """Lazily extended sequences eps+_l, eps-_l (l = 1, 2, ...).

    Rows are appended in fixed-size chunks from a dedicated generator, so the
    l-th pair never depends on how many pairs were consumed before.
    """

    CHUNK = 64

    def __init__(self, spec: ReinitSpec, rng: Optional[np.random.Generator] = None, plus=None, minus=None):
        self.spec = spec
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._p = np.zeros((1, 4), dtype=np.int64)
        self._m = np.zeros((1, 4), dtype=np.int64)
        if plus is not None:
            self._p = np.vstack([self._p, np.asarray(plus, dtype=np.int64)])
            self._m = np.vstack([self._m, np.asarray(minus, dtype=np.int64)])

    def ensure(self, l: int) -> None:
        while len(self._p) <= l:
            both = self.spec.draw(self.rng, 2 * self.CHUNK)
            self._p = np.vstack([self._p, both[0::2]])
            self._m = np.vstack([self._m, both[1::2]])

    def eps(self, l: int, up: bool) -> np.ndarray:
        self.ensure(l)
        return (self._p if up else self._m)[l]

    def value(self, l: int, up: bool, q_pre: np.ndarray) -> np.ndarray:
        r = self.spec.apply(q_pre, self.eps(l, up))
        if np.any(r <= 0):
            raise InvariantViolation(f"reinit value must be positive, got {r}")
        return r

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self._p, self._m


@dataclass
class StepInfo:
    move: int = 0  # -1 down, +1 up, 0 none
    country: int = -1  # -1 both (coupled book), 0 F, 1 G
    cross: bool = False


# ---------------------------------------------------------------- reference steps


def step_active(s: MarketState, e: OrderEvent, draws: ReinitDraws) -> tuple[MarketState, StepInfo]:
    if s.B[0] != s.B[1]:
        raise InvariantViolation("active step needs equal bid prices")
    k, v = e.kind, e.size
    dom, frn = k, k ^ 2
    out = s.copy()
    q = out.Q
    if v > 0:
        q[dom] += 1
        return out, StepInfo()
    cum = q[dom] + q[frn]
    if q[dom] >= 1 and cum > 1:
        q[dom] -= 1
        return out, StepInfo()
    if q[dom] == 0 and cum > 1:
        q[frn] -= 1
        out.C += int(CROSS_SIGN[k])
        return out, StepInfo(cross=True)
    if cum != 1:
        raise InvariantViolation(f"market order against an empty cumulative queue: Q={s.Q}")
    up = bool(k & 1)
    out.l += 1
    out.Q = draws.value(out.l, up, s.Q)
    out.B = out.B + (1 if up else -1)
    cross = q[dom] == 0
    if cross:
        out.C += int(CROSS_SIGN[k])
    return out, StepInfo(move=1 if up else -1, cross=cross)


def step_inactive(s: MarketState, e: OrderEvent, draws: ReinitDraws) -> tuple[MarketState, StepInfo]:
    k, v = e.kind, e.size
    out = s.copy()
    if out.Q[k] > -v:
        out.Q[k] += v
        return out, StepInfo()
    up = bool(k & 1)
    c = k >> 1
    out.l += 1
    r = draws.value(out.l, up, s.Q)
    out.Q[2 * c:2 * c + 2] = r[2 * c:2 * c + 2]
    out.B[c] += 1 if up else -1
    return out, StepInfo(move=1 if up else -1, country=c)


@dataclass(frozen=True)
class ZIndicator:
    z_F: int
    z_G: int


def compute_z(s_pre: MarketState, e: OrderEvent) -> ZIndicator:
    z = []
    for c in (0, 1):
        pair = s_pre.Q[2 * c:2 * c + 2].copy()
        if e.kind >> 1 == c:
            pair[e.kind & 1] += e.size
        if pair[0] >= 0 and pair[1] == -1:
            z.append(1)
        elif pair[0] == -1 and pair[1] >= 0:
            z.append(-1)
        else:
            z.append(0)
    return ZIndicator(*z)


# ---------------------------------------------------------------- trajectories


@dataclass
class Trajectory:
    dt: float
    Q: np.ndarray  # (N+1, 4)
    B: np.ndarray  # (N+1, 2) ticks
    C: np.ndarray  # (N+1,)
    M: np.ndarray  # (N+1, 4) cross-border counters
    regime: np.ndarray  # (N+1,) 1 active, 0 inactive
    pc_step: np.ndarray  # event index of each price change
    pc_dir: np.ndarray  # +1 up, -1 down
    pc_country: np.ndarray  # -1 both, 0 F, 1 G
    reinit: np.ndarray  # (L, 4) reinit value used at each price change
    sigma_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rho_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    incidents: list = field(default_factory=list)

    @property
    def price_change_times(self) -> np.ndarray:
        return self.pc_step * self.dt

    @property
    def n_price_changes(self) -> int:
        return len(self.pc_step)

    def count(self, country: int) -> int:
        """Price changes seen by one national price (coupled moves count for both)."""
        return int(np.sum((self.pc_country == country) | (self.pc_country == -1)))

    def price_range(self, country: int) -> int:
        b = self.B[:, country]
        return int(b.max() - b.min())

    def to_csv(self, path, tick: float = 1.0, dv: float = 1.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "Q_bF", "Q_aF", "Q_bG", "Q_aG", "B_F", "B_G", "C", "regime"])
            for k in range(len(self.C)):
                w.writerow([f"{k * self.dt:.9g}", *(f"{x * dv:.9g}" for x in self.Q[k]),
                            *(f"{x * tick:.9g}" for x in self.B[k]), f"{self.C[k] * dv:.9g}",
                            "active" if self.regime[k] else "inactive"])

    def events_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "event", "detail"])
            rows = [(s, "price_change", f"{'up' if d > 0 else 'down'}:{'FG' if c < 0 else 'FG'[c]}")
                    for s, d, c in zip(self.pc_step, self.pc_dir, self.pc_country)]
            rows += [(s, "switch_inactive", "") for s in self.sigma_steps]
            rows += [(s, "switch_active", "") for s in self.rho_steps]
            for s, ev, det in sorted(rows, key=lambda r: r[0]):
                w.writerow([f"{s * self.dt:.9g}", ev, det])


def _fold(s0: MarketState, stream: OrderStream, draws: ReinitDraws, active: bool) -> Trajectory:
    n = len(stream)
    Q = np.zeros((n + 1, 4), np.int64)
    B = np.zeros((n + 1, 2), np.int64)
    C = np.zeros(n + 1, np.int64)
    M = np.zeros((n + 1, 4), np.int64)
    s = s0.copy()
    Q[0], B[0], C[0] = s.Q, s.B, s.C
    pcs, pcd, pcc, rein = [], [], [], []
    step = step_active if active else step_inactive
    for k, (kind, size) in enumerate(zip(stream.kind, stream.size), start=1):
        e = OrderEvent.of(int(kind), int(size))
        M[k] = M[k - 1]
        if active and size < 0 and s.Q[kind] == 0:
            M[k, kind] += 1
        prev = s
        s, info = step(s, e, draws)
        if info.move:
            pcs.append(k)
            pcd.append(info.move)
            pcc.append(info.country)
            rein.append(draws.value(s.l, info.move > 0, prev.Q))
        Q[k], B[k], C[k] = s.Q, s.B, s.C
    return Trajectory(stream.params.dt, Q, B, C, M, np.full(n + 1, 1 if active else 0, np.int8),
                      np.array(pcs, np.int64), np.array(pcd, np.int64), np.array(pcc, np.int64),
                      np.array(rein, np.int64).reshape(-1, 4))


# ---------------------------------------------------------------- compiled kernels

# status codes
OK, OVERFLOW, NEGATIVE, EMPTY = 0, 1, 2, 3


@njit(cache=True)
def _k_active_step(q, kind, v):
    """Queue update without reinit. Returns (move, dC, cross)."""
    dom = kind
    frn = kind ^ 2
    if v > 0:
        q[dom] += 1
        return 0, 0, False
    cum = q[dom] + q[frn]
    cs = -1 if (kind == 0 or kind == 3) else 1
    if q[dom] >= 1 and cum > 1:
        q[dom] -= 1
        return 0, 0, False
    if q[dom] == 0 and cum > 1:
        q[frn] -= 1
        return 0, cs, True
    if cum != 1:
        return 9, 0, False
    move = 1 if (kind & 1) else -1
    if q[dom] == 0:
        return move, cs, True
    return move, 0, False


@njit(cache=True)
def _k_run(kind, size, q0, b0, c0, Rp, Rm, active):
    n = kind.shape[0]
    L = Rp.shape[0] - 1
    Q = np.zeros((n + 1, 4), np.int64)
    B = np.zeros((n + 1, 2), np.int64)
    C = np.zeros(n + 1, np.int64)
    M = np.zeros((n + 1, 4), np.int64)
    pcs = np.zeros(L + 1, np.int64)
    pcd = np.zeros(L + 1, np.int64)
    pcc = np.zeros(L + 1, np.int64)
    q = q0.copy()
    b = b0.copy()
    c = c0
    l = 0
    for j in range(4):
        Q[0, j] = q[j]
    B[0, 0] = b[0]
    B[0, 1] = b[1]
    C[0] = c
    for k in range(1, n + 1):
        t = kind[k - 1]
        v = size[k - 1]
        for j in range(4):
            M[k, j] = M[k - 1, j]
        if active:
            if v < 0 and q[t] == 0:
                M[k, t] += 1
            move, dc, cross = _k_active_step(q, t, v)
            if move == 9:
                return Q, B, C, M, pcs, pcd, pcc, l, EMPTY, k
            c += dc
            if move != 0:
                l += 1
                if l > L:
                    return Q, B, C, M, pcs, pcd, pcc, l, OVERFLOW, k
                R = Rp if move > 0 else Rm
                for j in range(4):
                    q[j] = R[l, j]
                b[0] += move
                b[1] += move
                pcs[l - 1] = k
                pcd[l - 1] = move
                pcc[l - 1] = -1
        else:
            if q[t] > -v:
                q[t] += v
            else:
                move = 1 if (t & 1) else -1
                cc = t >> 1
                l += 1
                if l > L:
                    return Q, B, C, M, pcs, pcd, pcc, l, OVERFLOW, k
                R = Rp if move > 0 else Rm
                q[2 * cc] = R[l, 2 * cc]
                q[2 * cc + 1] = R[l, 2 * cc + 1]
                b[cc] += move
                pcs[l - 1] = k
                pcd[l - 1] = move
                pcc[l - 1] = cc
        for j in range(4):
            Q[k, j] = q[j]
        B[k, 0] = b[0]
        B[k, 1] = b[1]
        C[k] = c
    return Q, B, C, M, pcs, pcd, pcc, l, OK, n


@njit(cache=True)
def _decode1(u_t, u_s, cum, mp):
    t = 0
    while t < 3 and u_t >= cum[t]:
        t += 1
    v = -1 if u_s < mp[t] else 1
    return t, v


@njit(cache=True)
def _k_switch(u_type, u_sign, cum_a, mp_a, cum_i, mp_i, q0, b0, c0, Rp, Rm, kmin, kmax, add_v):
    n = u_type.shape[0]
    L = Rp.shape[0] - 1
    Q = np.zeros((n + 1, 4), np.int64)
    B = np.zeros((n + 1, 2), np.int64)
    C = np.zeros(n + 1, np.int64)
    M = np.zeros((n + 1, 4), np.int64)
    reg = np.zeros(n + 1, np.int8)
    pcs = np.zeros(L + 1, np.int64)
    pcd = np.zeros(L + 1, np.int64)
    pcc = np.zeros(L + 1, np.int64)
    sig = np.zeros(n + 1, np.int64)
    rho = np.zeros(n + 1, np.int64)
    nsig = 0
    nrho = 0
    q = q0.copy()
    b = b0.copy()
    c = c0
    l = 0
    active = True
    recouple = False
    for j in range(4):
        Q[0, j] = q[j]
    B[0, 0] = b[0]
    B[0, 1] = b[1]
    C[0] = c
    reg[0] = 1
    qp = np.zeros(4, np.int64)
    for k in range(1, n + 1):
        if active:
            t, v = _decode1(u_type[k - 1], u_sign[k - 1], cum_a, mp_a)
        else:
            t, v = _decode1(u_type[k - 1], u_sign[k - 1], cum_i, mp_i)
        for j in range(4):
            M[k, j] = M[k - 1, j]
        if recouple:
            # the re-coupling order is the first step of the coupled book
            active = True
            recouple = False
            rho[nrho] = k
            nrho += 1
        if active:
            for j in range(4):
                qp[j] = q[j]
            move, dc, cross = _k_active_step(q, t, v)
            if move == 9:
                return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, EMPTY, k
            cn = c + dc
            if cn < -kmin or cn > kmax:
                # boundary handoff computed from the pre-event state
                for j in range(4):
                    q[j] = qp[j]
                nz = 0
                l += 1
                if l > L:
                    return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, OVERFLOW, k
                for cc in range(2):
                    x0 = q[2 * cc]
                    x1 = q[2 * cc + 1]
                    if (t >> 1) == cc:
                        if (t & 1) == 0:
                            x0 += v
                        else:
                            x1 += v
                    z = 0
                    if x0 >= 0 and x1 == -1:
                        z = 1
                    elif x0 == -1 and x1 >= 0:
                        z = -1
                    if z != 0:
                        nz += 1
                        R = Rp if z > 0 else Rm
                        q[2 * cc] = R[l, 2 * cc]
                        q[2 * cc + 1] = R[l, 2 * cc + 1]
                        b[cc] += z
                        pcs[l - 1] = k
                        pcd[l - 1] = z
                        pcc[l - 1] = cc
                if nz != 1:
                    return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, EMPTY, k
                if add_v:
                    q[t] += v
                    if q[t] < 0:
                        return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, NEGATIVE, k
                active = False
                sig[nsig] = k
                nsig += 1
            else:
                if v < 0 and qp[t] == 0:
                    M[k, t] += 1
                c = cn
                if move != 0:
                    l += 1
                    if l > L:
                        return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, OVERFLOW, k
                    R = Rp if move > 0 else Rm
                    for j in range(4):
                        q[j] = R[l, j]
                    b[0] += move
                    b[1] += move
                    pcs[l - 1] = k
                    pcd[l - 1] = move
                    pcc[l - 1] = -1
        else:
            if q[t] > -v:
                q[t] += v
            else:
                move = 1 if (t & 1) else -1
                cc = t >> 1
                l += 1
                if l > L:
                    return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, OVERFLOW, k
                R = Rp if move > 0 else Rm
                q[2 * cc] = R[l, 2 * cc]
                q[2 * cc + 1] = R[l, 2 * cc + 1]
                b[cc] += move
                pcs[l - 1] = k
                pcd[l - 1] = move
                pcc[l - 1] = cc
            if b[0] == b[1]:
                recouple = True
        for j in range(4):
            Q[k, j] = q[j]
        B[k, 0] = b[0]
        B[k, 1] = b[1]
        C[k] = c
        reg[k] = 1 if active else 0
    return Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, OK, n


def _check(status: int, k: int, what: str) -> None:
    if status == NEGATIVE:
        raise InvariantViolation(f"{what}: queue went negative in a regime handoff at event {k}")
    if status == EMPTY:
        raise InvariantViolation(f"{what}: inconsistent state at event {k}")


def _reinit_rows(pcs, pcd, Rp, Rm, l):
    return np.array([(Rp if d > 0 else Rm)[i + 1] for i, d in enumerate(pcd[:l])], np.int64).reshape(-1, 4)


def _run_simple(s0: MarketState, stream: OrderStream, draws: ReinitDraws, active: bool) -> Trajectory:
    if draws.spec.phi is not None:
        return _fold(s0, stream, draws, active)
    draws.ensure(ReinitDraws.CHUNK)
    while True:
        Rp, Rm = draws.arrays()
        Q, B, C, M, pcs, pcd, pcc, l, status, k = _k_run(
            stream.kind, stream.size, s0.Q.astype(np.int64), s0.B.astype(np.int64), int(s0.C), Rp, Rm, active)
        if status == OVERFLOW:
            draws.ensure(2 * len(Rp))
            continue
        _check(status, k, "run_active" if active else "run_inactive")
        break
    n = len(stream)
    reinit = _reinit_rows(pcs, pcd, Rp, Rm, l)
    return Trajectory(stream.params.dt, Q, B, C, M, np.full(n + 1, 1 if active else 0, np.int8),
                      pcs[:l].copy(), pcd[:l].copy(), pcc[:l].copy(), reinit)


def run_active(s0: MarketState, stream: OrderStream, draws: ReinitDraws) -> Trajectory:
    return _run_simple(s0, stream, draws, True)


def run_inactive(s0: MarketState, stream: OrderStream, draws: ReinitDraws) -> Trajectory:
    return _run_simple(s0, stream, draws, False)


def run_regime_switching(s0: MarketState, stream: OrderStream, draws: ReinitDraws, p: ModelParams,
                         add_order_at_handoff: bool = True) -> Trajectory:
    """Coupled book until the capacity leaves its window, decoupled until prices meet.

    `add_order_at_handoff=False` selects the reading in which the triggering
    order is not re-applied to the reinitialized queue.
    """
    if s0.B[0] != s0.B[1]:
        raise InvariantViolation("regime-switching run must start coupled")
    if draws.spec.phi is not None:
        raise NotImplementedError("state-dependent reinit maps are supported by run_active/run_inactive only")
    kmin, kmax = p.kappa_units
    fa, fi = p.flow(False), p.flow(True)
    cum_a = np.cumsum(fa.event_probs)
    cum_i = np.cumsum(fi.event_probs)
    draws.ensure(ReinitDraws.CHUNK)
    while True:
        Rp, Rm = draws.arrays()
        (Q, B, C, M, reg, pcs, pcd, pcc, l, sig, nsig, rho, nrho, status, k) = _k_switch(
            stream.u_type, stream.u_sign, cum_a, np.asarray(fa.market_prob), cum_i, np.asarray(fi.market_prob),
            s0.Q.astype(np.int64), s0.B.astype(np.int64), int(s0.C), Rp, Rm, int(kmin), int(kmax), add_order_at_handoff)
        if status == OVERFLOW:
            draws.ensure(2 * len(Rp))
            continue
        if status != OK:
            log.warning("regime-switching run rejected at event %d (status %d)", k, status)
        _check(status, k, "run_regime_switching")
        break
    reinit = _reinit_rows(pcs, pcd, Rp, Rm, l)
    return Trajectory(stream.params.dt, Q, B, C, M, reg, pcs[:l].copy(), pcd[:l].copy(), pcc[:l].copy(), reinit,
                      sig[:nsig].copy(), rho[:nrho].copy())
