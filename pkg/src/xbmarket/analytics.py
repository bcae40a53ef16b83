"""Closed-form and numerical analytics for first exits, price ranges and the interface problem."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import product
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu
from scipy.special import ive, log_ndtr, ndtr

from .errors import (CFLViolation, DegenerateCovariance, DomainError, GridTooCoarse,
                     HittingNotAlmostSure, SeriesNotConverged)


# ---------------------------------------------------------------- wedge geometry


@dataclass(frozen=True)
class WedgeParams:
    alpha: float
    theta0: float
    a1: float
    a2: float
    d1: float
    d2: float
    U: float
    a_t: float


def _unpack_cov(sigma) -> tuple[float, float, float]:
    s = np.asarray(sigma, dtype=float)
    if s.shape != (2, 2):
        raise DegenerateCovariance(f"need a 2x2 covariance, got shape {s.shape}")
    if s[0, 0] <= 0 or s[1, 1] <= 0:
        raise DegenerateCovariance("variances must be positive")
    s1, s2 = math.sqrt(s[0, 0]), math.sqrt(s[1, 1])
    rho = 0.5 * (s[0, 1] + s[1, 0]) / (s1 * s2)
    if not abs(rho) < 1:
        raise DegenerateCovariance(f"|rho| = {abs(rho):.6g} is not below 1")
    return s1, s2, rho


def wedge_params(x, mu, sigma) -> WedgeParams:
    x1, x2 = (float(v) for v in x)
    m1, m2 = (float(v) for v in mu)
    s1, s2, rho = _unpack_cov(sigma)
    if not (x1 > 0 and x2 > 0):
        raise DomainError(f"start point {x} is not in the open quadrant")
    c = math.sqrt(1 - rho * rho)
    if rho > 0:
        alpha = math.pi + math.atan(-c / rho)
    elif rho == 0:
        alpha = math.pi / 2
    else:
        alpha = math.atan(-c / rho)
    den = x1 * s2 - rho * x2 * s1
    num = x2 * s1 * c
    if den < 0:
        theta0 = math.pi + math.atan(num / den)
    elif den == 0:
        theta0 = math.pi / 2
    else:
        theta0 = math.atan(num / den)
    a1 = (rho * m2 * s1 - m1 * s2) / ((1 - rho * rho) * s1 * s1 * s2)
    a2 = (rho * m1 * s2 - m2 * s1) / ((1 - rho * rho) * s2 * s2 * s1)
    d1 = a1 * s1 + rho * a2 * s2
    d2 = a2 * s2 * c
    U = (x1 * x1 / (s1 * s1) + x2 * x2 / (s2 * s2) - 2 * rho * x1 * x2 / (s1 * s2)) / (1 - rho * rho)
    a_t = 0.5 * a1 * a1 * s1 * s1 + rho * a1 * a2 * s1 * s2 + 0.5 * a2 * a2 * s2 * s2 + a1 * m1 + a2 * m2
    return WedgeParams(alpha, theta0, a1, a2, d1, d2, U, a_t)


# ---------------------------------------------------------------- survival series


@dataclass(frozen=True)
class SeriesControl:
    term_tol: float = 1e-12
    j_max: int = 4000
    n_r: int = 256  # Gauss-Legendre nodes on the radial interval
    n_theta: int = 96  # minimum angular nodes (grows with the number of terms)


def _gl(a: float, b: float, n: int, panels: int = 4) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.legendre.leggauss(max(n // panels, 8))
    edges = np.linspace(a, b, panels + 1)
    xs, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        xs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        ws.append(0.5 * (hi - lo) * w)
    return np.concatenate(xs), np.concatenate(ws)


def _radial_window(wp: WedgeParams, t: float, tol: float, c_lo: float, c_hi: float) -> tuple[float, float]:
    # exponent -(r - sqrt U)^2 / 2t - c r peaks at sqrt U - c t
    half = math.sqrt(2 * t * math.log(1 / tol)) + 3 * math.sqrt(t)
    su = math.sqrt(wp.U)
    lo = max(0.0, su - c_hi * t - half)
    hi = max(su - c_lo * t, 0.0) + half
    return lo, hi


def _series(wp: WedgeParams, x, t: float, ctl: SeriesControl, j_need: int) -> tuple[float, float]:
    al = wp.alpha
    driftless = wp.a1 == 0 and wp.a2 == 0
    if driftless:
        c_lo = c_hi = 0.0
    else:
        grid = al - np.linspace(0, al, 257)
        cg = wp.d1 * np.sin(grid) + wp.d2 * np.cos(grid)
        c_lo, c_hi = float(cg.min()), float(cg.max())
    lo, hi = _radial_window(wp, t, ctl.term_tol, c_lo, c_hi)
    r, wr = _gl(lo, hi, ctl.n_r, panels=8)
    b = math.sqrt(wp.U) / t
    j = np.arange(1, j_need + 1)
    nu = j * math.pi / al
    # exp(-U/2t - r^2/2t) I_nu(b r) = exp(-(r - sqrt U)^2 / 2t) ive(nu, b r)
    base = np.log(r) - (r - math.sqrt(wp.U)) ** 2 / (2 * t)
    Iv = ive(nu[:, None], b * r[None, :])
    if driftless:
        shift = base.max()
        radial = Iv @ (np.exp(base - shift) * wr)
        inner = al * (1 - (-1.0) ** j) / (j * math.pi) * radial
        bound = al * radial
    else:
        th, wth = _gl(0.0, al, max(ctl.n_theta, 4 * j_need), panels=8)
        cth = wp.d1 * np.sin(al - th) + wp.d2 * np.cos(al - th)
        expo = base[None, :] - r[None, :] * cth[:, None]
        shift = expo.max()
        K = Iv @ (np.exp(expo - shift) * wr[None, :]).T
        inner = (np.sin(np.outer(j, th) * math.pi / al) * K) @ wth
        bound = K @ wth
    log_scale = wp.a1 * float(x[0]) + wp.a2 * float(x[1]) + wp.a_t * t + shift
    pre = 2.0 / (al * t) * math.exp(min(log_scale, 700.0))
    total = pre * float(np.sum(np.sin(j * math.pi * wp.theta0 / al) * inner))
    # terms are bounded by a nonincreasing sequence (ive decreases in the order)
    return total, pre * float(bound[-1])


def survival_terms(x, mu, sigma, t: float, ctl: SeriesControl = SeriesControl()) -> tuple[float, int, float]:
    """(value, number of terms, bound on the last term) of the first-exit survival series."""
    if not t > 0:
        raise DomainError("t must be positive")
    wp = wedge_params(x, mu, sigma)
    hi = _radial_window(wp, t, ctl.term_tol, -abs(wp.d1) - abs(wp.d2), abs(wp.d1) + abs(wp.d2))[1]
    zmax = math.sqrt(wp.U) / t * hi
    # ive(nu, z) ~ exp(-nu^2 / 2z) while nu < z
    nu_need = math.sqrt(2 * max(zmax, 1.0) * math.log(1 / ctl.term_tol)) + 20
    j_need = int(nu_need * wp.alpha / math.pi) + 8
    while True:
        if j_need > ctl.j_max:
            raise SeriesNotConverged(f"needs more than j_max = {ctl.j_max} terms")
        total, last = _series(wp, x, t, ctl, j_need)
        if last < ctl.term_tol:
            return total, j_need, last
        j_need *= 2


def survival_probability(x, mu, sigma, t: float, ctl: SeriesControl = SeriesControl()) -> float:
    """P[planar BM from x stays in the open quadrant up to t]."""
    v, _, _ = survival_terms(x, mu, sigma, t, ctl)
    return float(min(1.0, max(0.0, v)))


def survival_driftless_hypergeometric(x, sigma, t: float, j_terms: int = 400) -> float:
    """Driftless survival with the radial integral in closed form (1F1); an independent route."""
    from scipy.special import gammaln, hyp1f1

    wp = wedge_params(x, (0.0, 0.0), sigma)
    a = 1 / (2 * t)
    bb = math.sqrt(wp.U) / t
    tot = 0.0
    for j in range(1, j_terms + 1, 2):
        nu = j * math.pi / wp.alpha
        lg = (nu * math.log(bb) + gammaln(nu / 2 + 1) - (nu + 1) * math.log(2) - (nu / 2 + 1) * math.log(a)
              - gammaln(nu + 1))
        # exp(-U/2t) * 1F1(nu/2+1; nu+1; U/2t)
        z = bb * bb / (4 * a)
        term = math.exp(lg - wp.U / (2 * t)) * hyp1f1(nu / 2 + 1, nu + 1, z)
        tot += math.sin(j * math.pi * wp.theta0 / wp.alpha) * 2 / (j * math.pi) * term
    return 2 / t * tot


# ---------------------------------------------------------------- upward move, exit law


@dataclass(frozen=True)
class Estimate:
    value: float
    se: float = 0.0
    method: str = "exact"

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class McControl:
    n_paths: int = 20_000
    dt: float = 1e-3
    T: float = 50.0
    seed: int = 0


def upward_probability(x, mu, sigma, ctl: McControl = McControl()) -> Estimate:
    """Probability that the bid sum is still positive when the quadrant is left.

    Exact without drift; Euler Monte Carlo with grid monitoring otherwise.
    """
    wp = wedge_params(x, mu, sigma)
    # a_t reduces to -mu' Sigma^-1 mu / 2, never positive; the exit is certain
    # exactly when some coordinate has no upward drift
    if wp.a_t > 1e-14 or min(float(m) for m in mu) > 0:
        raise HittingNotAlmostSure(f"drift {tuple(mu)} points into the quadrant: the exit time is infinite "
                                   "with positive probability")
    if wp.a1 == 0 and wp.a2 == 0:
        return Estimate((wp.alpha - wp.theta0) / wp.alpha)
    from .limit import first_change

    t, side = first_change(ctl.seed, x, mu, sigma, ctl.T, ctl.dt, ctl.n_paths)
    done = np.isfinite(t)
    p = float(np.mean(side[done] > 0)) if done.any() else float("nan")
    se = math.sqrt(p * (1 - p) / max(done.sum(), 1))
    return Estimate(p, se, "euler-mc")


def upward_probability_wos(x, sigma, n_paths: int = 100_000, eps: float = 1e-6, seed: int = 0) -> Estimate:
    """Driftless exit side by walk on spheres in whitened polar coordinates.

    Exact harmonic measure up to the eps-shell, so no time-discretization bias.
    """
    wp = wedge_params(x, (0.0, 0.0), sigma)
    rng = np.random.default_rng(seed)
    r = np.full(n_paths, math.sqrt(wp.U))
    th = np.full(n_paths, wp.theta0)
    px, py = r * np.cos(th), r * np.sin(th)
    alive = np.ones(n_paths, bool)
    up = np.zeros(n_paths, bool)
    for _ in range(100_000):
        if not alive.any():
            break
        ax, ay = px[alive], py[alive]
        rr = np.hypot(ax, ay)
        tt = np.arctan2(ay, ax)
        d0 = np.where(tt <= math.pi / 2, rr * np.sin(tt), rr)
        phi = wp.alpha - tt
        d1 = np.where(phi <= math.pi / 2, rr * np.sin(phi), rr)
        d = np.minimum(d0, d1)
        stop = d < eps * np.maximum(1.0, rr)
        idx = np.flatnonzero(alive)
        up[idx[stop]] = d0[stop] <= d1[stop]
        alive[idx[stop]] = False
        go = ~stop
        ang = rng.uniform(0, 2 * math.pi, go.sum())
        px[idx[go]] = ax[go] + d[go] * np.cos(ang)
        py[idx[go]] = ay[go] + d[go] * np.sin(ang)
    p = float(up.mean())
    return Estimate(p, math.sqrt(p * (1 - p) / n_paths), "walk-on-spheres")


def exit_location_density(x, sigma, z) -> np.ndarray:
    """Density of the first coordinate at the exit through the second axis (driftless).

    In whitened coordinates the exit radius is z / (sigma_1 sqrt(1 - rho^2)); the
    density is the harmonic measure of the wedge pulled back to z.
    """
    wp = wedge_params(x, (0.0, 0.0), sigma)
    s1, _, rho = _unpack_cov(sigma)
    scale = s1 * math.sqrt(1 - rho * rho)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise DomainError("z must be positive")
    k = math.pi / wp.alpha
    ph = k * wp.theta0
    lz = k * np.log(scale * math.sqrt(wp.U) / z)
    # cosh - cos written to stay finite for extreme z
    den = np.where(np.abs(lz) > 700, np.inf, np.cosh(np.clip(lz, -700, 700)) - math.cos(ph))
    return math.sin(ph) / (2 * z * wp.alpha) / den


# ---------------------------------------------------------------- random-walk range


def delta_nk(n: int, k: int, p: float) -> float:
    """The Delta_{n,k} sum in the range formula, as printed."""
    q = 1 - p
    r = q / p
    s = math.sqrt(p * q)
    tot = 0.0
    for m in range(1, n):
        if not 2 * m < n:
            break
        c = math.cos(m * math.pi / n)
        sn = math.sin(m * math.pi / n)
        for e in (1, -1):
            tot += ((2 * (e * math.sqrt(r)) ** n + (-1) ** (m + 1) * (1 + r ** n)) / (1 - 2 * e * s * c) ** 2
                    * e ** (k + 1 - n) * c ** (k - 1) * sn * sn)
    return tot / (2 * n * r ** n)


def range_formula_raw(n: int, k: int, p: float) -> float:
    """(2 sqrt(pq))^{k+1} r^{n/2} (sqrt(r) Delta_{n+1,k} - Delta_{n,k}) as printed."""
    q = 1 - p
    r = q / p
    return (2 * math.sqrt(p * q)) ** (k + 1) * r ** (n / 2) * (math.sqrt(r) * delta_nk(n + 1, k, p) - delta_nk(n, k, p))


def walk_range_cdf(n: int, k: int, p: float) -> float:
    """P[range of a k-step walk with up-probability p is <= n].

    The printed expression counts sites and positions: evaluated at (n+1, k+1)
    it gives the range in steps after k steps.
    """
    if k <= n:
        return 1.0
    if n == 0:
        return 0.0
    if n == 1:
        return walk_range_eq1(k, p)
    return range_formula_raw(n + 1, k + 1, p)


def walk_range_eq1(k: int, p: float) -> float:
    """P[range = 1] after k >= 1 steps: only the two alternating paths."""
    pq = p * (1 - p)
    return pq ** (k // 2) * (2.0 if k % 2 == 0 else 1.0)


def range_enumeration(k: int, n: int, p) -> Fraction:
    """Exact P[range <= n] over all 2^k paths; p may be a Fraction."""
    p = Fraction(p)
    q = 1 - p
    tot = Fraction(0)
    for steps in product((1, -1), repeat=k):
        s = mx = mn = 0
        for st in steps:
            s += st
            mx = max(mx, s)
            mn = min(mn, s)
        if mx - mn <= n:
            u = steps.count(1)
            tot += p ** u * q ** (k - u)
    return tot


# ---------------------------------------------------------------- counts and ranges


def summed_reinit_points(points: Sequence[Sequence[float]], weights: Optional[Sequence[float]] = None):
    """Map 4-vector reinit atoms to (bid sum, ask sum) atoms, merging duplicates."""
    pts = np.asarray(points, dtype=float).reshape(-1, 4)
    w = np.full(len(pts), 1 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
    h = np.stack([pts[:, 0] + pts[:, 2], pts[:, 1] + pts[:, 3]], 1)
    out: dict = {}
    for hh, ww in zip(map(tuple, np.round(h, 12)), w):
        out[hh] = out.get(hh, 0.0) + ww
    keys = sorted(out)
    return np.array(keys), np.array([out[k] for k in keys])


@dataclass
class CountDistribution:
    times: np.ndarray
    G: np.ndarray  # cdf of the time between price changes on the grid
    pk: np.ndarray  # P[K(T) = k], k = 0..k_max
    tail: float  # P[K(T) > k_max]


def price_change_count_dist(reinit_dist, mu_h, sigma_h, T: float, k_max: int, n_grid: int = 200,
                            ctl: SeriesControl = SeriesControl()) -> CountDistribution:
    """Distribution of the number of price changes when every start is an independent draw.

    `reinit_dist` is (atoms, weights) of the (bid sum, ask sum) start, e.g. from
    summed_reinit_points. The renewal convolution uses the trapezoidal rule on
    a uniform grid of n_grid steps.
    """
    atoms, w = reinit_dist
    ts = np.linspace(0, T, n_grid + 1)
    S = np.zeros_like(ts)
    S[0] = 1.0
    for a, ww in zip(atoms, w):
        S[1:] += ww * np.array([survival_probability(a, mu_h, sigma_h, t, ctl) for t in ts[1:]])
    S[0] = 1.0
    G = np.clip(1 - S, 0, 1)
    G = np.maximum.accumulate(G)
    dG = np.diff(G)
    conv = [np.ones_like(G), G.copy()]  # G^{*0} = 1 on [0, T], G^{*1} = G
    for _ in range(1, k_max + 1):
        prev = conv[-1]
        nxt = np.zeros_like(G)
        for m in range(1, len(G)):
            # int_0^{t_m} prev(t_m - s) dG(s), midpoint in s
            i = np.arange(1, m + 1)
            nxt[m] = np.sum(dG[i - 1] * 0.5 * (prev[m - i] + prev[m - i + 1]))
        conv.append(nxt)
    gk = np.array([c[-1] for c in conv])
    pk = gk[:-1] - gk[1:]
    return CountDistribution(ts, G, pk, float(gk[-1]))


def range_distribution(reinit_dist, mu_h, sigma_h, T: float, n: int, p: Optional[float] = None,
                       k_max: int = 60, n_grid: int = 200, ctl: SeriesControl = SeriesControl(),
                       counts: Optional[CountDistribution] = None) -> float:
    """P[price range over [0, T] <= n ticks]."""
    atoms, w = reinit_dist
    if p is None:
        p = float(sum(ww * upward_probability(a, mu_h, sigma_h).value for a, ww in zip(atoms, w)))
    cd = counts or price_change_count_dist(reinit_dist, mu_h, sigma_h, T, k_max, n_grid, ctl)
    pk = cd.pk
    tot = 0.0
    for k, pr in enumerate(pk):
        if pr < 1e-10 and k > n:
            continue
        tot += pr * walk_range_cdf(n, k, p)
    return float(min(1.0, max(0.0, tot)))


# ---------------------------------------------------------------- interface problem


@dataclass(frozen=True)
class InterfaceParams:
    sigma1_sq: float
    sigma2_sq: float
    rho_cross: float  # rho * sigma1 * sigma2
    mu1: float
    mu2: float

    @classmethod
    def from_flows(cls, var_F: float, var_G: float, cov_FG: float, mu_F: float, mu_G: float) -> "InterfaceParams":
        return cls(var_G, var_G + 4 * cov_FG + 4 * var_F, var_G + 2 * cov_FG, mu_G, mu_G + 2 * mu_F)


@dataclass(frozen=True)
class PdeControl:
    h: float = 0.05
    dt: float = 0.01
    domain_mult: float = 6.0
    scheme: str = "cn"  # "cn" (with implicit start-up steps), "implicit" or "explicit"
    rannacher_steps: int = 4
    richardson: bool = False
    tol: float = 5e-3


def _one_sided_survival(z, mu: float, var: float, t: float) -> np.ndarray:
    """P[z + mu s + sigma W_s > 0 for s <= t]."""
    z = np.asarray(z, dtype=float)
    if t <= 0:
        return (z > 0).astype(float)
    s = math.sqrt(var * t)
    a = ndtr((z + mu * t) / s)
    lb = -2 * mu * z / var + log_ndtr((-z + mu * t) / s)
    return np.clip(a - np.exp(lb), 0, 1)


def _interface_operator(ip: InterfaceParams, M: int, h: float):
    """Sparse generator on the full (M+1)^2 grid, rows for interior nodes only."""
    n1 = M + 1
    idx = np.arange(n1 * n1).reshape(n1, n1)  # idx[i, j], z1 = i h, z2 = j h
    I, J = np.meshgrid(np.arange(1, M), np.arange(1, M), indexing="ij")
    I, J = I.ravel(), J.ravel()
    upper = (J > I).astype(float)
    lower = (J < I).astype(float)
    diag = (J == I).astype(float)

    def pick(above, below):
        return upper * above + lower * below + diag * 0.5 * (above + below)

    a11 = pick(ip.sigma1_sq / 2, ip.sigma2_sq / 2)
    a22 = pick(ip.sigma2_sq / 2, ip.sigma1_sq / 2)
    a12 = np.full(I.shape, ip.rho_cross)
    b1 = pick(ip.mu1, ip.mu2)
    b2 = pick(ip.mu2, ip.mu1)
    rows, cols, vals = [], [], []

    def add(di, dj, v):
        rows.append(idx[I, J])
        cols.append(idx[I + di, J + dj])
        vals.append(v)

    h2 = h * h
    # drift: central where the cell Peclet number allows it, first-order upwind otherwise
    cen1 = np.abs(b1) * h <= 2 * a11
    cen2 = np.abs(b2) * h <= 2 * a22
    up1p = np.where(cen1, b1 / (2 * h), np.maximum(b1, 0) / h)
    up1m = np.where(cen1, -b1 / (2 * h), -np.minimum(b1, 0) / h)
    up2p = np.where(cen2, b2 / (2 * h), np.maximum(b2, 0) / h)
    up2m = np.where(cen2, -b2 / (2 * h), -np.minimum(b2, 0) / h)
    c0 = np.where(cen1, 0.0, -np.abs(b1) / h) + np.where(cen2, 0.0, -np.abs(b2) / h)
    add(0, 0, -2 * a11 / h2 - 2 * a22 / h2 + c0)
    add(1, 0, a11 / h2 + up1p)
    add(-1, 0, a11 / h2 + up1m)
    add(0, 1, a22 / h2 + up2p)
    add(0, -1, a22 / h2 + up2m)
    q = a12 / (4 * h2)
    add(1, 1, q)
    add(-1, -1, q)
    add(1, -1, -q)
    add(-1, 1, -q)
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n1 * n1, n1 * n1))
    interior = idx[1:M, 1:M].ravel()
    bmask = np.ones(n1 * n1, bool)
    bmask[interior] = False
    boundary = np.flatnonzero(bmask)
    return A[interior][:, interior].tocsc(), A[interior][:, boundary].tocsc(), interior, boundary, idx


def _boundary_values(ip: InterfaceParams, M: int, h: float, boundary: np.ndarray, t: float) -> np.ndarray:
    n1 = M + 1
    i, j = boundary // n1, boundary % n1
    v = np.zeros(len(boundary))
    far_top = (j == M) & (i > 0)  # z2 large: only z1 can reach its axis
    far_right = (i == M) & (j > 0)
    v[far_top] = _one_sided_survival(i[far_top] * h, ip.mu1, ip.sigma1_sq, t)
    v[far_right] = _one_sided_survival(j[far_right] * h, ip.mu1, ip.sigma1_sq, t)
    return v


def _solve_interface(points: np.ndarray, ip: InterfaceParams, times: Sequence[float], ctl: PdeControl) -> np.ndarray:
    h = ctl.h
    tmax = max(times)
    scale = math.sqrt(max(ip.sigma1_sq, ip.sigma2_sq) * tmax)
    drift_out = max(0.0, ip.mu1, ip.mu2) * tmax
    zmax = float(np.max(points))
    L = zmax + ctl.domain_mult * scale + drift_out
    M = int(math.ceil(L / h))
    A, Ab, interior, boundary, idx = _interface_operator(ip, M, h)
    n = A.shape[0]
    F = np.ones(n)
    Id = sparse.identity(n, format="csc")
    dt = ctl.dt
    steps = int(round(tmax / dt))
    if abs(steps * dt - tmax) > 1e-9:
        raise GridTooCoarse(f"time step {dt} does not divide the horizon {tmax}")
    out_steps = {int(round(tt / dt)): k for k, tt in enumerate(times)}
    res = np.zeros((len(times), len(points)))
    pi = np.rint(points / h).astype(int)
    if np.any(np.abs(pi * h - points) > 1e-9):
        raise GridTooCoarse("evaluation points must lie on grid nodes; pick h dividing them")
    pos = np.searchsorted(interior, idx[pi[:, 0], pi[:, 1]])
    if ctl.scheme == "explicit":
        amax = 0.5 * max(ip.sigma1_sq, ip.sigma2_sq)
        lim = h * h / (4 * amax + 2 * h * max(abs(ip.mu1), abs(ip.mu2)) + 2 * abs(ip.rho_cross))
        if dt > lim:
            raise CFLViolation(f"explicit step {dt} exceeds the stability limit {lim:.3g}")
        t = 0.0
        for s in range(1, steps + 1):
            F = F + dt * (A @ F + Ab @ _boundary_values(ip, M, h, boundary, t))
            t = s * dt
            if s in out_steps:
                res[out_steps[s]] = F[pos]
        return res
    half = splu((Id - 0.5 * dt * A).tocsc())
    full = splu((Id - dt * A).tocsc()) if ctl.scheme == "implicit" else None
    t = 0.0
    for s in range(1, steps + 1):
        if ctl.scheme == "implicit":
            F = full.solve(F + dt * (Ab @ _boundary_values(ip, M, h, boundary, s * dt)))
        elif s <= ctl.rannacher_steps // 2:
            # two implicit half steps
            for k in (1, 2):
                tk = t + 0.5 * dt * k
                F = half.solve(F + 0.5 * dt * (Ab @ _boundary_values(ip, M, h, boundary, tk)))
        else:
            g0 = Ab @ _boundary_values(ip, M, h, boundary, t)
            g1 = Ab @ _boundary_values(ip, M, h, boundary, t + dt)
            F = half.solve(F + 0.5 * dt * (A @ F) + 0.5 * dt * (g0 + g1))
        t = s * dt
        if s in out_steps:
            res[out_steps[s]] = F[pos]
    return np.clip(res, 0, 1)


def interface_survival_grid(points, ip: InterfaceParams, times: Sequence[float],
                            ctl: PdeControl = PdeControl()) -> np.ndarray:
    """Survival of the exporting-side hitting time for start points (xF, xG), shape (len(times), len(points))."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if np.any(pts <= 0):
        raise DomainError("start queues must be positive")
    if any(t <= 0 for t in times):
        raise DomainError("times must be positive")
    z = np.stack([pts[:, 1], 2 * pts[:, 0] + pts[:, 1]], 1)
    fine = _solve_interface(z, ip, times, ctl)
    if ctl.richardson:
        coarse = _solve_interface(z, ip, times, PdeControl(2 * ctl.h, 2 * ctl.dt, ctl.domain_mult, ctl.scheme,
                                                           ctl.rannacher_steps))
        err = float(np.max(np.abs(fine - coarse))) / 3
        if err > ctl.tol:
            raise GridTooCoarse(f"Richardson error estimate {err:.3g} above {ctl.tol}")
    return fine


def interface_survival(xF: float, xG: float, ip: InterfaceParams, t: float, grid: PdeControl = PdeControl()) -> float:
    return float(interface_survival_grid([(xF, xG)], ip, [t], grid)[0, 0])


def interface_survival_mc(points, var_F: float, var_G: float, cov_FG: float, mu_F: float, mu_G: float,
                          times: Sequence[float], n_paths: int = 20_000, dt: float = 1e-4, seed: int = 0,
                          batch: int = 5000) -> tuple[np.ndarray, np.ndarray]:
    """Euler oracle: Q^G = Y^G - sup(-Y^F)^+ survives while positive. Returns (estimate, se)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(seed)
    cov = np.array([[var_F, cov_FG], [cov_FG, var_G]])
    root = np.linalg.cholesky(cov + 1e-300 * np.eye(2)) * math.sqrt(dt)
    steps = int(round(max(times) / dt))
    marks = {int(round(t / dt)): k for k, t in enumerate(times)}
    alive_count = np.zeros((len(times), len(pts)))
    for s0 in range(0, n_paths, batch):
        m = min(batch, n_paths - s0)
        X = np.zeros((m, 2))
        run_min = np.zeros(m)
        alive = np.ones((len(pts), m), bool)
        for s in range(1, steps + 1):
            X += rng.standard_normal((m, 2)) @ root.T
            X[:, 0] += mu_F * dt
            X[:, 1] += mu_G * dt
            np.minimum(run_min, X[:, 0], out=run_min)
            for p, (xf, xg) in enumerate(pts):
                qg = xg + X[:, 1] - np.maximum(0.0, -(xf + run_min))
                alive[p] &= qg > 0
            if s in marks:
                alive_count[marks[s]] += alive.sum(1)
    est = alive_count / n_paths
    return est, np.sqrt(est * (1 - est) / n_paths)
