"""Parameter and state types shared by the micro and limit engines.

Order types are always indexed in the fixed order (b,F), (a,F), (b,G), (a,G).
Inside the micro engine, volumes are integers in units of dv and prices are
integers in units of the tick.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, ParamsInvalid, UnsupportedDependence

TYPES = ("bF", "aF", "bG", "aG")
BID = (0, 2)
ASK = (1, 3)
# components owned by each country
COUNTRY = {"F": (0, 1), "G": (2, 3)}

# stands in for an unbounded capacity window
INF_UNITS = 2**62


def _as4(x, name: str) -> tuple:
    if isinstance(x, dict):
        missing = [k for k in TYPES if k not in x]
        extra = [k for k in x if k not in TYPES]
        if missing or extra:
            raise ParamsInvalid([f"{name}: expected keys {TYPES}, missing={missing} extra={extra}"])
        return tuple(float(x[k]) for k in TYPES)
    if np.isscalar(x):
        return (float(x),) * 4
    vals = tuple(float(v) for v in x)
    if len(vals) != 4:
        raise ParamsInvalid([f"{name}: need 4 entries, got {len(vals)}"])
    return vals


@dataclass(frozen=True)
class FlowParams:
    """Type probabilities and per-type market-order probabilities."""

    event_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    market_prob: tuple = (0.5, 0.5, 0.5, 0.5)


@dataclass(frozen=True)
class ModelParams:
    n: int = 10_000
    horizon_T: float = 1.0
    tick_delta: float = 0.1
    kappa_minus: float = math.inf
    kappa_plus: float = math.inf
    event_probs: tuple = (0.25, 0.25, 0.25, 0.25)
    market_prob: tuple = (0.5, 0.5, 0.5, 0.5)
    dependence_order: int = 0
    regime_overrides: Optional[FlowParams] = None

    @property
    def dt(self) -> float:
        return 1.0 / self.n

    @property
    def dv(self) -> float:
        return self.n ** -0.5

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_T * self.n))

    @property
    def kappa_units(self) -> tuple[int, int]:
        """Capacity bounds (kappa_minus, kappa_plus) in dv units."""
        out = []
        for k in (self.kappa_minus, self.kappa_plus):
            out.append(INF_UNITS if math.isinf(k) else int(round(k / self.dv)))
        return out[0], out[1]

    def flow(self, inactive: bool = False) -> FlowParams:
        if inactive and self.regime_overrides is not None:
            return self.regime_overrides
        return FlowParams(self.event_probs, self.market_prob)


def _check_flow(fp: FlowParams, tag: str) -> list[str]:
    errs = []
    ep = np.asarray(fp.event_probs, dtype=float)
    mp = np.asarray(fp.market_prob, dtype=float)
    if ep.shape != (4,) or mp.shape != (4,):
        return [f"ProbabilitiesInvalid: {tag} needs 4 event and 4 market probabilities"]
    if np.any(ep < 0) or np.any(ep > 1) or abs(ep.sum() - 1.0) > 1e-12:
        errs.append(f"ProbabilitiesInvalid: {tag} event_probs {tuple(ep)} must lie in [0,1] and sum to 1")
    if np.any(mp < 0) or np.any(mp > 1):
        errs.append(f"ProbabilitiesInvalid: {tag} market_prob {tuple(mp)} outside [0,1]")
    return errs


def _is_multiple(x: float, unit: float) -> bool:
    q = x / unit
    return abs(q - round(q)) <= 1e-9 * max(1.0, abs(q))


def validate_params(p: ModelParams) -> ModelParams:
    """Return normalized params, or raise ParamsInvalid listing every violation."""
    errs: list[str] = []
    if not isinstance(p.n, (int, np.integer)) or p.n < 1:
        errs.append(f"ScalingInvalid: n must be a positive integer, got {p.n!r}")
        raise ParamsInvalid(errs)
    if not (p.tick_delta > 0):
        errs.append(f"NonPositiveTick: tick_delta={p.tick_delta}")
    for name in ("kappa_minus", "kappa_plus"):
        k = getattr(p, name)
        if not (k > 0):
            errs.append(f"CapacityNotMultipleOfDv: {name}={k} must be > 0")
        elif not math.isinf(k) and not _is_multiple(k, p.dv):
            errs.append(f"CapacityNotMultipleOfDv: {name}={k} is not a multiple of dv={p.dv}")
    if not (p.horizon_T > 0) or not _is_multiple(p.horizon_T, p.dt):
        errs.append(f"HorizonNotMultipleOfDt: horizon_T={p.horizon_T}, dt={p.dt}")
    if p.dependence_order < 0:
        errs.append(f"DependenceInvalid: dependence_order={p.dependence_order}")
    try:
        ep, mp = _as4(p.event_probs, "event_probs"), _as4(p.market_prob, "market_prob")
    except ParamsInvalid as e:
        raise ParamsInvalid(errs + e.errors) from None
    errs += _check_flow(FlowParams(ep, mp), "base")
    ov = p.regime_overrides
    if ov is not None:
        ov = FlowParams(_as4(ov.event_probs, "override event_probs"), _as4(ov.market_prob, "override market_prob"))
        errs += _check_flow(ov, "regime_overrides")
    if errs:
        raise ParamsInvalid(errs)
    return replace(p, n=int(p.n), event_probs=ep, market_prob=mp, regime_overrides=ov)


@dataclass(frozen=True)
class MomentSet:
    mu: np.ndarray  # (4,)
    sigma2: np.ndarray  # (4,)
    cov: np.ndarray  # (4,4), diagonal equals sigma2

    def cross(self, i: int, j: int) -> float:
        return float(self.cov[i, j])


def derive_event_moments(p: ModelParams, inactive: bool = False) -> MomentSet:
    """Drift and covariance of the scaled net order flow for an i.i.d. stream.

    E[V] = dv^2 mu, Var(V) = dv^2 sigma^2. With one type per step the
    cross covariance of two distinct types is -E[V_i]E[V_j].
    """
    if p.dependence_order > 0:
        raise UnsupportedDependence("analytic moments need an i.i.d. stream; estimate them empirically")
    fp = p.flow(inactive)
    P = np.asarray(fp.event_probs, dtype=float)
    q = np.asarray(fp.market_prob, dtype=float)
    m1 = P * (1.0 - 2.0 * q)  # E[V]/dv
    mu = m1 / p.dv
    cov = -np.outer(m1, m1)
    np.fill_diagonal(cov, P - m1**2)
    return MomentSet(mu=mu, sigma2=np.diag(cov).copy(), cov=cov)


def aggregate_shared_moments(m: MomentSet) -> tuple[np.ndarray, np.ndarray]:
    """Drift and covariance of (bid sum, ask sum) of the four flows."""
    A = np.array([[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]])
    mu_h = A @ m.mu
    sig_h = A @ m.cov @ A.T
    return mu_h, 0.5 * (sig_h + sig_h.T)


# ---------------------------------------------------------------- reinit


def identity_phi(x_pre: np.ndarray, eps: np.ndarray) -> np.ndarray:
    return eps


@dataclass(frozen=True)
class ReinitSpec:
    """Post-price-change queue law: R = phi(Q_pre, eps), eps drawn per component.

    The default law is independent uniform on {low..high} dv units.
    `phi=None` means the identity in eps, which the compiled engine supports
    directly.
    """

    low: int = 10
    high: int = 20
    phi: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    alpha_floor: float = 1.0
    # optional fixed value (dv units) instead of a random draw
    point: Optional[tuple] = None

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.point is not None:
            return np.tile(np.asarray(self.point, dtype=np.int64), (size, 1))
        return rng.integers(self.low, self.high + 1, size=(size, 4), dtype=np.int64)

    def apply(self, q_pre: np.ndarray, eps: np.ndarray) -> np.ndarray:
        if self.phi is None:
            return np.asarray(eps, dtype=np.int64)
        r = np.asarray(self.phi(np.asarray(q_pre), np.asarray(eps)))
        if np.any(r < self.alpha_floor * np.asarray(eps) - 1e-12):
            from .errors import InvariantViolation

            raise InvariantViolation(f"phi violates the floor: phi={r}, eps={eps}, alpha={self.alpha_floor}")
        return np.rint(r).astype(np.int64)


@dataclass
class MarketState:
    """Prices in ticks, queues and capacity in dv units."""

    B: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    Q: np.ndarray = field(default_factory=lambda: np.full(4, 15, dtype=np.int64))
    C: int = 0
    active: bool = True
    l: int = 0

    def copy(self) -> "MarketState":
        return MarketState(self.B.copy(), self.Q.copy(), int(self.C), bool(self.active), int(self.l))

    @classmethod
    def make(cls, Q: Sequence[int], B: Sequence[int] = (0, 0), C: int = 0, active: bool = True) -> "MarketState":
        return cls(np.asarray(B, dtype=np.int64).copy(), np.asarray(Q, dtype=np.int64).copy(), int(C), active, 0)


# ---------------------------------------------------------------- config

_CONFIG_KEYS = {
    "n", "horizon_T", "tick_delta", "kappa_minus", "kappa_plus", "event_probs",
    "market_prob", "dependence_order", "regime_overrides", "reinit", "initial",
    "replications", "master_seed", "handoff", "scenarios", "description",
}
_OVERRIDE_KEYS = {"event_probs", "market_prob"}
_REINIT_KEYS = {"low", "high", "point"}
_INITIAL_KEYS = {"Q", "B", "C", "draw"}


def _kappa(v) -> float:
    return math.inf if v is None or v == "inf" else float(v)


def params_from_dict(d: dict) -> ModelParams:
    unknown = set(d) - _CONFIG_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown configuration keys: {sorted(unknown)}")
    ov = d.get("regime_overrides")
    if ov is not None:
        bad = set(ov) - _OVERRIDE_KEYS
        if bad:
            raise ConfigInvalid(f"unknown keys in regime_overrides: {sorted(bad)}")
        ov = FlowParams(_as4(ov.get("event_probs", 0.25), "event_probs"), _as4(ov.get("market_prob", 0.5), "market_prob"))
    for sect, keys in (("reinit", _REINIT_KEYS), ("initial", _INITIAL_KEYS)):
        if sect in d and set(d[sect]) - keys:
            raise ConfigInvalid(f"unknown keys in {sect}: {sorted(set(d[sect]) - keys)}")
    p = ModelParams(
        n=int(d.get("n", 10_000)),
        horizon_T=float(d.get("horizon_T", 1.0)),
        tick_delta=float(d.get("tick_delta", 0.1)),
        kappa_minus=_kappa(d.get("kappa_minus")),
        kappa_plus=_kappa(d.get("kappa_plus")),
        event_probs=_as4(d.get("event_probs", 0.25), "event_probs"),
        market_prob=_as4(d.get("market_prob", 0.5), "market_prob"),
        dependence_order=int(d.get("dependence_order", 0)),
        regime_overrides=ov,
    )
    return validate_params(p)


def reinit_from_dict(d: dict) -> ReinitSpec:
    r = d.get("reinit", {})
    pt = r.get("point")
    return ReinitSpec(low=int(r.get("low", 10)), high=int(r.get("high", 20)), point=tuple(pt) if pt else None)


def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigInvalid(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"{path}: invalid JSON ({e})") from None
    if not isinstance(d, dict):
        raise ConfigInvalid(f"{path}: top level must be an object")
    params_from_dict(d)  # validates
    return d


def market_prob_for_drift(mu: float, P: float, n: int) -> float:
    """Inverse of mu = P(1-2p)/dv."""
    return 0.5 * (1.0 - mu * n**-0.5 / P)
