"""Order stream generation and the net order flow path."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .core import TYPES, FlowParams, ModelParams


def replication_rng(master_seed: int, r: int) -> np.random.Generator:
    """Generator for replication r; independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(r),)))


@dataclass(frozen=True)
class OrderEvent:
    side: str  # "b" or "a"
    origin: str  # "F" or "G"
    size: int  # -1 market, +1 limit

    @property
    def kind(self) -> int:
        return TYPES.index(self.side + self.origin)

    @classmethod
    def of(cls, kind: int, size: int) -> "OrderEvent":
        t = TYPES[kind]
        return cls(t[0], t[1], int(size))


@dataclass
class GridPath:
    dt: float
    values: np.ndarray  # (N+1, d)
    interp: str = "PiecewiseConstant"

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.values)) * self.dt


def decode(u_type: np.ndarray, u_sign: np.ndarray, fp: FlowParams) -> tuple[np.ndarray, np.ndarray]:
    cum = np.cumsum(fp.event_probs)
    cum[-1] = 1.0 + 1e-15
    kind = np.searchsorted(cum, u_type, side="right").astype(np.int64)
    kind = np.minimum(kind, 3)
    mp = np.asarray(fp.market_prob)[kind]
    size = np.where(u_sign < mp, -1, 1).astype(np.int64)
    return kind, size


def sample_order(rng: np.random.Generator, p: ModelParams, inactive: bool = False) -> OrderEvent:
    k, s = decode(rng.random(1), rng.random(1), p.flow(inactive))
    return OrderEvent.of(int(k[0]), int(s[0]))


@dataclass
class OrderStream:
    """Uniform draws behind each event plus their decoding.

    Keeping the uniforms lets the regime-switching engine decode each event
    with the flow parameters of whichever regime is current.
    """

    u_type: np.ndarray
    u_sign: np.ndarray
    params: ModelParams
    kind: Optional[np.ndarray] = None
    size: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind is None:
            self.kind, self.size = decode(self.u_type, self.u_sign, self.params.flow(False))

    def __len__(self) -> int:
        return len(self.kind)

    def decoded(self, inactive: bool) -> tuple[np.ndarray, np.ndarray]:
        if inactive and self.params.regime_overrides is not None:
            return decode(self.u_type, self.u_sign, self.params.regime_overrides)
        return self.kind, self.size

    def events(self) -> list[OrderEvent]:
        return [OrderEvent.of(k, s) for k, s in zip(self.kind, self.size)]

    @classmethod
    def from_events(cls, params: ModelParams, kind, size) -> "OrderStream":
        kind = np.asarray(kind, dtype=np.int64)
        size = np.asarray(size, dtype=np.int64)
        # uniforms consistent with the given decoding under the base flow
        fp = params.flow(False)
        lo = np.concatenate([[0.0], np.cumsum(fp.event_probs)[:-1]])
        ut = lo[kind] + 0.5 * np.asarray(fp.event_probs)[kind] if len(kind) else np.zeros(0)
        mp = np.asarray(fp.market_prob)[kind] if len(kind) else np.zeros(0)
        us = np.where(size < 0, 0.5 * mp, mp + 0.5 * (1 - mp))
        return cls(np.asarray(ut, float), np.asarray(us, float), params, kind, size)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "side", "origin", "size"])
            for k, (t, s) in enumerate(zip(self.kind, self.size), start=1):
                w.writerow([k, TYPES[t][0], TYPES[t][1], int(s)])


def _m_dependent(z: np.ndarray, m: int) -> np.ndarray:
    """Uniforms Phi(moving average of m+1 normals): draws more than m apart are independent."""
    c = np.concatenate([[0.0], np.cumsum(z)])
    return ndtr((c[m + 1:] - c[:-m - 1]) / np.sqrt(m + 1))


def generate_stream(seed, p: ModelParams) -> OrderStream:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = p.n_steps
    m = p.dependence_order
    if m == 0:
        u = rng.random((2, n))
        return OrderStream(u[0], u[1], p)
    z = rng.standard_normal((2, n + m))
    return OrderStream(_m_dependent(z[0], m), _m_dependent(z[1], m), p)


def net_flow_path(stream: OrderStream, dt: Optional[float] = None) -> GridPath:
    """Partial sums X_k of signed sizes per type, in dv units."""
    n = len(stream)
    x = np.zeros((n + 1, 4), dtype=np.int64)
    if n:
        x[np.arange(1, n + 1), stream.kind] = stream.size
        np.cumsum(x, axis=0, out=x)
    return GridPath(dt if dt is not None else stream.params.dt, x)
