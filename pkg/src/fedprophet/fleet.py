"""Emulated device pool: profiles, balanced/unbalanced sampling, per-round degrading factors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

REGIMES = ("balanced", "unbalanced")


@dataclass(frozen=True)
class DeviceProfile:
    name: str
    base_memory: float  # bytes
    base_performance: float  # abstract flops/sec


@dataclass(frozen=True)
class ClientRecord:
    k: int
    q: float
    profile: DeviceProfile
    memory: float = 0.0  # R_k^(t)
    performance: float = 0.0  # P_k^(t)


def default_profiles(unit: float) -> list[DeviceProfile]:
    """Four synthetic tiers; the weakest holds exactly ``unit`` bytes (normally R_min)."""
    tiers = [("tier-a", 1.0, 1.0), ("tier-b", 1.5, 2.0), ("tier-c", 2.5, 4.0), ("tier-d", 5.0, 8.0)]
    return [DeviceProfile(name, mult * unit, perf) for name, mult, perf in tiers]


def sampling_weights(profiles: Sequence[DeviceProfile], regime: str) -> np.ndarray:
    if regime not in REGIMES:
        raise ValueError(f"regime must be one of {REGIMES}, got {regime!r}")
    n = len(profiles)
    if regime == "balanced":
        w = np.ones(n)
    else:
        # rank 0 = most memory; the weakest profile gets 2^(n-1)
        order = sorted(range(n), key=lambda i: (-profiles[i].base_memory, -profiles[i].base_performance, i))
        w = np.empty(n)
        for rank, i in enumerate(order):
            w[i] = 2.0**rank
    return w / w.sum()


def sample_fleet(
    profiles: Sequence[DeviceProfile],
    n: int,
    regime: str,
    seed: int,
    weights: Sequence[float] | None = None,
) -> list[ClientRecord]:
    """Draw one device profile per client; ``weights`` are the data weights q_k (uniform if omitted)."""
    if n <= 0:
        raise ValueError(f"number of clients must be positive, got {n}")
    if not profiles:
        raise ValueError("no device profiles")
    p = sampling_weights(profiles, regime)
    rng = np.random.default_rng([seed, 0xF1EE7])
    picks = rng.choice(len(profiles), size=n, p=p)
    q = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    if q.shape != (n,):
        raise ValueError(f"expected {n} data weights, got {q.shape}")
    return [
        ClientRecord(k, float(q[k]), profiles[i], profiles[i].base_memory, profiles[i].base_performance)
        for k, i in enumerate(picks)
    ]


def tick_resources(
    records: Sequence[ClientRecord],
    t: int,
    seed: int,
    r_floor: float = 0.0,
    degrade: bool = True,
    low: float = 0.5,
    high: float = 1.0,
) -> list[ClientRecord]:
    """Available memory/performance of round ``t``: base values scaled by Uniform[low, high] factors.

    Memory is clamped from below at ``r_floor`` (R_min), never above the base memory.
    """
    out = []
    rng = np.random.default_rng([seed, int(t), 0x7E5])
    factors = rng.uniform(low, high, size=(len(records), 2)) if degrade else np.ones((len(records), 2))
    for rec, (u, v) in zip(records, factors):
        mem = rec.profile.base_memory * u
        mem = min(max(mem, r_floor), rec.profile.base_memory)
        out.append(replace(rec, memory=mem, performance=rec.profile.base_performance * v))
    return out


def min_performance(records: Sequence[ClientRecord]) -> float:
    if not records:
        raise ValueError("no active clients")
    return min(r.performance for r in records)


def check_profiles(records: Sequence[ClientRecord], r_min: float) -> None:
    weak = [r.k for r in records if r.profile.base_memory < r_min]
    if weak:
        raise ValueError(f"clients {weak[:10]} have base memory below R_min={r_min:g}")


def write_fleet_csv(records: Sequence[ClientRecord], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "profile", "base_memory", "base_performance", "q"])
        for r in records:
            w.writerow([r.k, r.profile.name, int(r.profile.base_memory), r.profile.base_performance, repr(r.q)])
