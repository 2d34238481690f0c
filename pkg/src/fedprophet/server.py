"""Server-side coordination: perturbation scaling, module assignment, partial averaging."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .client_trainer import LocalUpdate
from .fleet import ClientRecord

ALPHA_STEP_TENTHS = 1


@dataclass
class ModuleSchedule:
    """Perturbation state for the input of one module (index m, perturbing z_{m-1})."""

    alpha_tenths: int  # alpha kept in integer tenths so +/-0.1 steps are exact
    dstar: float  # E[d*_{m-1}]
    ref_ratio: float  # C*_{m-1} / A*_{m-1}

    @property
    def alpha(self) -> float:
        return self.alpha_tenths / 10

    @property
    def epsilon(self) -> float:
        return self.alpha * self.dstar


@dataclass
class PerturbationSchedule:
    epsilon0: float
    delta: float = 0.05
    alpha_init: float = 0.3
    alpha_floor: float = 0.1
    alpha_cap: float = 2.0
    modules: dict[int, ModuleSchedule] = field(default_factory=dict)
    frozen_acc: dict[int, tuple[float, float]] = field(default_factory=dict)  # C*_m, A*_m
    dstar: dict[int, float] = field(default_factory=dict)  # E[d*_m]

    def epsilon_for(self, m: int) -> float:
        """Perturbation radius on the input of module m."""
        if m == 1:
            return self.epsilon0
        return self.modules[m].epsilon

    def open_module(self, m: int) -> ModuleSchedule:
        """Start module m (> 1) from alpha_init and the measurements of module m-1."""
        c, a = self.frozen_acc[m - 1]
        sched = ModuleSchedule(_tenths(self.alpha_init), self.dstar[m - 1], accuracy_ratio(c, a))
        self.modules[m] = sched
        return sched


def _tenths(x: float) -> int:
    return int(round(x * 10))


def accuracy_ratio(clean: float, adv: float) -> float:
    return math.inf if adv <= 0 else clean / adv


def alpha_step(ratio: float, ref_ratio: float, delta: float) -> int:
    """-1, 0 or +1 tenth: raise alpha when the clean/adv ratio is above the band, lower it when below."""
    if ratio > (1 + delta) * ref_ratio:
        return ALPHA_STEP_TENTHS
    if ratio < (1 - delta) * ref_ratio:
        return -ALPHA_STEP_TENTHS
    return 0


def adjust_alpha(schedule: PerturbationSchedule, m: int, clean: float, adv: float) -> ModuleSchedule:
    """Apply one adaptive step to module m's scaling factor and return its updated state."""
    if m <= 1:
        raise ValueError("the first module's input tolerance is fixed")
    sched = schedule.modules[m]
    step = alpha_step(accuracy_ratio(clean, adv), sched.ref_ratio, schedule.delta)
    lo, hi = _tenths(schedule.alpha_floor), _tenths(schedule.alpha_cap)
    sched.alpha_tenths = min(max(sched.alpha_tenths + step, lo), hi)
    return sched


# ---------------------------------------------------------------------------
# assignment


@dataclass
class RoundPlan:
    t: int
    m: int
    assignment: dict[int, int]  # client -> M_k

    def S(self, n: int) -> list[int]:
        return sorted(k for k, mk in self.assignment.items() if mk >= n)

    def K(self, n: int) -> list[int]:
        return sorted(k for k, mk in self.assignment.items() if mk == n)

    def histogram(self) -> dict[int, int]:
        return dict(sorted(Counter(self.assignment.values()).items()))


def assign_modules(
    t: int,
    m: int,
    M: int,
    records: Sequence[ClientRecord],
    mem_of: Callable[[int, int], float],
    flops_of: Callable[[int, int], float],
    p_min: float,
    dma: bool = True,
) -> RoundPlan:
    """Largest M_k with memory(m..M_k) <= R_k and FLOPs(m..M_k) <= (P_k / P_min) FLOPs(m).

    Falls back to M_k = m, which the partition guarantees fits.
    """
    out = {}
    base = flops_of(m, m)
    for rec in records:
        best = m
        if dma:
            budget = rec.performance / p_min * base
            for last in range(m + 1, M + 1):
                if mem_of(m, last) <= rec.memory and flops_of(m, last) <= budget:
                    best = last
        out[rec.k] = best
    return RoundPlan(t, m, out)


# ---------------------------------------------------------------------------
# aggregation


def weighted_mean(arrays: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """sum q_k w_k / sum q_k; returned verbatim when all inputs are bitwise equal."""
    first = arrays[0]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch across updates: {sorted(shapes)}")
    if all(np.array_equal(first, a) for a in arrays[1:]):
        return first.copy()
    w = np.asarray(weights, dtype=np.float64)
    acc = np.zeros_like(first)
    for wi, a in zip(w, arrays):
        acc += wi * a
    return acc / w.sum()


def _mean_states(states: Sequence[Mapping[str, np.ndarray]], weights: Sequence[float]) -> dict[str, np.ndarray]:
    keys = list(states[0])
    for s in states[1:]:
        if list(s) != keys:
            raise ValueError("parameter names differ across updates")
    return {key: weighted_mean([s[key] for s in states], weights) for key in keys}


def aggregate_backbone(
    updates: Sequence[LocalUpdate],
    plan: RoundPlan,
    previous: Mapping[int, Mapping[str, np.ndarray]],
    q: Mapping[int, float],
) -> dict[int, dict[str, np.ndarray]]:
    """Partial average of module parameters over S_n = {k : M_k >= n}, for n >= m."""
    by_client = {u.client: u for u in updates}
    out = {}
    for n in previous:
        if n < plan.m:
            continue
        members = plan.S(n)
        if not members:
            out[n] = {k: v.copy() for k, v in previous[n].items()}
            continue
        for k in members:
            if n not in by_client[k].modules:
                raise ValueError(f"client {k} assigned module {n} but did not upload it")
        out[n] = _mean_states([by_client[k].modules[n] for k in members], [q[k] for k in members])
    return out


def aggregate_aux(
    updates: Sequence[LocalUpdate],
    plan: RoundPlan,
    previous: Mapping[int, Mapping[str, np.ndarray]],
    q: Mapping[int, float],
) -> dict[int, dict[str, np.ndarray]]:
    """Average head n over K_n = {k : M_k == n}; heads with empty K_n carry over."""
    by_client = {u.client: u for u in updates}
    out = {}
    for n in previous:
        if n < plan.m:
            continue
        members = plan.K(n)
        if not members:
            out[n] = {k: v.copy() for k, v in previous[n].items()}
            continue
        out[n] = _mean_states([by_client[k].head for k in members], [q[k] for k in members])
    return out


def aggregate_validation(reports: Mapping[int, tuple[float, float]], q: Mapping[int, float]) -> tuple[float, float]:
    missing = sorted(set(q) - set(reports))
    if missing:
        raise ValueError(f"missing validation reports from clients {missing[:10]}")
    w = np.array([q[k] for k in sorted(q)])
    c = np.array([reports[k][0] for k in sorted(q)])
    a = np.array([reports[k][1] for k in sorted(q)])
    return float((w * c).sum() / w.sum()), float((w * a).sum() / w.sum())
