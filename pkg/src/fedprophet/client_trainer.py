"""Client-side local adversarial training and measurement duties."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import advkit
from . import grad_core as gc
from . import netlib
from .advkit import AttackCfg
from .datahub import Dataset
from .grad_core import Tensor
from .netlib import Backbone


@dataclass(frozen=True)
class OptimCfg:
    lr: float = 0.05
    momentum: float = 0.9
    local_iters: int = 5  # E
    batch_size: int = 32

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.local_iters < 1:
            raise ValueError("need at least one local iteration")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")


@dataclass
class LocalUpdate:
    client: int
    first: int  # m
    last: int  # M_k
    modules: dict[int, dict[str, np.ndarray]]  # n -> backbone params of module n
    head: dict[str, np.ndarray]  # head of module `last`
    local_iters: int
    validation: tuple[float, float] | None = None
    losses: list[float] = field(default_factory=list)


def client_rng(seed: int, t: int, k: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, t, k, stream])


def attack_cfg_for(m: int, epsilon: float, input_cfg: AttackCfg, steps: int) -> AttackCfg:
    """l_inf input-space attack for module 1, l_2 feature-space attack (step eps/4) after that."""
    if m == 1:
        return AttackCfg.linf(input_cfg.epsilon, input_cfg.step_size, steps, random_start=True)
    return AttackCfg.l2(epsilon, steps, random_start=True)


def local_adversarial_train(
    snapshot: Backbone,
    m: int,
    last: int,
    z_prev: np.ndarray,
    y: np.ndarray,
    epsilon: float,
    mu: float,
    attack: AttackCfg,
    optim: OptimCfg,
    rng: np.random.Generator,
    client: int = -1,
) -> LocalUpdate:
    """E iterations of (PGD on z_{m-1}) -> (SGD-momentum step on the regularized prophet loss).

    ``z_prev`` are the client's features after the frozen prefix. ``attack``
    carries the norm/step/steps to use with radius ``epsilon``. The snapshot
    is never mutated: modules m..last are deep-copied first.
    """
    if epsilon < 0:
        raise ValueError("perturbation magnitude must be non-negative")
    if len(y) == 0:
        raise ValueError(f"client {client} has no training data")
    if not (1 <= m <= last <= snapshot.M):
        raise ValueError(f"invalid assignment {m}..{last} for M={snapshot.M}")
    local = [mod for mod in snapshot.clone().modules[m - 1 : last]]
    params: list[Tensor] = []
    for mod in local:
        params.extend(mod.named_params().values())
    params.extend(local[-1].head.params().values())
    for p in params:
        p.requires_grad = True
    velocity = [np.zeros_like(p.data) for p in params]
    cfg = attack.with_epsilon(epsilon) if epsilon > 0 else None
    n = len(y)
    losses = []

    def loss_fn(zt: Tensor) -> Tensor:
        return netlib.prophet_loss(local, zt, yb, mu, reduction="sum")

    for _ in range(optim.local_iters):
        idx = rng.choice(n, size=optim.batch_size, replace=False) if n > optim.batch_size else rng.permutation(n)
        zb, yb = z_prev[idx], y[idx]
        delta = advkit.pgd_attack(loss_fn, zb, cfg, rng) if cfg is not None else 0.0
        with gc.Tape():
            loss = netlib.prophet_loss(local, Tensor(zb + delta), yb, mu)
            losses.append(loss.item())
            gc.backward(loss)
        for p, v in zip(params, velocity):
            v *= optim.momentum
            v += p.grad
            p.data = p.data - optim.lr * v
            p.grad = None

    return LocalUpdate(
        client=client,
        first=m,
        last=last,
        modules={mod.index: mod.backbone_state() for mod in local},
        head=local[-1].head_state(),
        local_iters=optim.local_iters,
        losses=losses,
    )


def report_validation(snapshot: Backbone, upto: int, val: Dataset, attack: AttackCfg, rng=None) -> tuple[float, float]:
    """Clean/adversarial validation accuracy of cascade 1..upto through head ``upto``."""
    if len(val) == 0:
        raise ValueError("empty validation set")
    return advkit.evaluate(snapshot, val.x, val.y, attack, upto=upto, rng=rng)


def report_dstar(module: netlib.ModuleSpec, z_prev: np.ndarray, cfg: AttackCfg) -> tuple[float, int]:
    """(local mean d*, sample count) of a frozen module on this client's data."""
    _, mean = advkit.measure_dstar(module, z_prev, cfg)
    return mean, int(np.asarray(z_prev).shape[0])
