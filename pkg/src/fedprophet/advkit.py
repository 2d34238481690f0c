"""Attacks and robustness diagnostics.

PGD in l_inf or l_2 balls on inputs or intermediate features, the d*
displacement measurement, the per-sample strong-convexity displacement
certificate, the early-exit vs. joint gradient gap, and clean/adversarial
accuracy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import grad_core as gc
from . import netlib
from .grad_core import Tensor
from .netlib import Backbone, ModuleSpec

NORMS = ("linf", "l2")


@dataclass(frozen=True)
class AttackCfg:
    norm: str
    epsilon: float
    step_size: float
    steps: int
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0 or self.step_size < 0 or self.steps < 0:
            raise ValueError("epsilon, step_size and steps must be non-negative")
        if self.step_size > self.epsilon and self.epsilon > 0:
            raise ValueError(f"step_size {self.step_size} exceeds epsilon {self.epsilon}")

    @classmethod
    def l2(cls, epsilon: float, steps: int, random_start: bool = True) -> AttackCfg:
        """l_2 ball with the epsilon/4 step used for feature-space attacks."""
        return cls("l2", epsilon, epsilon / 4, steps, random_start)

    @classmethod
    def linf(cls, epsilon: float, step_size: float, steps: int, random_start: bool = True) -> AttackCfg:
        return cls("linf", epsilon, min(step_size, epsilon), steps, random_start)

    def with_epsilon(self, epsilon: float) -> AttackCfg:
        step = epsilon / 4 if self.norm == "l2" else min(self.step_size, epsilon)
        return AttackCfg(self.norm, epsilon, step, self.steps, self.random_start)


def _row_norms(a: np.ndarray, norm: str) -> np.ndarray:
    flat = a.reshape(a.shape[0], -1)
    if norm == "l2":
        return np.sqrt((flat * flat).sum(axis=1))
    return np.abs(flat).max(axis=1)


def _bcast(v: np.ndarray, like: np.ndarray) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def project(delta: np.ndarray, norm: str, eps: float) -> np.ndarray:
    """Per-row projection onto the eps-ball."""
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    n = _row_norms(delta, "l2")
    factor = np.where(n > eps, eps / np.maximum(n, 1e-300), 1.0)
    out = delta * _bcast(factor, delta)
    # guard against the rescaled norm landing a few ulps above eps
    over = _row_norms(out, "l2") > eps
    if over.any():
        out[over] *= np.nextafter(1.0, 0.0)
    return out


def _ascent_direction(g: np.ndarray, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.sign(g)
    n = _row_norms(g, "l2")
    return g / _bcast(np.where(n > 0, n, 1.0), g)


def random_start(rng: np.random.Generator, shape: tuple[int, ...], norm: str, eps: float) -> np.ndarray:
    if norm == "linf":
        return rng.uniform(-eps, eps, size=shape)
    d = rng.standard_normal(shape)
    d = _ascent_direction(d, "l2")
    n_feat = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    radius = eps * rng.uniform(0, 1, size=shape[0]) ** (1.0 / n_feat)
    return project(d * _bcast(radius, d), "l2", eps)


def input_gradient(loss_fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    xt = Tensor(x, requires_grad=True)
    with gc.Tape():
        loss = loss_fn(xt)
        value = loss.item()
        if loss._node is None:
            return value, np.zeros_like(x)
        return value, gc.grad_wrt_input(loss, xt)


def pgd_attack(
    loss_fn: Callable[[Tensor], Tensor],
    x0,
    cfg: AttackCfg,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """PGD-n ascent on ``loss_fn``; returns the perturbation (same shape as ``x0``).

    Rows are attacked independently: ``loss_fn`` should sum (or average)
    per-row losses so row gradients do not mix.
    """
    x0 = np.asarray(x0.data if isinstance(x0, Tensor) else x0, dtype=np.float64)
    if cfg.epsilon == 0:
        return np.zeros_like(x0)
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(0)
        delta = random_start(rng, x0.shape, cfg.norm, cfg.epsilon)
    else:
        delta = np.zeros_like(x0)
    for _ in range(cfg.steps):
        _, g = input_gradient(loss_fn, x0 + delta)
        delta = project(delta + cfg.step_size * _ascent_direction(g, cfg.norm), cfg.norm, cfg.epsilon)
    return delta


# ---------------------------------------------------------------------------
# d* measurement


def _module_fn(module):
    if isinstance(module, ModuleSpec):
        return module.forward
    return module


def displacement_attack(module, z: np.ndarray, cfg: AttackCfg, restarts: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Maximize ||f(z+delta) - f(z)||_2 over the cfg ball; returns (best delta, per-row d).

    The objective has zero gradient at delta=0, so each ascent is seeded with a
    direction: the sample itself (ones if the sample is zero), then
    ``restarts`` fixed pseudo-random directions shared by all rows. Rows never
    interact, so results do not depend on batching. The best iterate is kept.
    """
    fn = _module_fn(module)
    z = np.asarray(z, dtype=np.float64)
    if cfg.epsilon == 0:
        return np.zeros_like(z), np.zeros(z.shape[0])
    with gc.no_grad():
        base = fn(Tensor(z)).data
    base_t = Tensor(base)

    def disp(d: np.ndarray) -> np.ndarray:
        with gc.no_grad():
            out = fn(Tensor(z + d)).data
        return _row_norms(out - base, "l2")

    def objective(zt: Tensor) -> Tensor:
        return gc.sum_squares(gc.sub(fn(zt), base_t))

    first = z.copy()
    first[_row_norms(first, "linf") == 0] = 1.0
    fixed = np.random.default_rng(0xD157).standard_normal((restarts,) + z.shape[1:])
    seeds = [first] + [np.broadcast_to(v, z.shape) for v in fixed]

    best_d = np.full(z.shape[0], -np.inf)
    best = np.zeros_like(z)
    for seed in seeds:
        delta = project(cfg.step_size * _ascent_direction(np.array(seed), cfg.norm), cfg.norm, cfg.epsilon)
        for step in range(max(cfg.steps, 1)):
            if step:
                _, g = input_gradient(objective, z + delta)
                delta = project(delta + cfg.step_size * _ascent_direction(g, cfg.norm), cfg.norm, cfg.epsilon)
            d = disp(delta)
            better = d > best_d
            best_d = np.where(better, d, best_d)
            best[better] = delta[better]
    return best, best_d


def measure_dstar(module, z_prev, cfg: AttackCfg, weights=None, restarts: int = 4) -> tuple[np.ndarray, float]:
    """Per-sample d* of a frozen module and their (weighted) mean."""
    if isinstance(module, ModuleSpec) and not module.frozen:
        raise ValueError(f"module {module.index} must be frozen before measuring d*")
    z_prev = np.asarray(z_prev.data if isinstance(z_prev, Tensor) else z_prev, dtype=np.float64)
    _, d = displacement_attack(module, z_prev, cfg, restarts)
    if weights is None:
        return d, float(d.mean())
    w = np.asarray(weights, dtype=np.float64)
    return d, float((w * d).sum() / w.sum())


# ---------------------------------------------------------------------------
# strong-convexity displacement certificate


def displacement_bound(grad_norm, c_delta, mu: float):
    """||grad||/mu + sqrt(2 c/mu + ||grad||^2/mu^2), elementwise."""
    grad_norm = np.asarray(grad_norm, dtype=np.float64)
    inner = 2.0 * np.asarray(c_delta, dtype=np.float64) / mu + (grad_norm / mu) ** 2
    return grad_norm / mu + np.sqrt(np.maximum(inner, 0.0))


@dataclass
class RobustnessCertificate:
    mu: float
    displacement: np.ndarray
    loss_increase: np.ndarray
    grad_norm: np.ndarray
    bound: np.ndarray
    slack: float = 1e-6

    @property
    def violations(self) -> int:
        return int((self.displacement > self.bound + self.slack).sum())

    def summary(self) -> str:
        ratio = self.displacement / np.maximum(self.bound, 1e-300)
        return (
            f"samples={self.displacement.size} mu={self.mu:g} violations={self.violations} "
            f"mean_r={self.displacement.mean():.6g} mean_bound={self.bound.mean():.6g} "
            f"max_r_over_bound={ratio.max():.6g}"
        )

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "displacement", "loss_increase", "grad_norm", "bound", "violated"])
            for i in range(self.displacement.size):
                w.writerow(
                    [i, repr(self.displacement[i]), repr(self.loss_increase[i]), repr(self.grad_norm[i]),
                     repr(self.bound[i]), int(self.displacement[i] > self.bound[i] + self.slack)]
                )
            fh.write(f"# summary: {self.summary()}\n")


def certify_displacement(
    module: ModuleSpec,
    z_prev,
    y,
    mu: float,
    cfg: AttackCfg,
    rng: np.random.Generator | None = None,
) -> RobustnessCertificate:
    """Attack l_m at the module input and check ||r|| against the strong-convexity bound per sample."""
    if mu <= 0:
        raise ValueError("the displacement bound needs mu > 0")
    z_prev = np.asarray(z_prev.data if isinstance(z_prev, Tensor) else z_prev, dtype=np.float64)
    y = np.asarray(y)

    def attack_loss(zt: Tensor) -> Tensor:
        return netlib.early_exit_loss(module, zt, y, mu, reduction="sum")

    delta = pgd_attack(attack_loss, z_prev, cfg, rng)
    with gc.no_grad():
        z_clean = module.forward(Tensor(z_prev)).data
        z_adv = module.forward(Tensor(z_prev + delta)).data
        loss_clean = netlib.head_loss(module.head, Tensor(z_clean), y, mu, reduction="none").data
        loss_adv = netlib.head_loss(module.head, Tensor(z_adv), y, mu, reduction="none").data
    zt = Tensor(z_clean, requires_grad=True)
    with gc.Tape():
        g = gc.grad_wrt_input(netlib.head_loss(module.head, zt, y, mu, reduction="sum"), zt)
    r = _row_norms(z_adv - z_clean, "l2")
    gnorm = _row_norms(g, "l2")
    c = loss_adv - loss_clean
    return RobustnessCertificate(mu, r, c, gnorm, displacement_bound(gnorm, c, mu))


# ---------------------------------------------------------------------------
# early-exit vs joint gradient gap


@dataclass
class ConsistencyReport:
    module: int
    per_sample: np.ndarray
    beta_exit: float
    beta_joint: float

    @property
    def mean(self) -> float:
        return float(self.per_sample.mean())

    @property
    def median(self) -> float:
        return float(np.median(self.per_sample))

    def summary(self) -> str:
        return (
            f"module={self.module} samples={self.per_sample.size} mean={self.mean:.6g} "
            f"median={self.median:.6g} beta_exit={self.beta_exit:.6g} beta_joint={self.beta_joint:.6g}"
        )

    def write_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "grad_gap"])
            for i, v in enumerate(self.per_sample):
                w.writerow([i, repr(float(v))])
            fh.write(f"# summary: {self.summary()}\n")


def _param_grad(loss: Tensor, params: list[Tensor]) -> np.ndarray:
    gc.backward(loss)
    out = np.concatenate([p.grad.ravel() for p in params])
    for p in params:
        p.grad = None
    return out


def _directional_curvature(grad_fn, z: np.ndarray, rng: np.random.Generator, n_dirs: int, h: float) -> float:
    best = 0.0
    for _ in range(n_dirs):
        v = rng.standard_normal(z.shape)
        v /= np.linalg.norm(v)
        curv = float(v.ravel() @ (grad_fn(z + h * v) - grad_fn(z - h * v)).ravel()) / (2 * h)
        best = max(best, abs(curv))
    return best


def gradient_inconsistency(
    backbone: Backbone,
    m: int,
    x,
    y,
    mu: float = 0.0,
    n_dirs: int = 4,
    h: float = 1e-4,
    seed: int = 0,
) -> ConsistencyReport:
    """Per-sample ||grad_{w_m} l - grad_{w_m} l_m||_2 (simulator-only, ignores memory limits).

    ``l`` is the joint loss through every module from the input; ``l_m``
    exits at module m's head with the ``mu`` regularizer. Smoothness of both
    losses in z_m is estimated by finite-difference curvature along random
    directions and only reported.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y)
    mod = backbone.module(m)
    params = list(mod.named_params().values())
    saved = [p.requires_grad for p in backbone_params(backbone)]
    for p in backbone_params(backbone):
        p.requires_grad = False
    for p in params:
        p.requires_grad = True
    try:
        with gc.no_grad():
            z_prev_all = netlib.forward_range(backbone, Tensor(x), 1, m - 1).data if m > 1 else x
        gaps = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            zi = Tensor(z_prev_all[i : i + 1])
            yi = y[i : i + 1]
            with gc.Tape():
                joint = netlib.prophet_loss(backbone.modules[m - 1 :], zi, yi, 0.0)
                g_joint = _param_grad(joint, params)
            with gc.Tape():
                g_exit = _param_grad(netlib.early_exit_loss(mod, zi, yi, mu), params)
            gaps[i] = np.linalg.norm(g_joint - g_exit)
    finally:
        for p, s in zip(backbone_params(backbone), saved):
            p.requires_grad = s

    rng = np.random.default_rng(seed)
    with gc.no_grad():
        z_m = netlib.forward_range(backbone, Tensor(z_prev_all), m, m).data

    def exit_grad(z):
        zt = Tensor(z, requires_grad=True)
        with gc.Tape():
            return gc.grad_wrt_input(netlib.head_loss(mod.head, zt, y, mu, reduction="sum"), zt)

    def joint_grad(z):
        zt = Tensor(z, requires_grad=True)
        with gc.Tape():
            if m == backbone.M:
                loss = netlib.head_loss(mod.head, zt, y, 0.0, reduction="sum")
            else:
                loss = netlib.prophet_loss(backbone.modules[m:], zt, y, 0.0, reduction="sum")
            return gc.grad_wrt_input(loss, zt)

    n = max(z_m.shape[0], 1)
    beta = _directional_curvature(exit_grad, z_m, rng, n_dirs, h) / n
    beta_j = _directional_curvature(joint_grad, z_m, rng, n_dirs, h) / n
    return ConsistencyReport(m, gaps, beta, beta_j)


def backbone_params(backbone: Backbone) -> list[Tensor]:
    out = []
    for mod in backbone.modules:
        out.extend(mod.named_params().values())
        out.extend(mod.head.params().values())
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    clean: np.ndarray  # per-sample correctness, bool
    robust: np.ndarray  # correct on clean AND adversarial input

    @property
    def clean_acc(self) -> float:
        return float(self.clean.mean())

    @property
    def adv_acc(self) -> float:
        return float(self.robust.mean())


def evaluate_samples(
    backbone: Backbone,
    x,
    y,
    cfg: AttackCfg,
    upto: int | None = None,
    rng: np.random.Generator | None = None,
    batch_size: int = 512,
) -> EvalResult:
    """Per-sample clean and adversarial correctness through the exit head of module ``upto``.

    The attack maximizes the cross-entropy of that exit at the input. A sample
    counts as adversarially correct only if it is also clean-correct.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    upto = upto or backbone.M
    head = backbone.module(upto).head
    clean = np.empty(x.shape[0], dtype=bool)
    robust = np.empty(x.shape[0], dtype=bool)

    for lo in range(0, x.shape[0], batch_size):
        xb, yb = x[lo : lo + batch_size], y[lo : lo + batch_size]

        def loss_fn(xt: Tensor) -> Tensor:
            z = netlib.forward_range(backbone, xt, 1, upto)
            return gc.softmax_cross_entropy(head.forward(z), yb, reduction="sum")

        with gc.no_grad():
            pred = head.forward(netlib.forward_range(backbone, Tensor(xb), 1, upto)).data.argmax(axis=1)
        clean[lo : lo + len(yb)] = pred == yb
        delta = pgd_attack(loss_fn, xb, cfg, rng)
        with gc.no_grad():
            adv = head.forward(netlib.forward_range(backbone, Tensor(xb + delta), 1, upto)).data.argmax(axis=1)
        robust[lo : lo + len(yb)] = (adv == yb) & (pred == yb)
    return EvalResult(clean, robust)


def evaluate(backbone: Backbone, x, y, cfg: AttackCfg, upto: int | None = None, rng=None) -> tuple[float, float]:
    """(clean accuracy, adversarial accuracy)."""
    res = evaluate_samples(backbone, x, y, cfg, upto, rng)
    return res.clean_acc, res.adv_acc


def linear_margin_robust_accuracy(weight: np.ndarray, bias: np.ndarray, x, y, eps: float) -> float:
    """Exact l_inf robust accuracy of a two-class affine classifier."""
    w = weight[:, 1] - weight[:, 0]
    b = bias[1] - bias[0]
    sign = np.where(np.asarray(y) == 1, 1.0, -1.0)
    margin = sign * (np.asarray(x) @ w + b)
    return float((margin > eps * np.abs(w).sum()).mean())


__all__ = [
    "AttackCfg",
    "project",
    "pgd_attack",
    "displacement_attack",
    "measure_dstar",
    "displacement_bound",
    "RobustnessCertificate",
    "certify_displacement",
    "ConsistencyReport",
    "gradient_inconsistency",
    "EvalResult",
    "evaluate_samples",
    "evaluate",
    "linear_margin_robust_accuracy",
    "backbone_params",
]
