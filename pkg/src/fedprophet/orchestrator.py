"""End-to-end run loop: module-by-module cascade training across the simulated fleet."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import advkit, checkpoint, netlib
from . import grad_core as gc
from .advkit import AttackCfg
from .client_trainer import OptimCfg, attack_cfg_for, client_rng, local_adversarial_train
from .config import RunConfig, load_config
from .datahub import Dataset, load_idx, make_blobs, make_images, make_shards, summary
from .fleet import check_profiles, default_profiles, min_performance, sample_fleet, tick_resources, write_fleet_csv
from .grad_core import Tensor
from .netlib import Backbone
from .partitioner import CostModel, PartitionPlan, RangeCosts, partition_atoms, whole_model_mem
from .server import (
    PerturbationSchedule,
    accuracy_ratio,
    adjust_alpha,
    aggregate_aux,
    aggregate_backbone,
    aggregate_validation,
    assign_modules,
)

METRIC_COLUMNS = [
    "round", "module", "module_round", "epsilon", "alpha",
    "clean_acc", "adv_acc", "acc_ratio", "ref_ratio", "mk_hist",
]
ASSIGN_COLUMNS = [
    "round", "module", "client", "mk", "mem_req", "memory", "flops", "flops_budget", "performance", "p_min",
]
MODULE_COLUMNS = ["module", "rounds", "clean_star", "adv_star", "epsilon_in", "dstar"]
FINAL_COLUMNS = ["split", "samples", "clean_acc", "adv_acc", "epsilon", "pgd_steps"]


class ModuleTrainingError(RuntimeError):
    pass


def module_converged(history, T_m: int, patience: int = 5, min_delta: float = 0.002) -> bool:
    """``history`` holds A_m after each finished round of the current module."""
    if not history:
        raise ValueError("need at least one round of history")
    if len(history) >= T_m:
        return True
    if patience <= 0 or len(history) <= patience:
        return False
    best_before = max(history[:-patience])
    return max(history[-patience:]) < best_before + min_delta


# ---------------------------------------------------------------------------
# setup


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """(train, test) datasets named by the config; test data uses an independent seed stream."""
    if cfg.dataset == "idx":
        return (
            load_idx(cfg.idx_images, cfg.idx_labels, cfg.classes),
            load_idx(cfg.idx_test_images, cfg.idx_test_labels, cfg.classes),
        )
    if cfg.dataset == "images":
        train = make_images(cfg.classes, cfg.n_per_class, cfg.seed)
        test = make_images(cfg.classes, cfg.test_per_class, cfg.seed + 7919)
        return train, test
    means = np.random.default_rng([cfg.seed, 0x3EA5]).uniform(0.2, 0.8, size=(cfg.classes, cfg.dim))
    train = make_blobs(cfg.classes, cfg.dim, cfg.n_per_class, cfg.seed, cfg.blob_sigma, means)
    test = make_blobs(cfg.classes, cfg.dim, cfg.test_per_class, cfg.seed + 7919, cfg.blob_sigma, means)
    return train, test


def resolve_r_min(cfg: RunConfig, whole: float) -> float:
    if cfg.mode == "joint-fat":
        return float(whole)
    if cfg.r_min > 0:
        return float(cfg.r_min)
    return cfg.r_min_fraction * whole


def round_budgets(cfg: RunConfig, flops: list[int]) -> list[int]:
    spec = str(cfg.round_budget).strip()
    M = len(flops)
    if spec == "auto":
        total = float(sum(flops))
        return [max(1, int(round(cfg.rounds * f / total))) for f in flops]
    parts = [int(v) for v in spec.split(",")]
    if len(parts) == 1:
        return parts * M
    if len(parts) != M:
        raise ValueError(f"round_budget lists {len(parts)} values for {M} modules")
    return parts


@dataclass
class Setup:
    cfg: RunConfig
    train: Dataset
    test: Dataset
    shards: list
    plan: PartitionPlan
    costs: RangeCosts
    backbone: Backbone
    fleet: list
    r_min: float
    r_floor: float
    budgets: list[int]
    cost: CostModel

    @property
    def q(self) -> dict[int, float]:
        return {s.client: s.q for s in self.shards}


def prepare(cfg: RunConfig) -> Setup:
    train, test = build_data(cfg)
    shards = make_shards(train, cfg.clients, cfg.seed, cfg.val_fraction)
    atoms, head = netlib.build_preset_atoms(cfg.preset, train.feature_shape, train.num_classes, cfg.seed)
    cost = CostModel(batch_size=cfg.batch_size)
    whole = whole_model_mem(atoms, cost, train.num_classes)
    r_min = resolve_r_min(cfg, whole)
    plan = partition_atoms(atoms, r_min, cost, train.num_classes, cfg.pgd_steps)
    backbone = netlib.assemble(atoms, head, plan.boundaries, train.num_classes, cfg.seed, cfg.preset)
    costs = RangeCosts(atoms, plan.boundaries, cost, train.num_classes, cfg.pgd_steps)
    fleet = sample_fleet(default_profiles(r_min), cfg.clients, cfg.regime, cfg.seed, [s.q for s in shards])
    if plan.M > 1:
        check_profiles(fleet, r_min)
    # a single module cannot be split further; memory-short clients are assumed to swap
    r_floor = r_min if plan.M > 1 else 0.0
    return Setup(cfg, train, test, shards, plan, costs, backbone, fleet, r_min, r_floor,
                 round_budgets(cfg, plan.flops), cost)


# ---------------------------------------------------------------------------
# measurement helpers


def input_attack(cfg: RunConfig, steps: int | None = None, epsilon: float | None = None) -> AttackCfg:
    eps = cfg.epsilon0 if epsilon is None else epsilon
    return AttackCfg.linf(eps, cfg.step0, cfg.pgd_steps if steps is None else steps, random_start=False)


def validate(setup: Setup, backbone: Backbone, upto: int) -> tuple[float, float, dict[int, tuple[float, float]]]:
    """Every client reports accuracy of cascade 1..upto on its holdout; the server q-averages.

    The attack is deterministic and row-independent, so the pooled pass below
    is identical to evaluating each client separately.
    """
    x = np.concatenate([s.val.x for s in setup.shards])
    y = np.concatenate([s.val.y for s in setup.shards])
    res = advkit.evaluate_samples(backbone, x, y, input_attack(setup.cfg), upto=upto)
    reports = {}
    lo = 0
    for s in setup.shards:
        hi = lo + len(s.val)
        reports[s.client] = (float(res.clean[lo:hi].mean()), float(res.robust[lo:hi].mean()))
        lo = hi
    c, a = aggregate_validation(reports, setup.q)
    return c, a, reports


def prefix_features(backbone: Backbone, x: np.ndarray, m: int) -> np.ndarray:
    if m == 1:
        return np.asarray(x, dtype=np.float64)
    return netlib.forward_frozen_prefix(backbone, x, m).data


def dstar_attack(cfg: RunConfig, schedule: PerturbationSchedule, m: int) -> AttackCfg:
    """Ball used to measure d*_m: the input tolerance module m was trained with."""
    if m == 1:
        return input_attack(cfg)
    return AttackCfg.l2(schedule.epsilon_for(m), cfg.pgd_steps, random_start=False)


def freeze_and_measure(
    setup: Setup,
    backbone: Backbone,
    schedule: PerturbationSchedule,
    m: int,
    clean_star: float,
    adv_star: float,
    features: dict[int, np.ndarray],
) -> float:
    """Freeze module m, record (C*_m, A*_m) and E[d*_m]; open module m+1's schedule. Returns E[d*_m]."""
    mod = backbone.module(m)
    mod.frozen = True
    for p in list(mod.named_params().values()) + list(mod.head.params().values()):
        p.requires_grad = False
    schedule.frozen_acc[m] = (clean_star, adv_star)
    attack = dstar_attack(setup.cfg, schedule, m)
    num = den = 0.0
    for s in setup.shards:
        _, local = advkit.measure_dstar(mod, features[s.client], attack)
        num += s.q * local
        den += s.q
    schedule.dstar[m] = num / den
    if m < backbone.M:
        schedule.open_module(m + 1)
    return schedule.dstar[m]


def frozen_digest(backbone: Backbone) -> str:
    parts = []
    for mod in backbone.modules:
        if not mod.frozen:
            continue
        h = hashlib.sha256()
        for p in list(mod.named_params().values()) + list(mod.head.params().values()):
            h.update(np.ascontiguousarray(p.data).tobytes())
        parts.append(f"{mod.index}:{h.hexdigest()[:16]}")
    return " ".join(parts) or "-"


# ---------------------------------------------------------------------------
# persistence


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row[k]) for k in columns})


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def hist_string(hist: dict[int, int]) -> str:
    return "|".join(f"{k}:{v}" for k, v in sorted(hist.items()))


@dataclass
class RunState:
    t: int = 0
    m: int = 1
    history: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    assignments: list[dict] = field(default_factory=list)
    resources: list[dict] = field(default_factory=list)
    modules: list[dict] = field(default_factory=list)
    events: list[str] = field(default_factory=list)
    done: bool = False


def _schedule_to_json(s: PerturbationSchedule) -> dict:
    return {
        "modules": {str(m): [v.alpha_tenths, v.dstar, v.ref_ratio] for m, v in s.modules.items()},
        "frozen_acc": {str(m): list(v) for m, v in s.frozen_acc.items()},
        "dstar": {str(m): v for m, v in s.dstar.items()},
    }


def _schedule_from_json(cfg: RunConfig, data: dict) -> PerturbationSchedule:
    from .server import ModuleSchedule

    s = new_schedule(cfg)
    s.modules = {int(m): ModuleSchedule(int(a), float(d), float(r)) for m, (a, d, r) in data["modules"].items()}
    s.frozen_acc = {int(m): (float(c), float(a)) for m, (c, a) in data["frozen_acc"].items()}
    s.dstar = {int(m): float(v) for m, v in data["dstar"].items()}
    return s


def new_schedule(cfg: RunConfig) -> PerturbationSchedule:
    return PerturbationSchedule(cfg.epsilon0, cfg.delta, cfg.alpha_init)


def persist(run_dir: Path, setup: Setup, backbone: Backbone, state: RunState, schedule: PerturbationSchedule) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, state.metrics)
    _write_csv(run_dir / "assignments.csv", ASSIGN_COLUMNS, state.assignments)
    _write_csv(run_dir / "resources.csv", ["round", "client", "memory", "performance"], state.resources)
    _write_csv(run_dir / "modules.csv", MODULE_COLUMNS, state.modules)
    (run_dir / "events.log").write_text("".join(e + "\n" for e in state.events))
    eps = " ".join(repr(schedule.epsilon_for(n)) if (n == 1 or n in schedule.modules) else "nan"
                   for n in range(1, backbone.M + 1))
    checkpoint.save_checkpoint(run_dir / "checkpoint", backbone, state.t, state.m, {"epsilons": eps})
    (run_dir / "checkpoint" / "config.txt").write_text(setup.cfg.dumps())
    blob = {
        "t": state.t, "m": state.m, "history": state.history, "done": state.done,
        "schedule": _schedule_to_json(schedule),
    }
    (run_dir / "state.json").write_text(json.dumps(blob, sort_keys=True, indent=1))


def _coerce_rows(rows: list[dict[str, str]]) -> list[dict]:
    out = []
    for row in rows:
        conv = {}
        for k, v in row.items():
            try:
                conv[k] = int(v)
            except ValueError:
                try:
                    conv[k] = float(v)
                except ValueError:
                    conv[k] = v
        out.append(conv)
    return out


def restore(run_dir: Path, cfg: RunConfig) -> tuple[RunState, PerturbationSchedule, Backbone]:
    blob = json.loads((run_dir / "state.json").read_text())
    state = RunState(t=blob["t"], m=blob["m"], history=[float(v) for v in blob["history"]], done=blob["done"])
    state.metrics = _coerce_rows(read_csv(run_dir / "metrics.csv"))
    state.assignments = _coerce_rows(read_csv(run_dir / "assignments.csv"))
    state.resources = _coerce_rows(read_csv(run_dir / "resources.csv"))
    state.modules = _coerce_rows(read_csv(run_dir / "modules.csv"))
    state.events = (run_dir / "events.log").read_text().splitlines()
    backbone, _ = checkpoint.load_checkpoint(run_dir / "checkpoint")
    return state, _schedule_from_json(cfg, blob["schedule"]), backbone


# ---------------------------------------------------------------------------
# the loop


@dataclass
class RunResult:
    backbone: Backbone
    setup: Setup
    state: RunState
    schedule: PerturbationSchedule
    final: list[dict]

    @property
    def metrics(self) -> list[dict]:
        return self.state.metrics

    def final_acc(self, split: str = "test") -> tuple[float, float]:
        row = next(r for r in self.final if r["split"] == split)
        return row["clean_acc"], row["adv_acc"]


def _load_weights(backbone: Backbone, stage: dict, heads: dict) -> None:
    for n, st in stage.items():
        backbone.module(n).load_backbone_state(st)
    for n, st in heads.items():
        backbone.module(n).load_head_state(st)


def train_round(setup: Setup, backbone: Backbone, schedule: PerturbationSchedule, state: RunState,
                features: dict[int, np.ndarray], clean: float, adv: float) -> None:
    """One round for the current module: APA, assignment, local training, partial averaging."""
    cfg, m, t, M = setup.cfg, state.m, state.t, backbone.M
    alpha = ""
    ref = ""
    if m > 1:
        if not cfg.apa_off:
            adjust_alpha(schedule, m, clean, adv)
            state.events.append(f"{t} {m} apa")
        alpha = schedule.modules[m].alpha
        ref = schedule.modules[m].ref_ratio
    eps = schedule.epsilon_for(m)

    records = tick_resources(setup.fleet, t, cfg.seed, setup.r_floor, cfg.degrade)
    p_min = min_performance(records)
    plan = assign_modules(t, m, M, records, setup.costs.mem, setup.costs.flops, p_min, dma=not cfg.dma_off)
    state.events.append(f"{t} {m} assign")
    base_flops = setup.costs.flops(m, m)
    for rec in records:
        mk = plan.assignment[rec.k]
        state.resources.append({"round": t, "client": rec.k, "memory": rec.memory, "performance": rec.performance})
        state.assignments.append({
            "round": t, "module": m, "client": rec.k, "mk": mk,
            "mem_req": setup.costs.mem(m, mk), "memory": rec.memory,
            "flops": setup.costs.flops(m, mk), "flops_budget": rec.performance / p_min * base_flops,
            "performance": rec.performance, "p_min": p_min,
        })

    optim = OptimCfg(cfg.lr, cfg.momentum, cfg.local_iters, cfg.batch_size)
    attack = attack_cfg_for(m, eps, AttackCfg.linf(cfg.epsilon0, cfg.step0, cfg.pgd_steps), cfg.pgd_steps)
    train_eps = 0.0 if cfg.standard_training else eps
    updates = []
    for s in setup.shards:
        updates.append(local_adversarial_train(
            backbone, m, plan.assignment[s.client], features[s.client], s.train.y, train_eps,
            cfg.mu_effective, attack, optim, client_rng(cfg.seed, t, s.client), s.client,
        ))
    state.events.append(f"{t} {m} train")

    prev_b = {n: backbone.module(n).backbone_state() for n in range(m, M + 1)}
    prev_h = {n: backbone.module(n).head_state() for n in range(m, M + 1)}
    q = setup.q
    _load_weights(backbone, aggregate_backbone(updates, plan, prev_b, q), aggregate_aux(updates, plan, prev_h, q))
    state.events.append(f"{t} {m} aggregate frozen={frozen_digest(backbone)}")

    state.metrics.append({
        "round": t, "module": m, "module_round": len(state.history) + 1, "epsilon": eps, "alpha": alpha,
        "clean_acc": clean, "adv_acc": adv, "acc_ratio": accuracy_ratio(clean, adv), "ref_ratio": ref,
        "mk_hist": hist_string(plan.histogram()),
    })


def final_evaluation(setup: Setup, backbone: Backbone) -> list[dict]:
    cfg = setup.cfg
    attack = input_attack(cfg, steps=cfg.eval_steps)
    rows = []
    val_x = np.concatenate([s.val.x for s in setup.shards])
    val_y = np.concatenate([s.val.y for s in setup.shards])
    for split, x, y in (("test", setup.test.x, setup.test.y), ("val", val_x, val_y)):
        c, a = advkit.evaluate(backbone, x, y, attack)
        rows.append({"split": split, "samples": len(y), "clean_acc": c, "adv_acc": a,
                     "epsilon": cfg.epsilon0, "pgd_steps": cfg.eval_steps})
    return rows


def run(cfg: RunConfig, run_dir: str | Path | None = None, resume: bool = False,
        max_rounds: int | None = None) -> RunResult:
    """Train every module in order until convergence; persist after each round when ``run_dir`` is set.

    ``max_rounds`` stops after that many global rounds (an interruption, resumable).
    """
    setup = prepare(cfg)
    run_dir = Path(run_dir) if run_dir is not None else None
    if resume and run_dir is not None and (run_dir / "state.json").exists():
        state, schedule, backbone = restore(run_dir, cfg)
        if backbone.boundaries() != setup.plan.boundaries:
            raise ValueError("checkpoint partition does not match the config")
    else:
        state, schedule, backbone = RunState(), new_schedule(cfg), setup.backbone
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
            setup.plan.write_csv(run_dir / "partition.csv")
            write_fleet_csv(setup.fleet, run_dir / "fleet.csv")
            (run_dir / "config.txt").write_text(cfg.dumps())
            (run_dir / "architecture.txt").write_text("\n".join(backbone.architecture()) + "\n")
            (run_dir / "dataset.txt").write_text(summary(setup.train, setup.shards) + "\n")

    M = backbone.M
    while not state.done:
        m = state.m
        features = {s.client: prefix_features(backbone, s.train.x, m) for s in setup.shards}
        while True:
            if max_rounds is not None and state.t >= max_rounds:
                return RunResult(backbone, setup, state, schedule, [])
            clean, adv, _ = validate(setup, backbone, m)
            state.events.append(f"{state.t} {m} validate")
            if state.history:
                state.history[-1] = adv
                if module_converged(state.history, setup.budgets[m - 1], cfg.patience, cfg.min_delta):
                    break
            train_round(setup, backbone, schedule, state, features, clean, adv)
            state.history.append(math.nan)  # filled by the next validation
            state.t += 1
            if run_dir is not None:
                persist(run_dir, setup, backbone, state, schedule)

        if clean < 1.0 / setup.train.num_classes:
            raise ModuleTrainingError(
                f"module {m} converged below chance: clean={clean:.4f} adv={adv:.4f} "
                f"after {len(state.history)} rounds (history {state.history})"
            )
        eps_in = schedule.epsilon_for(m)
        dstar = freeze_and_measure(setup, backbone, schedule, m, clean, adv, features)
        state.events.append(f"{state.t} {m} freeze")
        state.modules.append({"module": m, "rounds": len(state.history), "clean_star": clean,
                              "adv_star": adv, "epsilon_in": eps_in, "dstar": dstar})
        state.history = []
        if m == M:
            state.done = True
        else:
            state.m = m + 1
        if run_dir is not None:
            persist(run_dir, setup, backbone, state, schedule)

    final = final_evaluation(setup, backbone)
    if run_dir is not None:
        _write_csv(run_dir / "final.csv", FINAL_COLUMNS, final)
    return RunResult(backbone, setup, state, schedule, final)


# ---------------------------------------------------------------------------
# offline tools on a checkpoint


def _checkpoint_config(ckpt: Path) -> RunConfig:
    return load_config(ckpt / "config.txt", env=False)


def evaluate_checkpoint(ckpt: str | Path, pgd_steps: int | None = None, epsilon: float | None = None) -> dict:
    ckpt = Path(ckpt)
    cfg = _checkpoint_config(ckpt)
    backbone, _ = checkpoint.load_checkpoint(ckpt)
    _, test = build_data(cfg)
    steps = cfg.eval_steps if pgd_steps is None else pgd_steps
    eps = cfg.epsilon0 if epsilon is None else epsilon
    c, a = advkit.evaluate(backbone, test.x, test.y, input_attack(cfg, steps, eps))
    return {"split": "test", "samples": len(test), "clean_acc": c, "adv_acc": a, "epsilon": eps, "pgd_steps": steps}


def certify_checkpoint(ckpt: str | Path, out_dir: str | Path | None = None, mu: float | None = None,
                       max_samples: int = 2000) -> tuple[list, list]:
    """Displacement certificates per module and early-exit/joint gradient gaps on validation data."""
    ckpt = Path(ckpt)
    cfg = _checkpoint_config(ckpt)
    backbone, header = checkpoint.load_checkpoint(ckpt)
    setup = prepare(cfg)
    mu = cfg.mu_effective if mu is None else mu
    x = np.concatenate([s.val.x for s in setup.shards])[:max_samples]
    y = np.concatenate([s.val.y for s in setup.shards])[:max_samples]
    eps = [float(v) for v in header.get("epsilons", "").split()]
    certs, gaps = [], []
    z = x
    for m in range(1, backbone.M + 1):
        mod = backbone.module(m)
        e = eps[m - 1] if m - 1 < len(eps) and not math.isnan(eps[m - 1]) else cfg.epsilon0
        attack = input_attack(cfg) if m == 1 else AttackCfg.l2(e, cfg.pgd_steps, random_start=False)
        if mu > 0:
            certs.append(advkit.certify_displacement(mod, z, y, mu, attack))
        if m < backbone.M:
            gaps.append(advkit.gradient_inconsistency(backbone, m, x[:200], y[:200], mu))
        with gc.no_grad():
            z = mod.forward(Tensor(z)).data
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for cert, m in zip(certs, range(1, backbone.M + 1)):
            cert.write_csv(out / f"certificate_m{m}.csv")
        for g in gaps:
            g.write_csv(out / f"inconsistency_m{g.module}.csv")
    return certs, gaps


def report(run_dir: str | Path) -> str:
    d = Path(run_dir)
    lines = [f"run directory: {d}"]
    if not d.is_dir():
        return "\n".join(lines + ["missing: run directory does not exist"])
    ds = d / "dataset.txt"
    if ds.exists():
        lines.append(ds.read_text().rstrip())
    metrics_path = d / "metrics.csv"
    rows = read_csv(metrics_path) if metrics_path.exists() else []
    if not metrics_path.exists():
        lines.append("missing: metrics.csv")
    if not rows:
        lines.append("no rounds")
    else:
        lines.append("")
        lines.append(f"{'round':>5} {'m':>2} {'eps':>9} {'alpha':>5} {'clean':>6} {'adv':>6}  mk histogram")
        for r in rows:
            lines.append(
                f"{r['round']:>5} {r['module']:>2} {float(r['epsilon']):9.5f} {r['alpha'] or '-':>5} "
                f"{float(r['clean_acc']):6.3f} {float(r['adv_acc']):6.3f}  {r['mk_hist']}"
            )
    mod_path = d / "modules.csv"
    if mod_path.exists():
        lines.append("")
        for r in read_csv(mod_path):
            lines.append(
                f"module {r['module']}: rounds={r['rounds']} C*={float(r['clean_star']):.4f} "
                f"A*={float(r['adv_star']):.4f} eps_in={float(r['epsilon_in']):.5g} E[d*]={float(r['dstar']):.5g}"
            )
    else:
        lines.append("missing: modules.csv")
    fin = d / "final.csv"
    if fin.exists():
        lines.append("")
        for r in read_csv(fin):
            lines.append(
                f"final {r['split']}: clean={float(r['clean_acc']):.4f} adv={float(r['adv_acc']):.4f} "
                f"(PGD-{r['pgd_steps']}, eps={float(r['epsilon']):.5g}, n={r['samples']})"
            )
    else:
        lines.append("missing: final.csv")
    for pattern, label in (("certificate_m*.csv", "certificate"), ("inconsistency_m*.csv", "inconsistency")):
        found = sorted(d.glob(pattern)) + sorted(d.glob(f"certify/{pattern}"))
        if not found:
            lines.append(f"missing: {label} summaries")
        for p in found:
            tail = [ln for ln in p.read_text().splitlines() if ln.startswith("# summary:")]
            lines.append(f"{label} {p.stem}: {tail[-1][len('# summary: '):] if tail else 'no summary line'}")
    return "\n".join(lines)
