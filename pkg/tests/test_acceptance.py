"""Acceptance criteria 1-10; each prints one PASS/FAIL line."""

import itertools
import time

import numpy as np
import pytest
from scipy.linalg import null_space

from fedprophet import advkit, netlib
from fedprophet import grad_core as gc
from fedprophet.cli import main
from fedprophet.config import RunConfig
from fedprophet.grad_core import Tensor
from fedprophet.orchestrator import prefix_features, prepare, read_csv, run
from fedprophet.partitioner import greedy_partition, whole_model_mem

from gradcheck import OP_KINDS, autodiff, finite_diff, random_graph, relative_error

# Shared desk-scale setting: blobs, N=20, M=3, PGD-10 train / PGD-20 eval, equal fixed round budgets.
TREND = dict(n_per_class=500, val_fraction=0.2, rounds=90, lr=0.05, patience=0)
SEEDS = range(5)
VARIANTS = {
    "fedprophet": {},
    "joint-fat": {"mode": "joint-fat"},
    "ablated": {"mu_zero": True, "apa_off": True, "dma_off": True},
    "dma_off": {"dma_off": True},
}


def verdict(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def runs():
    cache = {}

    def get(name, seed, **extra):
        key = (name, seed, tuple(sorted(extra.items())))
        if key not in cache:
            start = time.time()
            cache[key] = run(RunConfig(seed=seed, **TREND, **VARIANTS.get(name, {}), **extra))
            get.seconds[key] = time.time() - start
        return cache[key]

    get.seconds = {}
    return get


def test_criterion_01_gradients(capsys):
    start = time.time()
    rng = np.random.default_rng(2024)
    worst, graphs = 0.0, 0
    for kind in itertools.islice(itertools.cycle(OP_KINDS), 8 * len(OP_KINDS)):
        leaves, fn = random_graph(kind, rng)
        worst = max(worst, relative_error(autodiff(leaves, fn), finite_diff(leaves, fn)))
        graphs += 1
    elapsed = time.time() - start
    verdict(capsys, 1, graphs >= 100 and worst <= 1e-4 and elapsed < 60,
            f"{graphs} graphs over {len(OP_KINDS)} op kinds, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_02_certificate(capsys):
    start = time.time()
    lines, violations, samples = [], 0, []
    for mu in (1e-3, 1e-2):
        cfg = RunConfig(seed=0, mu=mu, r_min_fraction=0.7, n_per_class=500, val_fraction=0.2,
                        rounds=30, lr=0.05, patience=0)
        result = run(cfg)
        setup, bb = result.setup, result.backbone
        assert bb.M == 2
        x = np.concatenate([s.val.x for s in setup.shards])
        y = np.concatenate([s.val.y for s in setup.shards])
        for m in (1, 2):
            z = prefix_features(bb, x, m)
            eps = cfg.epsilon0 if m == 1 else result.schedule.epsilon_for(m)
            attack = (advkit.AttackCfg.linf(eps, cfg.step0, cfg.pgd_steps, random_start=False) if m == 1
                      else advkit.AttackCfg.l2(eps, cfg.pgd_steps, random_start=False))
            cert = advkit.certify_displacement(bb.module(m), z, y, mu, attack)
            violations += cert.violations
            samples.append(cert.displacement.size)
            lines.append(f"mu={mu:g} m={m} n={cert.displacement.size} viol={cert.violations}")
    elapsed = time.time() - start
    verdict(capsys, 2, violations == 0 and min(samples) >= 1000 and elapsed < 300,
            f"{'; '.join(lines)}; {elapsed:.0f}s")


def _per_sample_loss_and_grad(head, z, y, mu):
    zt = Tensor(z, requires_grad=True)
    with gc.Tape():
        g = gc.grad_wrt_input(netlib.head_loss(head, zt, y, mu, reduction="sum"), zt)
    with gc.no_grad():
        loss = netlib.head_loss(head, Tensor(z), y, mu, reduction="none").data
    return loss, g


def test_criterion_03_strong_convexity(capsys):
    rng = np.random.default_rng(7)
    d, classes, n, mu = 64, 10, 10_000, 1e-2
    head = netlib.Head.init(rng, d, classes)
    z = rng.standard_normal((n, d))
    z2 = z + rng.standard_normal((n, d)) * rng.uniform(0.01, 3.0, size=(n, 1))
    y = rng.integers(0, classes, size=n)
    l1, g1 = _per_sample_loss_and_grad(head, z, y, mu)
    l2, _ = _per_sample_loss_and_grad(head, z2, y, mu)
    diff = z2 - z
    gap = l2 - (l1 + (g1 * diff).sum(axis=1) + 0.5 * mu * (diff * diff).sum(axis=1))
    convex_ok = gap.min() >= -1e-9

    # mu = 0 with a rank-deficient head: a null-space direction moves z without changing the loss
    low = rng.standard_normal((d, 3)) @ rng.standard_normal((3, classes))
    flat = netlib.Head(Tensor(low), Tensor(np.zeros(classes)))
    v = null_space(low.T)[:, 0]
    z0, y0 = rng.standard_normal((1, d)), np.array([2])
    t = 1e6
    base, _ = _per_sample_loss_and_grad(flat, z0, y0, 0.0)
    moved, _ = _per_sample_loss_and_grad(flat, z0 + t * v, y0, 0.0)
    reg, _ = _per_sample_loss_and_grad(flat, z0 + t * v, y0, mu)
    null_ok = abs(moved[0] - base[0]) <= 1e-6 * max(1.0, abs(base[0])) and reg[0] > base[0] + 0.4 * mu * t * t
    verdict(capsys, 3, convex_ok and null_ok,
            f"min gap over {n} pairs {gap.min():.2e}; null-space move |r|={t:g} changes mu=0 loss by "
            f"{abs(moved[0] - base[0]):.1e}")


def _brute_min_modules(costs, r_min, aux):
    L = len(costs)
    best = None
    for mask in range(1 << (L - 1)):
        cuts = [0] + [i + 1 for i in range(L - 1) if mask >> i & 1] + [L]
        if all(sum(costs[a:b]) + aux < r_min for a, b in zip(cuts, cuts[1:])):
            best = len(cuts) - 1 if best is None else min(best, len(cuts) - 1)
    return best


def test_criterion_04_partitioner(capsys):
    start = time.time()
    rng = np.random.default_rng(99)
    mismatches = violations = 0
    for _ in range(200):
        L = int(rng.integers(1, 11))
        costs = list(rng.uniform(1, 50, size=L))
        aux = float(rng.uniform(0, 10))
        r_min = float(rng.uniform(max(costs) + aux + 1e-6, sum(costs) + aux + 30))
        bounds = greedy_partition(costs, r_min, lambda idx, a=aux: sum(idx) + a)
        groups = list(zip(bounds, bounds[1:]))
        mismatches += len(groups) != _brute_min_modules(costs, r_min, aux)
        violations += sum(not (sum(costs[a:b]) + aux < r_min) for a, b in groups)
    elapsed = time.time() - start
    verdict(capsys, 4, mismatches == 0 and violations == 0 and elapsed < 10,
            f"200 instances, {mismatches} count mismatches, {violations} over-budget modules, {elapsed:.2f}s")


def test_criterion_05_assignment_feasibility(capsys, tmp_path):
    result = run(RunConfig(seed=1, regime="unbalanced", **TREND), tmp_path)
    costs = result.setup.costs
    rows = read_csv(tmp_path / "assignments.csv")
    bad = 0
    for r in rows:
        m, mk = int(r["module"]), int(r["mk"])
        budget = float(r["performance"]) / float(r["p_min"]) * costs.flops(m, m)
        bad += not (costs.mem(m, mk) <= float(r["memory"]))
        bad += not (costs.flops(m, mk) <= budget * (1 + 1e-12))
        bad += not (m <= mk <= result.backbone.M)
    rounds = len({r["round"] for r in rows})
    prophets = sum(int(r["mk"]) > int(r["module"]) for r in rows)
    verdict(capsys, 5, bad == 0 and len(rows) == 20 * rounds,
            f"{len(rows)} (client, round) rows over {rounds} rounds, {bad} violations, {prophets} prophet assignments")


def test_criterion_06_coordinator(capsys, runs):
    steps_ok, inside, total = True, 0, 0
    for seed in SEEDS:
        rows = runs("fedprophet", seed).metrics
        for m in (2, 3):
            mod_rows = [r for r in rows if r["module"] == m]
            tenths = [round(r["alpha"] * 10) for r in mod_rows]
            steps_ok &= all(abs(b - a) <= 1 for a, b in zip(tenths, tenths[1:]))
            steps_ok &= all(abs(r["alpha"] * 10 - round(r["alpha"] * 10)) < 1e-12 for r in mod_rows)
            for r in mod_rows[5:]:
                total += 1
                inside += abs(r["acc_ratio"] - r["ref_ratio"]) <= 0.05 * r["ref_ratio"]
    frozen = runs("fedprophet", 0, apa_off=True).metrics
    constant = all(len({r["epsilon"] for r in frozen if r["module"] == m}) == 1 for m in (1, 2, 3))
    frac = inside / max(total, 1)
    verdict(capsys, 6, steps_ok and constant and frac >= 0.6,
            f"alpha steps in +-0.1: {steps_ok}; apa_off epsilon constant: {constant}; "
            f"in-band {inside}/{total} = {frac:.2f}")


def test_criterion_07_degenerate_equivalence(capsys, tmp_path):
    cfg = RunConfig(seed=3, n_per_class=100, rounds=12)
    setup = prepare(cfg)
    atoms, _ = netlib.build_preset_atoms(cfg.preset, setup.train.feature_shape, cfg.classes, cfg.seed)
    whole = whole_model_mem(atoms, setup.cost, cfg.classes)
    a = run(cfg.replace(r_min=float(whole)), tmp_path / "a")
    b = run(cfg.replace(mode="joint-fat"), tmp_path / "b")
    names = ["metrics.csv", "assignments.csv", "resources.csv", "modules.csv", "final.csv", "events.log"]
    names += sorted(p.relative_to(tmp_path / "a").as_posix() for p in (tmp_path / "a" / "checkpoint").glob("*.bin"))
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    verdict(capsys, 7, a.backbone.M == 1 and b.backbone.M == 1 and same,
            f"M={a.backbone.M}/{b.backbone.M}, {len(names)} artifacts bitwise equal: {same}")


def test_criterion_08_trend(capsys, runs):
    acc = {name: [runs(name, s).final_acc("test") for s in SEEDS] for name in VARIANTS}
    fp = np.array(acc["fedprophet"])
    jf = np.array(acc["joint-fat"])
    ab = np.array(acc["ablated"])
    do = np.array(acc["dma_off"])
    close = np.abs(fp - jf) <= 0.05
    a_ok = bool(close.all())
    wins = int((fp[:, 1] > ab[:, 1]).sum())
    c_ok = do[:, 1].mean() < fp[:, 1].mean()
    elapsed = sum(v for (name, _, extra), v in runs.seconds.items() if name in VARIANTS and not extra)
    detail = (
        f"(a) |fp-jfat| clean {np.round(np.abs(fp - jf)[:, 0], 3).tolist()} adv {np.round(np.abs(fp - jf)[:, 1], 3).tolist()}; "
        f"(b) fp beats ablation in {wins}/5; (c) mean adv fp {fp[:, 1].mean():.3f} vs dma_off {do[:, 1].mean():.3f}; "
        f"{elapsed:.0f}s of training"
    )
    verdict(capsys, 8, a_ok and wins >= 4 and c_ok and elapsed < 1800, detail)


def test_criterion_09_inconsistency(capsys, runs):
    wins, pairs = 0, []
    for seed in SEEDS:
        means = []
        for std in (False, True):
            result = runs("fedprophet", seed, standard_training=std) if std else runs("fedprophet", seed)
            bb = result.backbone
            x = np.concatenate([s.val.x for s in result.setup.shards])[:200]
            y = np.concatenate([s.val.y for s in result.setup.shards])[:200]
            gaps = [advkit.gradient_inconsistency(bb, m, x, y, result.setup.cfg.mu_effective).mean
                    for m in range(1, bb.M)]
            means.append(float(np.mean(gaps)))
        pairs.append(tuple(round(v, 4) for v in means))
        wins += means[0] < means[1]
    verdict(capsys, 9, wins >= 4, f"adversarial < standard in {wins}/5 seeds, (adv, std) {pairs}")


def test_criterion_10_determinism(capsys, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(RunConfig(seed=5, n_per_class=60, rounds=12, clients=6).dumps())
    for name in ("a", "b"):
        assert main(["train", str(cfg_path), "--out", str(tmp_path / name)]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    checked = [f for f in files if f.suffix in (".csv", ".bin") or f.name == "manifest.txt"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    verdict(capsys, 10, same and len(checked) > 10, f"{len(files)} files ({len(checked)} CSV/checkpoint) bitwise equal: {same}")
