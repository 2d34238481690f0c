import numpy as np
import pytest

from fedprophet import advkit, netlib
from fedprophet.advkit import AttackCfg
from fedprophet.client_trainer import (
    OptimCfg,
    attack_cfg_for,
    client_rng,
    local_adversarial_train,
    report_dstar,
    report_validation,
)
from fedprophet.config import RunConfig
from fedprophet.datahub import make_blobs
from fedprophet.grad_core import Tensor
from fedprophet.orchestrator import run

ATTACK = AttackCfg.linf(0.05, 0.0125, 5)


def _setup(seed=0, boundaries=(0, 2, 4)):
    data = make_blobs(3, 6, 30, seed=seed)
    bb = netlib.build_backbone("mlp-4x64", (6,), 3, list(boundaries), seed=seed)
    return bb, data


def _state(bb):
    return [p.data.copy() for mod in bb.modules for p in list(mod.named_params().values()) + list(mod.head.params().values())]


def test_snapshot_not_mutated():
    bb, data = _setup()
    before = _state(bb)
    up = local_adversarial_train(bb, 1, 2, data.x, data.y, 0.05, 1e-3, ATTACK, OptimCfg(lr=0.1), client_rng(0, 0, 0))
    for a, b in zip(before, _state(bb)):
        assert a.tobytes() == b.tobytes()
    assert sorted(up.modules) == [1, 2] and up.first == 1 and up.last == 2
    assert not np.array_equal(up.modules[1]["a0.weight"], bb.module(1).named_params()["a0.weight"].data)


def test_zero_learning_rate_keeps_parameters():
    bb, data = _setup()
    up = local_adversarial_train(bb, 1, 1, data.x, data.y, 0.05, 0.0, ATTACK, OptimCfg(lr=0.0, local_iters=1), client_rng(0, 0, 0))
    for k, v in bb.module(1).backbone_state().items():
        np.testing.assert_array_equal(up.modules[1][k], v)
    np.testing.assert_array_equal(up.head["weight"], bb.module(1).head.weight.data)


def test_prophet_update_uses_last_head_only():
    bb, data = _setup()
    up = local_adversarial_train(bb, 1, 2, data.x, data.y, 0.05, 0.0, ATTACK, OptimCfg(), client_rng(0, 0, 0))
    assert up.head["weight"].shape == bb.module(2).head.weight.shape
    assert not np.array_equal(up.head["weight"], bb.module(2).head.weight.data)


def test_rejections():
    bb, data = _setup()
    with pytest.raises(ValueError):
        local_adversarial_train(bb, 1, 1, data.x, data.y, -0.1, 0.0, ATTACK, OptimCfg(), client_rng(0, 0, 0))
    with pytest.raises(ValueError):
        local_adversarial_train(bb, 1, 1, data.x[:0], data.y[:0], 0.1, 0.0, ATTACK, OptimCfg(), client_rng(0, 0, 0))
    with pytest.raises(ValueError):
        local_adversarial_train(bb, 2, 1, data.x, data.y, 0.1, 0.0, ATTACK, OptimCfg(), client_rng(0, 0, 0))
    with pytest.raises(ValueError):
        OptimCfg(local_iters=0)
    with pytest.raises(ValueError):
        OptimCfg(lr=-1.0)


def test_bitwise_reproducible():
    bb, data = _setup()
    run_once = lambda: local_adversarial_train(bb, 1, 2, data.x, data.y, 0.05, 1e-3, ATTACK, OptimCfg(), client_rng(5, 3, 2))
    a, b = run_once(), run_once()
    for n in a.modules:
        for k in a.modules[n]:
            assert a.modules[n][k].tobytes() == b.modules[n][k].tobytes()
    assert a.head["weight"].tobytes() == b.head["weight"].tobytes()
    c = local_adversarial_train(bb, 1, 2, data.x, data.y, 0.05, 1e-3, ATTACK, OptimCfg(), client_rng(5, 3, 3))
    assert a.head["weight"].tobytes() != c.head["weight"].tobytes()


def test_standard_step_decreases_quadratic_toy_loss():
    bb, data = _setup(boundaries=(0, 4))
    z, y = data.x[:16], data.y[:16]
    mod = bb.modules
    before = netlib.prophet_loss(mod, Tensor(z), y, 1e-2).item()
    up = local_adversarial_train(bb, 1, 1, z, y, 0.0, 1e-2, ATTACK, OptimCfg(lr=1e-3, local_iters=1, batch_size=16), client_rng(0, 0, 0))
    trained = bb.clone()
    trained.module(1).load_backbone_state(up.modules[1])
    trained.module(1).load_head_state(up.head)
    after = netlib.prophet_loss(trained.modules, Tensor(z), y, 1e-2).item()
    assert after <= before
    assert up.losses[0] == pytest.approx(before)


def test_feature_attack_config():
    cfg = attack_cfg_for(2, 0.4, ATTACK, 7)
    assert cfg.norm == "l2" and cfg.step_size == pytest.approx(0.1) and cfg.steps == 7
    first = attack_cfg_for(1, 0.4, ATTACK, 7)
    assert first.norm == "linf" and first.epsilon == ATTACK.epsilon


def test_report_validation_matches_evaluate():
    bb, data = _setup()
    cfg = AttackCfg.linf(0.05, 0.0125, 5, random_start=False)
    assert report_validation(bb, 2, data, cfg) == advkit.evaluate(bb, data.x, data.y, cfg, upto=2)
    with pytest.raises(ValueError):
        report_validation(bb, 2, data.subset([]), cfg)


def test_validation_attack_cannot_help():
    bb, data = _setup()
    c, a = report_validation(bb, 2, data, AttackCfg.linf(5.0, 1.0, 5))
    assert a <= c


def _linear_module(weight):
    atom = netlib.Atom("linear", (weight.shape[0],), (weight.shape[1],),
                       {"weight": Tensor(weight), "bias": Tensor(np.zeros(weight.shape[1]))}, relu=False)
    head = netlib.Head(Tensor(np.zeros((weight.shape[1], 2))), Tensor(np.zeros(2)))
    return netlib.ModuleSpec(1, [atom], head, frozen=True)


def test_report_dstar_identity_and_zero():
    z = np.random.default_rng(0).standard_normal((10, 4))
    cfg = AttackCfg.l2(0.3, 8, random_start=False)
    mean, count = report_dstar(_linear_module(np.eye(4)), z, cfg)
    assert mean == pytest.approx(0.3, abs=1e-9) and count == 10
    mean, _ = report_dstar(_linear_module(np.zeros((4, 4))), z, cfg)
    assert mean == 0.0


def test_report_dstar_equals_direct_call_on_concatenated_shard():
    bb, data = _setup()
    mod = bb.module(1)
    mod.frozen = True
    cfg = AttackCfg.l2(0.2, 6, random_start=False)
    parts = [data.x[:40], data.x[40:]]
    local = [report_dstar(mod, p, cfg) for p in parts]
    pooled = sum(m * n for m, n in local) / sum(n for _, n in local)
    _, direct = advkit.measure_dstar(mod, data.x, cfg)
    assert pooled == pytest.approx(direct, abs=1e-9)


def test_adversarial_training_beats_standard_training():
    wins = 0
    for seed in range(5):
        base = RunConfig(mode="joint-fat", classes=2, n_per_class=100, test_per_class=100, clients=4,
                         rounds=30, round_budget="30", patience=0, seed=seed, epsilon0=0.1, step0=0.025)
        c_adv, a_adv = run(base).final_acc("test")
        c_std, a_std = run(base.replace(standard_training=True)).final_acc("test")
        assert abs(c_adv - c_std) <= 0.02
        wins += a_adv > a_std
    assert wins == 5


def test_gradients_stay_inside_assigned_scope():
    bb, data = _setup()
    local_adversarial_train(bb, 1, 1, data.x, data.y, 0.05, 1e-3, ATTACK, OptimCfg(), client_rng(0, 0, 0))
    for mod in bb.modules:
        for p in list(mod.named_params().values()) + list(mod.head.params().values()):
            assert p.grad is None
