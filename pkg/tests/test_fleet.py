import numpy as np
import pytest
from scipy.stats import binom

from fedprophet.fleet import (
    DeviceProfile,
    check_profiles,
    default_profiles,
    min_performance,
    sample_fleet,
    sampling_weights,
    tick_resources,
    write_fleet_csv,
)


def test_single_profile_gives_identical_clients():
    prof = [DeviceProfile("only", 100.0, 1.0)]
    for regime in ("balanced", "unbalanced"):
        recs = sample_fleet(prof, 7, regime, seed=3)
        assert {r.profile for r in recs} == {prof[0]}


def test_balanced_counts_within_binomial_interval():
    profiles = default_profiles(1000.0)
    recs = sample_fleet(profiles, 100, "balanced", seed=0)
    lo, hi = binom.interval(0.99, 100, 0.25)
    for p in profiles:
        assert lo <= sum(r.profile == p for r in recs) <= hi


def test_unbalanced_weights_favor_weakest():
    profiles = default_profiles(1000.0)
    w = sampling_weights(profiles, "unbalanced")
    np.testing.assert_allclose(w, np.array([8, 4, 2, 1]) / 15)
    assert w[0] == pytest.approx(0.533, abs=1e-3)
    draws = [sum(r.profile == profiles[0] for r in sample_fleet(profiles, 100, "unbalanced", s)) for s in range(200)]
    assert abs(np.mean(draws) - 53.3) < 1.5


def test_fleet_validation():
    with pytest.raises(ValueError):
        sample_fleet(default_profiles(1.0), 0, "balanced", 0)
    with pytest.raises(ValueError):
        sample_fleet(default_profiles(1.0), 3, "skewed", 0)


def test_q_weights_recorded():
    recs = sample_fleet(default_profiles(1.0), 3, "balanced", 0, weights=[0.2, 0.3, 0.5])
    assert [r.q for r in recs] == [0.2, 0.3, 0.5]
    assert sum(r.q for r in sample_fleet(default_profiles(1.0), 4, "balanced", 0)) == pytest.approx(1.0)


def test_tick_without_degradation_returns_base():
    recs = sample_fleet(default_profiles(1000.0), 10, "balanced", 1)
    for r in tick_resources(recs, 5, seed=1, degrade=False):
        assert r.memory == r.profile.base_memory
        assert r.performance == r.profile.base_performance


def test_tick_deterministic_and_clamped():
    recs = sample_fleet(default_profiles(1000.0), 30, "unbalanced", 2)
    a = tick_resources(recs, 4, seed=2, r_floor=1000.0)
    b = tick_resources(recs, 4, seed=2, r_floor=1000.0)
    assert a == b
    assert tick_resources(recs, 5, seed=2) != a
    for r in a:
        assert 1000.0 <= r.memory <= r.profile.base_memory
        assert 0 < r.performance <= r.profile.base_performance


def test_degrading_factor_mean():
    recs = sample_fleet([DeviceProfile("x", 1.0, 1.0)], 100, "balanced", 0)
    u = np.concatenate([[r.memory for r in tick_resources(recs, t, seed=9)] for t in range(100)])
    assert u.size == 10_000
    assert 0.74 <= u.mean() <= 0.76
    assert u.min() >= 0.5 and u.max() <= 1.0


def test_min_performance():
    recs = sample_fleet(default_profiles(1.0), 1, "balanced", 0)
    assert min_performance(recs) == recs[0].performance
    from dataclasses import replace

    trio = [replace(recs[0], performance=p) for p in (3.0, 1.0, 2.0)]
    assert min_performance(trio) == 1.0
    rng = np.random.default_rng(0)
    many = [replace(recs[0], performance=float(p)) for p in rng.uniform(0, 10, 50)]
    assert min_performance(many) == sorted(r.performance for r in many)[0]
    with pytest.raises(ValueError):
        min_performance([])


def test_profile_check_and_csv(tmp_path):
    recs = sample_fleet(default_profiles(100.0), 5, "balanced", 0)
    check_profiles(recs, 100.0)
    with pytest.raises(ValueError):
        check_profiles(recs, 101.0)
    write_fleet_csv(recs, tmp_path / "fleet.csv")
    lines = (tmp_path / "fleet.csv").read_text().splitlines()
    assert lines[0] == "client,profile,base_memory,base_performance,q" and len(lines) == 6
