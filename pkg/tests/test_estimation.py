import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmuspoof.errors import UnobservableError
from pmuspoof.estimation import (
    GainMatrix,
    attacked_stats,
    bias_gradient,
    bias_vector,
    estimate_map,
    estimate_ml,
    expand_state,
    reduce_state,
)
from pmuspoof.pmu import AttackScenario, gamma_matrix, simulate_measurements


def _random_attack(net, rng, k=2, max_deg=70.0):
    buses = rng.choice(net.model.pmu_buses, size=k, replace=False)
    return AttackScenario.from_degrees(net.case.bus_ids, {int(b): float(rng.uniform(-max_deg, max_deg)) for b in buses}, max_deg=max_deg)


# ---------------------------------------------------------------------------
# ML / MAP


def test_noiseless_recovery(ieee14, ieee118):
    for net in (ieee14, ieee118):
        z = simulate_measurements(net.model, net.v, noise_scale=0)
        np.testing.assert_allclose(estimate_ml(net.model, z), net.v, atol=1e-10)


def test_ml_is_linear(ieee14, rng):
    z1 = simulate_measurements(ieee14.model, ieee14.v, seed=1).z
    z2 = simulate_measurements(ieee14.model, ieee14.v, seed=2).z
    a, b = rng.standard_normal(2)
    mix = {k: a * z1[k] + b * z2[k] for k in z1}
    lhs = estimate_ml(ieee14.model, mix)
    rhs = a * estimate_ml(ieee14.model, z1) + b * estimate_ml(ieee14.model, z2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_map_limits(ieee14):
    z = simulate_measurements(ieee14.model, ieee14.v, seed=4)
    ml = estimate_ml(ieee14.model, z)
    prior = ieee14.v + 0.05
    n = ieee14.model.state_dim
    weak = estimate_map(ieee14.model, z, prior, 1e-12 * np.eye(n))
    np.testing.assert_allclose(weak, ml, atol=1e-9)
    strong = estimate_map(ieee14.model, z, prior, 1e12 * np.eye(n))
    np.testing.assert_allclose(strong, prior, atol=1e-6)


def test_map_reference_reduced(ieee14):
    ref = ieee14.ref
    z = simulate_measurements(ieee14.model, ieee14.v, noise_scale=0)
    n = ieee14.model.state_dim - 1
    out = estimate_map(ieee14.model, z, reduce_state(ieee14.v, ref), np.eye(n), ref=ref)
    assert out[ieee14.model.n_bus + ref] == 0.0
    np.testing.assert_allclose(out, ieee14.v, atol=1e-10)


def test_reduce_expand_round_trip(rng):
    v = rng.standard_normal(10)
    v[5 + 2] = 0.0
    np.testing.assert_array_equal(expand_state(reduce_state(v, 2), 2), v)


def test_gain_rejects_singular():
    with pytest.raises(UnobservableError):
        GainMatrix(np.diag([1.0, 0.0]))
    with pytest.raises(UnobservableError):
        GainMatrix(np.diag([1.0, 1e-20]))


def test_unobservable_placement_detected(ieee14):
    sub = ieee14.model.subset([2, 6])
    with pytest.raises(UnobservableError):
        sub.check_observable()


# ---------------------------------------------------------------------------
# attacked-estimator statistics


def test_attacked_mean_and_covariance_monte_carlo(ieee14):
    attack = AttackScenario.from_degrees(ieee14.case.bus_ids, {6: 30.0, 14: -45.0})
    stats = attacked_stats(ieee14.model, attack, ieee14.v)
    rng = np.random.default_rng(99)
    n = 4000
    est = np.array([estimate_ml(ieee14.model, simulate_measurements(ieee14.model, ieee14.v, attack, seed=rng)) for _ in range(n)])
    se = np.sqrt(np.diag(stats.covariance) / n)
    assert np.all(np.abs(est.mean(0) - stats.mean) < 4 * se)
    var = est.var(0, ddof=1)
    assert np.all(np.abs(var / np.diag(stats.covariance) - 1) < 4 * math.sqrt(2 / n))
    mse = np.mean(np.sum((est - ieee14.v) ** 2, axis=1))
    assert mse == pytest.approx(stats.mse, rel=0.05)


def test_attacked_mean_closed_form(ieee14):
    attack = AttackScenario.from_degrees(ieee14.case.bus_ids, {2: 20.0, 10: -35.0})
    stats = attacked_stats(ieee14.model, attack, ieee14.v)
    g = ieee14.model.gain
    rhs = sum(
        b.h.T @ np.linalg.inv(b.sigma) @ gamma_matrix(attack.delta_theta[b.index], b.n_lines) @ b.h @ ieee14.v
        for b in ieee14.model.blocks
    )
    np.testing.assert_allclose(stats.mean, np.linalg.solve(g, rhs), atol=1e-12)
    np.testing.assert_allclose(stats.covariance, np.linalg.inv(g), atol=1e-12)


def test_no_attack_is_unbiased(ieee30):
    stats = attacked_stats(ieee30.model, AttackScenario.none(30), ieee30.v)
    assert np.abs(stats.bias).max() < 1e-12
    assert stats.mse == pytest.approx(np.trace(stats.covariance))


def test_mse_identity_random_attacks(ieee14):
    rng = np.random.default_rng(5)
    for _ in range(100):
        attack = _random_attack(ieee14, rng, k=int(rng.integers(1, 4)))
        s = attacked_stats(ieee14.model, attack, ieee14.v)
        assert s.mse == pytest.approx(np.trace(s.covariance) + s.bias @ s.bias, abs=1e-10)
        np.testing.assert_allclose(bias_vector(ieee14.model, attack, ieee14.v), s.bias, atol=1e-10)


def test_bias_gradient_finite_differences(ieee14, ieee30):
    rng = np.random.default_rng(11)
    for net in (ieee14, ieee30):
        for _ in range(5):
            attack = _random_attack(net, rng, k=3, max_deg=60)
            g = bias_gradient(net.model, attack, net.v)
            h = 1e-6
            for k in np.flatnonzero(attack.b):
                up, dn = attack.delta_theta.copy(), attack.delta_theta.copy()
                up[k] += h
                dn[k] -= h
                f = lambda dt: float(np.sum(bias_vector(net.model, AttackScenario(attack.b, dt, np.full_like(dt, 4.0) * attack.b), net.v) ** 2))
                fd = (f(up) - f(dn)) / (2 * h)
                assert g[k] == pytest.approx(fd, abs=1e-5, rel=1e-5)
            assert np.all(g[attack.b == 0] == 0)


@settings(max_examples=30, deadline=None)
@given(st.floats(-math.pi, math.pi))
def test_full_rotation_of_every_pmu_rotates_state(ieee14, theta):
    # spoofing every PMU by the same angle just rotates the estimate
    angles = {b: math.degrees(theta) for b in ieee14.model.pmu_buses}
    attack = AttackScenario.from_degrees(ieee14.case.bus_ids, angles)
    mean = attacked_stats(ieee14.model, attack, ieee14.v).mean
    vc = ieee14.profile.complex * np.exp(1j * theta)
    np.testing.assert_allclose(mean, np.concatenate([vc.real, vc.imag]), atol=1e-10)
