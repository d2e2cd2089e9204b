import math

import numpy as np
import pytest

from pmuspoof.estimation import bias_vector
from pmuspoof.netcase import solve_power_flow
from pmuspoof.pmu import AttackScenario
from pmuspoof.vulnerability import (
    BiasModel,
    find_vulnerable_greedy,
    find_vulnerable_optimal,
    grid_scan_1d,
    maximize_bias_fixed_set,
)

BOUND = math.radians(70)


@pytest.fixture(scope="module")
def bm14(ieee14):
    return BiasModel(ieee14.model, ieee14.v)


def test_bias_model_matches_direct_bias(ieee14, bm14):
    rng = np.random.default_rng(2)
    for _ in range(20):
        buses = rng.choice(ieee14.model.pmu_buses, size=3, replace=False)
        attack = AttackScenario.from_degrees(ieee14.case.bus_ids, {int(b): rng.uniform(-70, 70) for b in buses})
        np.testing.assert_allclose(bm14.bias(attack.delta_theta), bias_vector(ieee14.model, attack, ieee14.v), atol=1e-12)


def test_single_bus_subproblem_matches_fine_grid(ieee14, bm14):
    for bus in ieee14.model.pmu_buses:
        k = bus - 1
        b = np.zeros(14, dtype=int)
        b[k] = 1
        best = -1.0
        for x0 in (0.0, -BOUND, BOUND):
            init = np.zeros(14)
            init[k] = x0
            _, f = maximize_bias_fixed_set(bm14, None, b, BOUND, init)
            best = max(best, f)
        th = np.radians(np.arange(-700, 701) / 10)  # 0.1 degree grid
        grid = np.linalg.norm(bm14.p[k] @ np.vstack([np.cos(th) - 1, np.sin(th)]), axis=0).max()
        assert best >= grid - 1e-4
        assert best <= grid + 1e-3  # grid spacing bounds how far above the ascent can land


def test_grid_scan_agrees_with_ascent(bm14):
    th, f = grid_scan_1d(bm14, 5, BOUND, 0.05)
    assert abs(th) <= BOUND
    b = np.zeros(14, dtype=int)
    b[5] = 1
    init = np.zeros(14)
    init[5] = th
    _, g = maximize_bias_fixed_set(bm14, None, b, BOUND, init)
    assert g == pytest.approx(f, abs=1e-4)


def test_objective_recomputes(ieee14, bm14):
    res = find_vulnerable_optimal(ieee14.model, ieee14.v, 2, BOUND, bias_model=bm14)
    b = (res.delta_theta_star != 0).astype(int)
    attack = AttackScenario(b, res.delta_theta_star, BOUND * b)
    assert np.linalg.norm(bias_vector(ieee14.model, attack, ieee14.v)) == pytest.approx(res.objective, rel=1e-10)
    assert np.all(np.abs(res.delta_theta_star) <= BOUND + 1e-12)
    assert res.objective_for(res.attacked_buses) == pytest.approx(res.objective)
    assert len(res.log) == math.comb(6, 2)


def test_objective_grows_with_bound(ieee14, bm14):
    prev = 0.0
    for deg in (10, 30, 50, 70, 90):
        f = find_vulnerable_optimal(ieee14.model, ieee14.v, 1, math.radians(deg), bias_model=bm14).objective
        assert f >= prev - 1e-12
        prev = f


def test_greedy_never_beats_optimal(ieee14, ieee30, bm14):
    for net in (ieee14, ieee30):
        bm = bm14 if net is ieee14 else BiasModel(net.model, net.v)
        for n_p in (2, 3):
            opt = find_vulnerable_optimal(net.model, net.v, n_p, BOUND, bias_model=bm)
            gr = find_vulnerable_greedy(net.model, net.v, n_p, BOUND, bias_model=bm)
            assert gr.objective <= opt.objective + 1e-9
            assert len(set(gr.attacked_buses)) == n_p


def test_greedy_first_stage_is_single_bus_optimum(ieee14, bm14):
    one = find_vulnerable_optimal(ieee14.model, ieee14.v, 1, BOUND, bias_model=bm14)
    gr = find_vulnerable_greedy(ieee14.model, ieee14.v, 2, BOUND, bias_model=bm14)
    assert gr.attacked_buses[0] == one.attacked_buses[0]
    assert gr.objective >= one.objective - 1e-12


def test_ieee14_most_vulnerable_bus(ieee14):
    for scale in (0.5, 1.0, 1.5):
        prof = solve_power_flow(ieee14.case, scale)
        v = prof.rotated(-prof.angle[ieee14.ref]).v
        assert find_vulnerable_optimal(ieee14.model, v, 1, BOUND).attacked_buses == [6]


def test_argument_checks(ieee14, bm14):
    with pytest.raises(ValueError):
        find_vulnerable_optimal(ieee14.model, ieee14.v, 0, BOUND, bias_model=bm14)
    with pytest.raises(ValueError):
        find_vulnerable_greedy(ieee14.model, ieee14.v, 1, BOUND, bias_model=bm14)
    with pytest.raises(ValueError, match="exceed"):
        find_vulnerable_optimal(ieee14.model, ieee14.v, 3, BOUND, max_combinations=5, bias_model=bm14)
    b = np.zeros(14, dtype=int)
    b[0] = 1
    with pytest.raises(ValueError, match="no PMU"):
        maximize_bias_fixed_set(bm14, None, b, BOUND, np.zeros(14))
