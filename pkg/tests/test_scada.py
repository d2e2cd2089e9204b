import json
import math

import numpy as np
import pytest

from pmuspoof.errors import ConfigError, UnobservableError
from pmuspoof.estimation import reduce_state
from pmuspoof.netcase import branch_flows
from pmuspoof.scada import (
    KINDS,
    ScadaMeasurement,
    ScadaMeasurementSet,
    estimate_scada,
    h_and_jacobian,
    select_channels,
    simulate_scada,
)

OBSERVABLE_SEED_14 = 4


@pytest.fixture(scope="module")
def template14(ieee14):
    return select_channels(ieee14.case, ieee14.adm, 0.5, seed=OBSERVABLE_SEED_14)


@pytest.fixture(scope="module")
def full14(ieee14):
    return select_channels(ieee14.case, ieee14.adm, 1.0, seed=0)


def test_jacobian_matches_finite_differences(ieee14, full14):
    rng = np.random.default_rng(0)
    x = reduce_state(ieee14.v, ieee14.ref) + 0.01 * rng.standard_normal(27)
    h, j = h_and_jacobian(ieee14.case, ieee14.adm, x, full14)
    step = 1e-6
    fd = np.empty_like(j)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        fd[:, k] = (h_and_jacobian(ieee14.case, ieee14.adm, x + e, full14)[0] - h_and_jacobian(ieee14.case, ieee14.adm, x - e, full14)[0]) / (2 * step)
    assert np.abs(fd - j).max() <= 1e-7 * max(1.0, np.abs(j).max())


def test_measurement_function_matches_power_flow(ieee14, full14):
    h, _ = h_and_jacobian(ieee14.case, ieee14.adm, reduce_state(ieee14.v, ieee14.ref), full14)
    sf, st_ = branch_flows(ieee14.adm, ieee14.profile.complex)
    expect = {
        "v_mag": lambda loc: ieee14.profile.magnitude[loc - 1],
        "p_flow_from": lambda l: sf[l].real,
        "q_flow_from": lambda l: sf[l].imag,
        "p_flow_to": lambda l: st_[l].real,
        "q_flow_to": lambda l: st_[l].imag,
    }
    for val, e in zip(h, full14.entries):
        assert val == pytest.approx(expect[e.kind](e.location), abs=1e-12)


def test_full_selection_takes_every_channel(ieee14, full14):
    counts = {k: sum(e.kind == k for e in full14.entries) for k in KINDS}
    assert counts == {"v_mag": 14, "p_flow_from": 20, "q_flow_from": 20, "p_flow_to": 20, "q_flow_to": 20}


def test_selection_is_seeded(ieee14, template14):
    again = select_channels(ieee14.case, ieee14.adm, 0.5, seed=OBSERVABLE_SEED_14)
    assert again.entries == template14.entries
    assert sum(e.kind == "v_mag" for e in template14.entries) == 7
    assert all(math.isnan(x) for x in template14.values)


def test_unobservable_selection_rejected(ieee14):
    with pytest.raises(UnobservableError, match="reseed"):
        select_channels(ieee14.case, ieee14.adm, 0.2, seed=0)
    with pytest.raises(UnobservableError):
        select_channels(ieee14.case, ieee14.adm, 0.5, seed=0)
    with pytest.raises(ConfigError):
        select_channels(ieee14.case, ieee14.adm, 0.0)


def test_noiseless_recovery(ieee14, template14):
    meas = simulate_scada(ieee14.case, ieee14.adm, ieee14.v, template14, noise_scale=0)
    prior = estimate_scada(ieee14.case, ieee14.adm, meas)
    assert prior.converged
    np.testing.assert_allclose(prior.v_full, ieee14.v, atol=1e-7)
    assert prior.final_mismatch < 1e-12


def test_chi_square_and_covariance(ieee14, template14):
    rng = np.random.default_rng(21)
    m, n = len(template14), 27
    runs = 150
    chi, errs = [], []
    for _ in range(runs):
        meas = simulate_scada(ieee14.case, ieee14.adm, ieee14.v, template14, seed=rng)
        prior = estimate_scada(ieee14.case, ieee14.adm, meas)
        chi.append(prior.final_mismatch)
        errs.append(prior.v_s_hat - reduce_state(ieee14.v, ieee14.ref))
    assert np.mean(chi) == pytest.approx(m - n, abs=4 * math.sqrt(2 * (m - n) / runs))
    # Sigma_s predicts the spread of the estimates (linearised, so a loose band)
    pred = np.diag(prior.sigma_s)
    emp = np.var(np.array(errs), axis=0, ddof=1)
    assert np.all(np.abs(emp / pred - 1) < 0.4)


def test_prior_covariance_is_inverse_precision(ieee14, template14):
    meas = simulate_scada(ieee14.case, ieee14.adm, ieee14.v, template14, seed=3)
    prior = estimate_scada(ieee14.case, ieee14.adm, meas)
    _, j = h_and_jacobian(ieee14.case, ieee14.adm, prior.v_s_hat, meas)
    w = np.diag(1 / meas.sigmas**2)
    np.testing.assert_allclose(prior.precision, j.T @ w @ j, rtol=1e-10, atol=1e-8)
    np.testing.assert_allclose(prior.sigma_s @ prior.precision, np.eye(27), atol=1e-8)


def test_simulation_requires_reference_phase(ieee14, template14):
    with pytest.raises(ValueError, match="reference"):
        simulate_scada(ieee14.case, ieee14.adm, ieee14.raw_profile.rotated(0.3).v, template14)


def test_too_few_measurements(ieee14):
    few = ScadaMeasurementSet([ScadaMeasurement("v_mag", 1, 1.0, 0.01)])
    with pytest.raises(UnobservableError):
        estimate_scada(ieee14.case, ieee14.adm, few)


def test_validation_and_json(ieee14, template14):
    meas = simulate_scada(ieee14.case, ieee14.adm, ieee14.v, template14, seed=1)
    back = ScadaMeasurementSet.from_json(meas.to_json())
    assert back.entries == meas.entries
    bad = ScadaMeasurementSet([ScadaMeasurement("angle", 1, 0.0, 0.01)])
    with pytest.raises(ConfigError, match="kind"):
        bad.validate(ieee14.case, ieee14.adm)
    with pytest.raises(ConfigError, match="branch"):
        ScadaMeasurementSet([ScadaMeasurement("p_flow_to", 99, 0.0, 0.01)]).validate(ieee14.case, ieee14.adm)
    with pytest.raises(ConfigError):
        ScadaMeasurementSet.from_json(json.dumps({"entries": [{"kind": "v_mag"}]}))
