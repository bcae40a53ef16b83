import json
import math

import numpy as np
import pytest

from xbmarket.core import (
    FlowParams, ModelParams, MomentSet, ReinitSpec, aggregate_shared_moments, derive_event_moments,
    load_config, market_prob_for_drift, params_from_dict, validate_params,
)
from xbmarket.errors import ConfigInvalid, ParamsInvalid, UnsupportedDependence


def test_switching_setup_is_valid():
    p = validate_params(ModelParams(n=10_000, kappa_minus=0.5, kappa_plus=0.5, tick_delta=0.1))
    assert p.dv == 0.01 and p.kappa_units == (50, 50)


@pytest.mark.parametrize("bad, kind", [
    (dict(event_probs=(0.3, 0.2, 0.2, 0.2)), "ProbabilitiesInvalid"),
    (dict(kappa_plus=0.505), "CapacityNotMultipleOfDv"),
    (dict(tick_delta=0.0), "NonPositiveTick"),
    (dict(horizon_T=1.00005), "HorizonNotMultipleOfDt"),
    (dict(market_prob=(0.5, 1.2, 0.5, 0.5)), "ProbabilitiesInvalid"),
])
def test_single_violation(bad, kind):
    with pytest.raises(ParamsInvalid) as ei:
        validate_params(ModelParams(n=10_000, **bad))
    assert kind in ei.value.kinds()


def test_every_violation_is_listed():
    with pytest.raises(ParamsInvalid) as ei:
        validate_params(ModelParams(n=10_000, tick_delta=-1, kappa_plus=0.505, event_probs=(0.1,) * 4))
    assert ei.value.kinds() == {"NonPositiveTick", "CapacityNotMultipleOfDv", "ProbabilitiesInvalid"}


def test_drift_from_market_prob():
    n = 10_000
    p = validate_params(ModelParams(n=n, market_prob=(0.5 + 5 * n**-0.5,) * 4))
    m = derive_event_moments(p)
    assert np.allclose(m.mu, -2.5)
    assert np.allclose(np.diag(m.cov), 0.249375)
    assert market_prob_for_drift(-2.5, 0.25, n) == pytest.approx(0.55)


def test_symmetric_flow_has_no_drift():
    m = derive_event_moments(validate_params(ModelParams(n=400)))
    assert np.all(m.mu == 0)


def test_cross_moments_product_form():
    p = validate_params(ModelParams(n=400, market_prob=(0.6, 0.4, 0.55, 0.5)))
    m = derive_event_moments(p)
    dv = p.dv
    for i in range(4):
        for j in range(4):
            if i != j:
                assert m.cov[i, j] == pytest.approx(-dv**2 * m.mu[i] * m.mu[j])
    assert np.linalg.eigvalsh(m.cov).min() > -1e-12


def test_moments_match_sampled_orders():
    # scaled moments of 10^7 simulated single-order increments
    p = validate_params(ModelParams(n=400, market_prob=(0.6, 0.5, 0.45, 0.5)))
    m = derive_event_moments(p)
    rng = np.random.default_rng(11)
    N = 10_000_000
    kind = rng.integers(0, 4, N)
    u = rng.random(N)
    size = np.where(u < np.asarray(p.market_prob)[kind], -1.0, 1.0)
    V = np.zeros((N, 4))
    V[np.arange(N), kind] = size
    # E[V] = dv^2 mu with V in dv units -> E[V_units] = dv * mu
    mean = V.mean(0)
    se = V.std(0) / math.sqrt(N)
    assert np.all(np.abs(mean - p.dv * np.asarray(m.mu)) < 4 * se)
    cov = np.cov(V, rowvar=False)
    assert np.allclose(cov, m.cov, atol=4 * np.sqrt(2 / N))


def test_dependent_flow_refuses_analytic_moments():
    with pytest.raises(UnsupportedDependence):
        derive_event_moments(validate_params(ModelParams(n=100, dependence_order=2)))


def test_aggregate_balanced():
    mu = np.full(4, -2.5)
    m = MomentSet(mu, np.full(4, 0.25), np.diag(np.full(4, 0.25)))
    mu_h, s_h = aggregate_shared_moments(m)
    assert np.allclose(mu_h, [-5, -5])
    assert np.allclose(s_h, 0.5 * np.eye(2))


def test_aggregate_zero_and_psd():
    mu_h, s_h = aggregate_shared_moments(MomentSet(np.zeros(4), np.zeros(4), np.zeros((4, 4))))
    assert not mu_h.any() and not s_h.any()
    rng = np.random.default_rng(3)
    for _ in range(50):
        A = rng.normal(size=(4, 4))
        mu_h, s_h = aggregate_shared_moments(MomentSet(rng.normal(size=4), np.diag(A @ A.T), A @ A.T))
        assert np.allclose(s_h, s_h.T)
        assert np.linalg.eigvalsh(s_h).min() > -1e-12


def test_reinit_point_and_uniform():
    rng = np.random.default_rng(0)
    d = ReinitSpec().draw(rng, 1000)
    assert d.min() == 10 and d.max() == 20
    assert (ReinitSpec(point=(1, 2, 3, 4)).draw(rng, 3) == [1, 2, 3, 4]).all()


def test_config_roundtrip(tmp_path):
    cfg = {"n": 10000, "kappa_minus": 0.5, "kappa_plus": 0.5,
           "regime_overrides": {"event_probs": [0.1, 0.1, 0.3, 0.5]}}
    f = tmp_path / "c.json"
    f.write_text(json.dumps(cfg))
    p = params_from_dict(load_config(f))
    assert p.flow(True).event_probs == (0.1, 0.1, 0.3, 0.5)
    assert p.flow(False) == FlowParams()


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigInvalid):
        params_from_dict({"n": 100, "kappa": 1})
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "b.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_config(bad)
