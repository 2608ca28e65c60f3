import numpy as np
import pytest
from hypothesis import given, strategies as st

from pthmm.blrt import BlrtConfig, blrt, bootstrap_p_value
from pthmm.estimation import FitOptions
from pthmm.exceptions import DomainError
from pthmm.simulation import ScenarioConfig, scenario_dataset, scenario_spec


def test_p_value_extremes():
    boot = [1.0, 2.0, 3.0]
    assert bootstrap_p_value(0.5, boot) == 1.0
    assert bootstrap_p_value(3.5, boot) == 0.0


def test_ties_are_not_greater():
    assert bootstrap_p_value(2.0, [1.0, 2.0, 3.0]) == pytest.approx(1 / 3)


def test_empty_bootstrap():
    assert np.isnan(bootstrap_p_value(1.0, []))


@given(boot=st.lists(st.floats(-50, 50), min_size=1, max_size=60), a=st.floats(-60, 60), b=st.floats(-60, 60))
def test_p_value_grid_and_monotone(boot, a, b):
    B = len(boot)
    lo, hi = sorted((a, b))
    p_lo, p_hi = bootstrap_p_value(lo, boot), bootstrap_p_value(hi, boot)
    assert p_hi <= p_lo
    for p in (p_lo, p_hi):
        assert 0.0 <= p <= 1.0
        assert abs(p * B - round(p * B)) < 1e-9


def test_config_validation():
    with pytest.raises(DomainError):
        BlrtConfig(B=0)
    with pytest.raises(DomainError):
        BlrtConfig(alpha=1.0)
    assert BlrtConfig().null_set(2) == (0, 1)
    assert BlrtConfig(null_slots=(1,)).null_set(2) == (1,)
    with pytest.raises(DomainError):
        BlrtConfig(null_slots=(2,)).null_set(2)


@pytest.fixture(scope="module")
def small_run():
    sc = ScenarioConfig("2b", 1000, 1, seed=3)
    data, _, _ = scenario_dataset(sc, 0)
    spec = scenario_spec(sc)
    cfg = BlrtConfig(B=3, null_slots=(1,), seed=2)
    return data, spec, cfg, blrt(data, spec, cfg, FitOptions(n_starts=1))


def test_blrt_partial_null(small_run):
    data, spec, cfg, res = small_run
    assert res.null_slots == (1,)
    assert len(res.bootstrap_lrs) + res.n_failed == cfg.B
    assert res.p_value == bootstrap_p_value(res.observed_lr, res.bootstrap_lrs)
    assert res.reject == (res.p_value < cfg.alpha)
    assert res.observed_lr == pytest.approx(2 * (res.loglik_h1 - res.loglik_h0))


def test_blrt_deterministic(small_run):
    data, spec, cfg, res = small_run
    again = blrt(data, spec, cfg, FitOptions(n_starts=1))
    assert again.bootstrap_lrs == res.bootstrap_lrs
    assert again.observed_lr == res.observed_lr
