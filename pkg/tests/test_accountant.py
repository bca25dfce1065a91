import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capesynth.accountant import (PrivacyParams, _subsampled_from_rate, b_term, calibrate_tau, cape_split,
                                  classic_gaussian_tau, compose_rdp, conventional_local_tau, g_term,
                                  gaussian_rdp, local_sampling_report, matched_local_tau, per_sample_rdp,
                                  pooled_tau, rdp_to_dp, subsampled_rdp, total_epsilon)
from capesynth.errors import AccountingError, CalibrationError, ConfigurationError


def mnist_scale(epsilon=10.0, **overrides):
    params = dict(epsilon_target=epsilon, delta=1e-5, l=4, c=1.0, T=60000, N=60000, K=10)
    params.update(overrides)
    return PrivacyParams(**params)


# eps(i) = 0.05 i  <=>  (2c^2 + 1) / (l^2 tau^2) = 0.05 with l = c = 1
ORACLE_TAU = math.sqrt(60.0)
ORACLE_PARAMS = PrivacyParams(epsilon_target=1.0, delta=1e-5, l=1, c=1.0, T=1, N=10, K=1)


def test_b_boundary_values_are_exact():
    assert b_term(0, 4, 1.0, 2.0) == 1.0
    assert b_term(1, 4, 1.0, 2.0) == 0.0


def test_b_two_closed_form():
    # B(2) = 1 - 2 + e^{eps(2)}
    assert b_term(2, 1, 1.0, ORACLE_TAU) == pytest.approx(math.expm1(0.1), rel=1e-12)


def test_g_oracle():
    assert g_term(3, 0.1, 1, 1.0, ORACLE_TAU) == pytest.approx(1.0517092e-4, rel=1e-7)


def test_subsampled_rdp_oracle():
    assert ORACLE_PARAMS.sampling_rate == pytest.approx(0.1)
    assert abs(subsampled_rdp(3, ORACLE_PARAMS, ORACLE_TAU) - 0.0064785) <= 1e-6


def test_subsampled_rdp_vanishes_without_sampling_or_noise_cost():
    assert _subsampled_from_rate(5, 0.0, 0.3) == 0.0
    assert subsampled_rdp(5, ORACLE_PARAMS, math.inf) == 0.0
    assert g_term(7, 0.0, 1, 1.0, 1.0) == 0.0


def test_per_sample_rdp_is_feature_plus_label_gaussian():
    for alpha, l, c, tau in [(3, 1, 1.0, 1.0), (17, 4, 0.5, 2.5), (200, 64, 3.0, 0.07)]:
        combined = gaussian_rdp(alpha, tau, 2 * c / l) + gaussian_rdp(alpha, tau, math.sqrt(2) / l)
        assert abs(per_sample_rdp(alpha, l, c, tau) - combined) <= 1e-12 * max(1.0, combined)


def test_per_sample_rdp_edges():
    assert per_sample_rdp(0, 4, 1.0, 1.0) == 0.0
    assert per_sample_rdp(3, 4, 1.0, 0.0) == math.inf


def test_huge_noise_leaves_only_conversion_term():
    params = PrivacyParams(epsilon_target=1.0, delta=0.01, l=1, c=1.0, T=10, N=100, K=1, alpha_max=101)
    report = total_epsilon(params, math.inf)
    assert report.epsilon_achieved == pytest.approx(math.log(100) / 100, rel=1e-12)
    assert report.alpha_star == 101


def test_epsilon_decreases_with_noise():
    params = mnist_scale()
    taus = np.logspace(0.0, 2.0, 30)
    epsilons = [total_epsilon(params, tau).epsilon_achieved for tau in taus]
    assert all(later <= earlier for earlier, later in zip(epsilons, epsilons[1:]))
    assert epsilons[-1] < epsilons[0]


def test_all_orders_overflowing_is_an_error():
    params = PrivacyParams(epsilon_target=1.0, delta=1e-5, l=1, c=1.0, T=10, N=100, K=1, alpha_max=20)
    with pytest.raises(AccountingError, match="noise too small"):
        total_epsilon(params, 1e-3)


def test_skipped_orders_are_reported():
    params = mnist_scale(alpha_max=200)
    report = total_epsilon(params, 1.0)
    assert report.skipped_alphas
    assert report.alpha_star not in report.skipped_alphas
    assert set(report.rdp_curve).isdisjoint(report.skipped_alphas)


@pytest.mark.parametrize("target", [1.0, 10.0, 20.0])
def test_calibration_round_trip(target):
    scales, report = calibrate_tau(mnist_scale(target))
    achieved = total_epsilon(mnist_scale(target), report.tau_central).epsilon_achieved
    assert achieved <= target
    assert achieved == pytest.approx(target, rel=0.01)
    assert scales.tau_e == 0.0


def test_calibration_infinite_target_is_noiseless():
    scales, report = calibrate_tau(mnist_scale(math.inf))
    assert (scales.tau_g, scales.tau_e) == (0.0, 0.0)
    assert report.epsilon_achieved == math.inf
    assert report.alpha_star is None


def test_calibration_returns_cape_split_for_clients():
    scales, report = calibrate_tau(mnist_scale(10.0, S=10))
    assert scales.tau_g == pytest.approx(math.sqrt(10) * report.tau_central)
    assert scales.tau_e ** 2 + scales.tau_g ** 2 == pytest.approx(10 * scales.tau_g ** 2)


def test_unreachable_target_reports_bracket():
    # log(1/delta) / (alpha_max - 1) alone exceeds the target
    params = PrivacyParams(epsilon_target=1.0, delta=1e-5, l=4, c=1.0, T=100, N=1000, K=10, alpha_max=3)
    with pytest.raises(CalibrationError) as excinfo:
        calibrate_tau(params)
    assert excinfo.value.bracket is not None
    assert "unreachable" in str(excinfo.value)


def test_local_sampling_diagnostic_uses_shard_size():
    params = mnist_scale(S=10)
    local = local_sampling_report(params, 5.0)
    assert local.sampling_rate == pytest.approx(10 * params.sampling_rate)
    assert local.epsilon_achieved > total_epsilon(params, 5.0).epsilon_achieved


def test_pooled_tau_example():
    assert pooled_tau(100, 0.01) == pytest.approx(0.0310751, abs=1e-7)


def test_classic_gaussian_validates_epsilon():
    with pytest.raises(ConfigurationError):
        classic_gaussian_tau(1.0, 2.0, 1e-5)
    with pytest.raises(ConfigurationError):
        classic_gaussian_tau(1.0, 0.5, 0.0)


def test_conventional_and_matched_scales():
    assert conventional_local_tau(2.0, 4) == 4.0
    assert matched_local_tau(2.0, 9) == 6.0
    assert conventional_local_tau(3.0, 1) == 3.0


@given(st.floats(1e-6, 1e3), st.integers(1, 200))
@settings(max_examples=80, deadline=None)
def test_cape_split_variance_identity(tau, S):
    scales = cape_split(tau, S)
    assert scales.tau_g == tau
    assert scales.tau_e ** 2 + scales.tau_g ** 2 == pytest.approx(S * tau ** 2, rel=1e-12)


def test_cape_split_single_client_has_no_correlated_noise():
    assert cape_split(1.7, 1).tau_e == 0.0


def test_rdp_helpers():
    assert compose_rdp(0.1, 0.2, 0.3) == pytest.approx(0.6)
    assert rdp_to_dp(0.5, 11, 0.01) == pytest.approx(0.5 + math.log(100) / 10)
    with pytest.raises(ConfigurationError):
        rdp_to_dp(0.5, 1, 0.01)


def test_privacy_params_validation():
    with pytest.raises(ConfigurationError, match="divide T"):
        PrivacyParams(epsilon_target=1.0, delta=1e-5, l=1, c=1.0, T=11, N=100, K=10)
    with pytest.raises(ConfigurationError, match="divide N"):
        PrivacyParams(epsilon_target=1.0, delta=1e-5, l=1, c=1.0, T=10, N=100, K=10, S=3)
    with pytest.raises(ConfigurationError, match="exceeds 1"):
        PrivacyParams(epsilon_target=1.0, delta=1e-5, l=20, c=1.0, T=10, N=100, K=10)
    with pytest.raises(ConfigurationError):
        PrivacyParams(epsilon_target=0.0, delta=1e-5, l=1, c=1.0, T=10, N=100, K=10)


def test_report_text_and_curve(tmp_path):
    report = total_epsilon(mnist_scale(alpha_max=40), 20.0)
    text = report.to_text()
    assert f"epsilon={report.epsilon_achieved!r}" in text
    assert f"alpha_star={report.alpha_star}" in text
    frame = report.curve_frame()
    assert list(frame.columns) == ["alpha", "rdp"]
    assert frame["alpha"].tolist() == list(range(3, 41))
    report.write_curve_csv(tmp_path / "curve.csv")
    assert (tmp_path / "curve.csv").read_text().startswith("alpha,rdp")


def test_odd_b_is_negative_at_moderate_noise():
    # eps(i) = 3 i / (16 * 25) for l=4, c=1, tau=5
    rate = 3.0 / 400.0
    expected = 3.0 * math.expm1(2 * rate) - math.expm1(6 * rate)
    assert expected < 0
    assert b_term(3, 4, 1.0, 5.0) == pytest.approx(expected, rel=1e-9)


def test_no_orders_skipped_at_moderate_noise():
    report = total_epsilon(mnist_scale(), 5.0)
    assert report.skipped_alphas == ()
    assert set(report.rdp_curve) == set(range(3, 201))
    assert report.alpha_star > 4


def test_tight_target_calibrates_to_moderate_noise():
    _, report = calibrate_tau(mnist_scale(1.0))
    assert report.epsilon_achieved == pytest.approx(1.0, rel=0.01)
    assert report.tau_central < 2.0


@pytest.mark.parametrize("tau", [3.0, 5.0, 10.0])
def test_epsilon_grows_with_releases_and_sampling_rate(tau):
    base = total_epsilon(mnist_scale(), tau).epsilon_achieved
    assert total_epsilon(mnist_scale(T=120000), tau).epsilon_achieved > base
    # halving N doubles p = lK/N
    assert total_epsilon(mnist_scale(N=30000, T=30000), tau).epsilon_achieved > \
        total_epsilon(mnist_scale(T=30000), tau).epsilon_achieved


def test_matched_scale_equals_conventional_scaling():
    for tau, S in [(0.3, 1), (1.7, 4), (2.0, 25)]:
        assert matched_local_tau(tau, S) == conventional_local_tau(tau, S)
    with pytest.raises(ConfigurationError):
        matched_local_tau(1.0, 0)
