import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from adcdetect.channel import (LinkBudget, draw_activity, draw_channels, exponential_covariance,
                               hermitian_sqrt, link_budget_to_params, phase1_aggregate_channel,
                               snr_db, synthesize_phase1_received, synthesize_received)
from adcdetect.signal_model import generate_preambles, theoretical_power


def test_link_budget_reference_values():
    lb = LinkBudget()
    beta_mw, sigma2_mw = link_budget_to_params(lb, normalize=False)
    assert 10 * np.log10(sigma2_mw) == pytest.approx(-99.0, abs=1e-9)
    assert 10 * np.log10(beta_mw) == pytest.approx(-105.1, abs=1e-9)
    assert snr_db(lb) == pytest.approx(-6.1, abs=1e-9)


def test_link_budget_normalized():
    beta, sigma2 = link_budget_to_params(LinkBudget())
    assert sigma2 == 1.0
    assert beta == pytest.approx(10 ** (-0.61), rel=1e-12)
    assert beta == pytest.approx(0.2455, abs=1e-4)


def test_link_budget_rejects_zero_distance():
    with pytest.raises(ValueError):
        link_budget_to_params(LinkBudget(distance_km=0.0))


def test_activity_extremes():
    rng = np.random.default_rng(0)
    assert draw_activity(10, 0, rng).sum() == 0
    np.testing.assert_array_equal(draw_activity(10, 10, rng), np.ones(10))
    with pytest.raises(ValueError):
        draw_activity(5, 6, rng)


def test_activity_uniform():
    rng = np.random.default_rng(1)
    freq = np.mean([draw_activity(1000, 100, rng) for _ in range(400)], axis=0)
    assert np.all(np.abs(freq - 0.1) < 0.07)
    assert abs(freq.mean() - 0.1) < 1e-12
    assert np.abs(freq - 0.1).mean() < 0.015


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 50), st.integers(0, 2**32 - 1))
def test_activity_has_exactly_k_ones(N, K, seed):
    K = min(K, N)
    a = draw_activity(N, K, np.random.default_rng(seed))
    assert a.sum() == K and set(np.unique(a)) <= {0.0, 1.0}


def test_exponential_covariance_model():
    C = exponential_covariance(0.5 + 0.2j, 4)
    c = 0.5 + 0.2j
    for i in range(4):
        for j in range(4):
            expected = c ** (i - j) if i >= j else np.conj(c ** (j - i))
            assert C[i, j] == pytest.approx(expected)
    np.testing.assert_allclose(np.diag(C), 1.0)
    with pytest.raises(ValueError):
        exponential_covariance(1.1, 3)


def test_hermitian_sqrt_tolerates_boundary():
    C = exponential_covariance(1.0, 3)  # rank one
    R = hermitian_sqrt(C)
    np.testing.assert_allclose(R @ R.conj().T, C, atol=1e-12)


def test_iid_channel_variance():
    H = draw_channels(100_000, 1, np.random.default_rng(2))
    assert abs(np.mean(np.abs(H) ** 2) - 1) < 0.03


def test_c_zero_equals_iid():
    a = draw_channels(5, 3, np.random.default_rng(3), c=0.0)
    b = draw_channels(5, 3, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)


def test_correlated_channel_statistics():
    H = draw_channels(100_000, 2, np.random.default_rng(4), c=0.5)
    assert abs(np.mean(H[:, 1] * H[:, 0].conj()) - 0.5) < 0.02
    emp = H.T @ H.conj() / H.shape[0]
    np.testing.assert_allclose(emp, exponential_covariance(0.5, 2), atol=0.02)


def test_complex_c_channel_statistics():
    c = 0.6 * np.exp(0.7j)
    H = draw_channels(100_000, 3, np.random.default_rng(5), c=c)
    emp = H.T @ H.conj() / H.shape[0]
    np.testing.assert_allclose(emp, exponential_covariance(c, 3), atol=0.02)


def test_zero_activity_low_noise_gives_small_y():
    rng = np.random.default_rng(6)
    S = generate_preambles(4, 5, rng)
    Y, ybar = synthesize_received(S, np.zeros(5), 1.0, draw_channels(5, 3, rng), 1e-12, rng)
    assert np.linalg.norm(Y) < 1e-4
    assert ybar.shape == (24,)


def test_full_activity_power():
    rng = np.random.default_rng(7)
    N, L, M, beta = 6, 2, 2, 0.8
    acc, n = 0.0, 20_000
    for _ in range(n):
        S = generate_preambles(L, N, rng)
        _, ybar = synthesize_received(S, np.ones(N), beta, draw_channels(N, M, rng), 1.0, rng)
        acc += ybar ** 2
    np.testing.assert_allclose(acc / n, theoretical_power(N, beta, 1.0), rtol=0.03)


def test_synthesis_deterministic():
    def run():
        rng = np.random.default_rng(8)
        S = generate_preambles(3, 4, rng)
        return synthesize_received(S, np.array([1, 0, 1, 0]), 0.3, draw_channels(4, 2, rng), 1.0, rng)[1]
    np.testing.assert_array_equal(run(), run())


def test_phase1_noise_only_and_power():
    rng = np.random.default_rng(9)
    y0 = np.array([synthesize_phase1_received(1 + 0j, 0, 1.0, 64, 1.0, rng) for _ in range(2000)])
    assert abs(np.mean(y0 ** 2) - 0.5) < 0.02
    s = (1 + 1j) * np.sqrt(0.5)
    y = np.array([synthesize_phase1_received(s, 100, 1.0, 128, 1.0, rng) for _ in range(2000)])
    assert abs(np.mean(y ** 2) / 50.5 - 1) < 0.03
    a = synthesize_phase1_received(s, 3, 1.0, 4, 1.0, np.random.default_rng(1))
    b = synthesize_phase1_received(s, 3, 1.0, 4, 1.0, np.random.default_rng(1))
    np.testing.assert_array_equal(a, b)


def test_phase1_distributional_identity():
    # full synthesis with identical preambles vs the sqrt(K) h_1 shortcut
    rng = np.random.default_rng(10)
    N, K, M, beta = 40, 6, 1, 1.0
    s = (1 - 1j) * np.sqrt(0.5)
    full, short = [], []
    for _ in range(10_000):
        alpha = draw_activity(N, K, rng)
        H = draw_channels(N, M, rng)
        g = phase1_aggregate_channel(alpha, H)
        full.append(synthesize_phase1_received(s, K, beta, M, 1.0, rng, h=g)[0])
        short.append(synthesize_phase1_received(s, K, beta, M, 1.0, rng)[0])
    stat = ks_2samp(full, short).statistic
    # 1% critical value for two samples of 10^4
    assert stat < 1.628 * np.sqrt(2 / 10_000)
