import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from adcdetect.channel import draw_activity, draw_channels, exponential_covariance, synthesize_received
from adcdetect.detector import (DetectionModel, DetectionProblem, DetectorConfig, decide_activity,
                                detection_errors, grad_log_g, infinite_adc_detect, log_g,
                                log_likelihood, nsgd_detect, nsgd_detect_batch)
from adcdetect.quadrature import brute_force_quantized_likelihood
from adcdetect.quantizer import Codebook, cell_lower_edges, log_cell_density, quantize
from adcdetect.signal_model import build_stacked_covariance, generate_preambles, real_expand_preamble
from adcdetect.validation import random_model

LOG_2PI = math.log(2 * math.pi)


def _instance(rng, N=5, L=3, M=2, correlated=False):
    S = generate_preambles(L, N, rng)
    C = None
    if correlated:
        C = build_stacked_covariance([exponential_covariance(0.6 * np.exp(1j * rng.uniform(0, 6)), M)
                                      for _ in range(N)])
    return DetectionModel.build(S, 1.0, M, C)


def test_log_g_identity_covariance():
    rng = np.random.default_rng(0)
    model = DetectionModel.build(generate_preambles(3, 4, rng), 2.0, 2)
    x = rng.standard_normal(model.dim)
    cb = Codebook(2, 1.0)
    expected = -0.5 * x @ x - 2 * 3 * LOG_2PI
    assert log_g(x, np.zeros(4), model, cb) == pytest.approx(expected, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["iid", "shared", "per-device"]))
def test_log_g_structured_matches_dense(seed, kind):
    rng = np.random.default_rng(seed)
    N, L, M = int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
    S = generate_preambles(L, N, rng)
    if kind == "iid":
        covs = [np.eye(M)] * N
    elif kind == "shared":
        covs = [exponential_covariance(rng.uniform(0, 0.95), M)] * N
    else:
        covs = [exponential_covariance(rng.uniform(0, 0.95) * np.exp(1j * rng.uniform(0, 6)), M)
                for _ in range(N)]
    C = build_stacked_covariance(covs)
    fast = DetectionModel.build(S, 0.7, M, C)
    dense = DetectionModel.build(S, 0.7, M, C, structure="dense")
    gamma = rng.uniform(0, 2, N)
    x = rng.standard_normal(2 * L * M) * 2
    assert abs(log_g(x, gamma, fast) - log_g(x, gamma, dense)) < 1e-10 * max(1, abs(log_g(x, gamma, dense)))
    np.testing.assert_allclose(grad_log_g(x, gamma, fast), grad_log_g(x, gamma, dense), rtol=1e-9, atol=1e-10)


def test_exp_log_g_is_gaussian_density():
    rng = np.random.default_rng(1)
    for correlated in (False, True):
        model = _instance(rng, correlated=correlated)
        gamma = rng.uniform(0, 1, model.N)
        x = rng.standard_normal(model.dim)
        cb = Codebook(3, 0.4)
        val = log_g(x, gamma, model, cb) + log_cell_density(model.dim, cb)
        ref = multivariate_normal(np.zeros(model.dim), model.sigma(gamma)).logpdf(x)
        assert abs(math.expm1(val - ref)) < 1e-10
        assert log_likelihood(x, gamma, model) == pytest.approx(ref, rel=1e-12)


def test_gradient_closed_form_at_zero():
    rng = np.random.default_rng(2)
    L, N, M = 3, 4, 2
    S = generate_preambles(L, N, rng)
    model = DetectionModel.build(S, 2.0, M)
    x = rng.standard_normal(model.dim)
    S_hat = real_expand_preamble(S)
    X = x.reshape(M, 2 * L)
    expected = 0.25 * ((X @ S_hat[:, :N]) ** 2 + (X @ S_hat[:, N:]) ** 2).sum(axis=0) - M * L / 2
    np.testing.assert_allclose(grad_log_g(x, np.zeros(N), model), expected, rtol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.booleans())
def test_gradient_matches_finite_differences(seed, correlated):
    rng = np.random.default_rng(seed)
    model = random_model(rng, correlated=correlated)
    gamma = rng.uniform(0, 2, model.N)
    x = rng.multivariate_normal(np.zeros(model.dim), model.sigma(gamma))
    g = grad_log_g(x, gamma, model)
    for n in range(model.N):
        h = 1e-5 * max(gamma[n], 1.0)
        e = np.zeros(model.N)
        e[n] = h
        fd = (log_g(x, gamma + e, model) - log_g(x, gamma - e, model)) / (2 * h)
        assert abs(g[n] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_gradient_at_zero_signal_is_negative():
    rng = np.random.default_rng(3)
    for correlated in (False, True):
        model = _instance(rng, correlated=correlated)
        assert np.all(grad_log_g(np.zeros(model.dim), rng.uniform(0, 1, model.N), model) < 0)


def test_log_g_input_validation():
    model = _instance(np.random.default_rng(4))
    with pytest.raises(ValueError):
        log_g(np.zeros(3), np.zeros(model.N), model)
    with pytest.raises(ValueError):
        grad_log_g(np.zeros(model.dim), -np.ones(model.N), model)
    with pytest.raises(ValueError):
        DetectionModel.build(generate_preambles(2, 2, np.random.default_rng(0)), 0.0, 2)


def test_detector_config_defaults():
    assert DetectorConfig(1e-3).max_iterations == 10_000
    assert DetectorConfig(1e-4).max_iterations == 100_000
    with pytest.raises(ValueError):
        DetectorConfig(0.0)
    with pytest.raises(ValueError):
        DetectorConfig(1e-3, max_iterations=0)


def _problem(seed, B=3, N=6, L=3, M=4, K=2, correlated=False, beta=1.0):
    rng = np.random.default_rng(seed)
    S = generate_preambles(L, N, rng)
    alpha = draw_activity(N, K, rng)
    H = draw_channels(N, M, rng, c=0.5 if correlated else None)
    _, ybar = synthesize_received(S, alpha, beta, H, 1.0, rng)
    C = build_stacked_covariance([exponential_covariance(0.5, M)] * N) if correlated else None
    model = DetectionModel.build(S, 1.0, M, C)
    cb = Codebook.design(K, beta, 1.0, 2.0, B)
    return DetectionProblem(quantize(ybar, cb), cb, model, np.random.default_rng(seed + 1)), alpha, ybar


def test_first_step_is_normalized_gradient():
    prob, _, _ = _problem(5)
    res = nsgd_detect(prob.yq, prob.cb, prob.model, DetectorConfig(1e-9, max_iterations=1),
                      np.random.default_rng(9))
    x = cell_lower_edges(prob.yq, prob.cb) + prob.cb.delta * np.random.default_rng(9).random(prob.model.dim)
    g = grad_log_g(x, np.zeros(prob.model.N), prob.model)
    a = g / np.linalg.norm(g)
    np.testing.assert_allclose(res.gamma_hat, np.maximum(a, 0.0), atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.booleans())
def test_nsgd_feasible_finite_and_step_bounded(seed, B, correlated):
    prob, _, _ = _problem(seed, B=B, correlated=correlated)
    res = nsgd_detect_batch([prob], DetectorConfig(1e-3, max_iterations=60, record_path=True))[0]
    path = res.path
    assert np.all(np.isfinite(path)) and np.all(path >= 0)
    steps = np.linalg.norm(np.diff(path, axis=0), axis=1)
    theta = np.arange(1, steps.size + 1) ** -0.5
    # projection onto the orthant never lengthens the unit-direction step
    assert np.all(steps <= theta + 1e-12)
    np.testing.assert_allclose(res.eta_trace, np.abs(np.diff(path, axis=0)).sum(axis=1) / prob.model.N)
    if res.converged:
        assert res.eta_trace[-1] < 1e-3


def test_unclipped_step_has_length_theta():
    # one strongly active device: the iterate never touches the boundary after step one
    prob, _, _ = _problem(11, N=1, K=1, beta=10.0)
    res = nsgd_detect_batch([prob], DetectorConfig(1e-6, max_iterations=30, record_path=True))[0]
    steps = np.diff(res.path, axis=0)
    unclipped = [i for i in range(steps.shape[0]) if np.all(res.path[i + 1] > 0)]
    assert unclipped
    for i in unclipped:
        assert np.linalg.norm(steps[i]) == pytest.approx((i + 1) ** -0.5, rel=1e-12)


def test_batch_matches_single_runs():
    probs = [_problem(s)[0] for s in range(4)]
    cfg = DetectorConfig(1e-3, max_iterations=200)
    batch = nsgd_detect_batch(probs, cfg)
    for s, r in enumerate(batch):
        p = _problem(s)[0]
        single = nsgd_detect(p.yq, p.cb, p.model, cfg, p.rng)
        np.testing.assert_allclose(r.gamma_hat, single.gamma_hat, rtol=1e-12, atol=1e-14)
        assert r.iterations == single.iterations


def test_dense_and_structured_nsgd_agree():
    prob, _, _ = _problem(21, correlated=True)
    cfg = DetectorConfig(1e-3, max_iterations=40)
    dense_model = DetectionModel.build(prob.model.S_hat, 1.0, prob.model.M, prob.model.C, structure="dense")
    a = nsgd_detect(prob.yq, prob.cb, prob.model, cfg, np.random.default_rng(3))
    b = nsgd_detect(prob.yq, prob.cb, dense_model, cfg, np.random.default_rng(3))
    np.testing.assert_allclose(a.gamma_hat, b.gamma_hat, atol=1e-9)


def test_delta_trace_ends_at_zero():
    prob, _, _ = _problem(6)
    res = nsgd_detect(prob.yq, prob.cb, prob.model, DetectorConfig(1e-3, record_path=True), prob.rng)
    d = res.delta_trace()
    assert d[-1] == 0.0 and d.size == res.iterations + 1
    with pytest.raises(ValueError):
        nsgd_detect(prob.yq, prob.cb, prob.model, DetectorConfig(1e-3), prob.rng).delta_trace()


def _small_instance_recovery(trials=200):
    # N=4, K=1, L=4, M=8, B=4, beta / sigma2 = 10
    hits_nsgd, hits_inf, probs, truth, ybars, models = 0, 0, [], [], [], []
    for t in range(trials):
        p, alpha, ybar = _problem(1000 + t, B=4, N=4, L=4, M=8, K=1, beta=10.0)
        probs.append(p)
        truth.append(int(np.argmax(alpha)))
        ybars.append(ybar)
    res = nsgd_detect_batch(probs, DetectorConfig(1e-4, max_iterations=20_000))
    for p, r, k, y in zip(probs, res, truth, ybars):
        hits_nsgd += int(np.argmax(r.gamma_hat) == k)
        hits_inf += int(np.argmax(infinite_adc_detect(y, p.model, DetectorConfig(1e-4)).gamma_hat) == k)
    return hits_nsgd / trials, hits_inf / trials


def test_small_instance_support_recovery():
    nsgd, inf = _small_instance_recovery()
    print(f"argmax recovery: NSGD B=4 {nsgd:.3f}, B=inf {inf:.3f}")
    assert nsgd >= 0.95
    assert inf >= nsgd


def test_iterations_grow_when_epsilon_shrinks():
    probs = lambda: [_problem(2000 + s, B=4, N=100, L=13, M=32, K=10, beta=10 ** -0.61)[0] for s in range(20)]
    loose = nsgd_detect_batch(probs(), DetectorConfig(1e-3))
    tight = nsgd_detect_batch(probs(), DetectorConfig(1e-4))
    assert np.mean([r.iterations for r in tight]) > np.mean([r.iterations for r in loose])


def test_infinite_detector_monotone_and_projected():
    for seed in range(5):
        _, _, ybar = _problem(300 + seed, N=8, L=4, M=6, K=2)
        model = _problem(300 + seed, N=8, L=4, M=6, K=2)[0].model
        res = infinite_adc_detect(ybar, model, DetectorConfig(1e-5))
        assert np.all(np.diff(res.objective_trace) >= 0)
        assert np.all(res.gamma_hat >= 0)
        assert res.converged


def test_infinite_detector_stationary_at_truth():
    # near-noiseless instance: the truth is close to the unquantized ML point
    rng = np.random.default_rng(8)
    N, L, M, sigma2 = 4, 4, 2000, 1e-2
    S = generate_preambles(L, N, rng)
    alpha = np.array([1.0, 0, 1.0, 0])
    _, ybar = synthesize_received(S, alpha, 1.0, draw_channels(N, M, rng), sigma2, rng)
    model = DetectionModel.build(S, sigma2, M)
    res = infinite_adc_detect(ybar, model, DetectorConfig(1e-3), gamma0=alpha)
    assert res.iterations == 1 and res.converged and res.eta_trace[0] < 1e-3


def test_decide_activity_and_errors():
    gamma = np.array([0.0, 0.3, 0.0, 0.3])
    alpha = np.array([0, 1, 0, 1])
    np.testing.assert_array_equal(decide_activity(gamma, 0.15), alpha)
    assert decide_activity(gamma, gamma.max()).sum() == 0
    assert detection_errors(alpha, alpha) == (0.0, 0.0)
    assert detection_errors(np.ones(4), alpha) == (0.0, 1.0)
    assert detection_errors(np.zeros(4), alpha) == (1.0, 0.0)


@settings(max_examples=30)
@given(st.lists(st.floats(0, 5), min_size=4, max_size=12), st.integers(0, 2**32 - 1))
def test_threshold_sweep_monotone(gammas, seed):
    gamma = np.array(gammas)
    rng = np.random.default_rng(seed)
    alpha = (rng.random(gamma.size) < 0.5).astype(int)
    alpha[0], alpha[1] = 1, 0
    out = [detection_errors(decide_activity(gamma, t), alpha) for t in np.linspace(0, gamma.max(), 25)]
    mdp, fap = np.array(out).T
    assert np.all(np.diff(mdp) >= 0) and np.all(np.diff(fap) <= 0)


def test_quadrature_refinement_converges():
    rng = np.random.default_rng(12)
    model = DetectionModel.build(generate_preambles(1, 2, rng), 1.0, 1)
    cb = Codebook(2, 0.8)
    yq = quantize(np.array([0.3, -0.9]), cb)
    gamma = np.array([0.5, 1.0])
    v = [brute_force_quantized_likelihood(yq, cb, model, gamma, n)[0] for n in (10, 20, 40, 80)]
    ratios = [(v[i + 1] - v[i]) / (v[i + 2] - v[i + 1]) for i in range(2)]
    # midpoint rule: errors shrink fourfold per halving
    np.testing.assert_allclose(ratios, 4.0, rtol=0.05)
    assert v[3] / v[2] == pytest.approx(1.0, abs=1e-4)


def test_quadrature_gradient_matches_finite_difference():
    rng = np.random.default_rng(13)
    model = DetectionModel.build(generate_preambles(1, 3, rng), 1.0, 2)
    cb = Codebook(2, 1.0)
    yq = quantize(rng.normal(0, 1, 4), cb)
    gamma = np.array([0.4, 0.2, 0.9])
    _, g = brute_force_quantized_likelihood(yq, cb, model, gamma, 16)
    for n in range(3):
        e = np.zeros(3)
        e[n] = 1e-5
        fd = (brute_force_quantized_likelihood(yq, cb, model, gamma + e, 16)[0]
              - brute_force_quantized_likelihood(yq, cb, model, gamma - e, 16)[0]) / 2e-5
        assert g[n] == pytest.approx(fd, rel=1e-5)


def test_quadrature_dimension_cap():
    model = DetectionModel.build(generate_preambles(2, 2, np.random.default_rng(0)), 1.0, 2)
    with pytest.raises(ValueError):
        brute_force_quantized_likelihood(np.zeros(8), Codebook(2, 1.0), model, np.zeros(2))
