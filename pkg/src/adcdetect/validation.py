"""Numerical validation suites behind the ``power-check``, ``gradcheck`` and
``oracle-check`` subcommands. Each returns plain dicts of measured numbers so
the acceptance tests and the CLI share one implementation."""
from __future__ import annotations

import numpy as np
from scipy.stats import norm

from .channel import exponential_covariance
from .detector import DetectionModel, grad_log_g, log_g, structured_terms
from .k_estimator import Phase1Model, grad_log_g_K, log_g_K
from .quadrature import brute_force_quantized_likelihood
from .quantizer import Codebook, cell_lower_edges, log_cell_density, quantize
from .signal_model import (build_stacked_covariance, generate_preambles, received_covariance,
                           theoretical_power)


def power_check(N=100, K=10, beta=1.0, sigma2=1.0, L=4, M=4, c=None, draws=100_000,
                seed=0, batch=5_000) -> dict:
    """Empirical per-dimension power of ybar against K beta / 2 + sigma2 / 2.

    Preambles and activity are redrawn with the channels and noise, so the
    average runs over everything the closed form averages over.
    """
    rng = np.random.default_rng(seed)
    acc = np.zeros(2 * L * M)
    done = 0
    root = None if c is None else np.linalg.cholesky(exponential_covariance(c, M) + 0j)
    while done < draws:
        n = min(batch, draws - done)
        S = (rng.choice([-1.0, 1.0], (n, L, N)) + 1j * rng.choice([-1.0, 1.0], (n, L, N))) * np.sqrt(0.5)
        gamma = np.zeros((n, N))
        idx = np.argsort(rng.random((n, N)), axis=1)[:, :K]
        np.put_along_axis(gamma, idx, beta, axis=1)
        H = (rng.standard_normal((n, N, M)) + 1j * rng.standard_normal((n, N, M))) * np.sqrt(0.5)
        if root is not None:
            H = H @ root.T
        Z = (rng.standard_normal((n, L, M)) + 1j * rng.standard_normal((n, L, M))) * np.sqrt(sigma2 / 2)
        Y = S @ (np.sqrt(gamma)[:, :, None] * H) + Z
        yb = np.concatenate([Y.real.transpose(0, 2, 1), Y.imag.transpose(0, 2, 1)], axis=2).reshape(n, -1)
        acc += (yb ** 2).sum(axis=0)
        done += n
    power = acc / draws
    target = theoretical_power(K, beta, sigma2)
    return {"target": target, "power": power, "max_rel_error": float(np.abs(power / target - 1).max())}


def covariance_check(N=8, M=4, L=4, c=0.5, draws=100_000, seed=0, beta=1.0, sigma2=1.0) -> dict:
    """Empirical covariance of ybar for fixed S and gamma vs received_covariance."""
    rng = np.random.default_rng(seed)
    S = generate_preambles(L, N, rng)
    gamma = beta * (rng.random(N) < 0.5)
    gamma[0] = beta
    Cm = exponential_covariance(c, M)
    C = build_stacked_covariance(np.broadcast_to(Cm, (N, M, M)))
    Sigma = received_covariance(S, C, gamma, sigma2).dense()
    dense_oracle = dense_sigma_oracle(S, [Cm] * N, gamma, sigma2)
    emp = np.zeros_like(Sigma)
    done = 0
    while done < draws:
        n = min(10_000, draws - done)
        yb = _batch_ybar(S, gamma, Cm, sigma2, rng, n)
        emp += yb.T @ yb
        done += n
    emp /= draws
    return {
        "rel_frobenius": float(np.linalg.norm(emp - Sigma) / np.linalg.norm(Sigma)),
        "blockwise_vs_dense": float(np.abs(Sigma - dense_oracle).max()),
    }


def _batch_ybar(S, gamma, Cm, sigma2, rng, n):
    L, N = S.shape
    M = Cm.shape[0]
    root = np.linalg.cholesky(Cm)
    H = (rng.standard_normal((n, N, M)) + 1j * rng.standard_normal((n, N, M))) * np.sqrt(0.5)
    H = H @ root.T
    Z = (rng.standard_normal((n, L, M)) + 1j * rng.standard_normal((n, L, M))) * np.sqrt(sigma2 / 2)
    Y = S @ (np.sqrt(gamma)[:, None] * H) + Z
    return np.concatenate([Y.real.transpose(0, 2, 1), Y.imag.transpose(0, 2, 1)], axis=2).reshape(n, -1)


def dense_sigma_oracle(S, per_device_cov, gamma, sigma2) -> np.ndarray:
    """Sigma by brute force: the covariance of vec of the real-expanded
    signal, assembled term by term from E[h_n h_n^H] = C_n in complex form."""
    S = np.asarray(S, dtype=complex)
    L, N = S.shape
    M = per_device_cov[0].shape[0]
    # Y = sum_n sqrt(g_n) s_n h_n^T + Z; cov of vec(Y) (column-major over antennas)
    R = np.zeros((L * M, L * M), dtype=complex)
    for n in range(N):
        R += gamma[n] * np.kron(per_device_cov[n], np.outer(S[:, n], S[:, n].conj()))
    R += sigma2 * np.eye(L * M)
    # proper complex vector v: cov[[Re v],[Im v]] = 1/2 [[Re R, -Im R], [Im R, Re R]]
    big = 0.5 * np.block([[R.real, -R.imag], [R.imag, R.real]])
    # reorder to [Re y_1; Im y_1; Re y_2; ...]
    order = np.concatenate([np.r_[m * L:(m + 1) * L, L * M + m * L:L * M + (m + 1) * L] for m in range(M)])
    return big[np.ix_(order, order)]


def random_model(rng, N=None, L=None, M=None, correlated=True):
    N = N or int(rng.integers(2, 7))
    L = L or int(rng.integers(1, 4))
    M = M or int(rng.integers(1, 4))
    S = generate_preambles(L, N, rng)
    C = None
    if correlated:
        covs = []
        for _ in range(N):
            c = rng.uniform(0.1, 0.9) * np.exp(1j * rng.uniform(0, 2 * np.pi))
            covs.append(exponential_covariance(c, M))
        C = build_stacked_covariance(np.array(covs))
    return DetectionModel.build(S, float(rng.uniform(0.5, 2.0)), M, C)


def gradcheck(instances=100, seed=0) -> dict:
    """Relative error of the analytic gradients against central differences."""
    rng = np.random.default_rng(seed)
    worst_vec, worst_scalar = 0.0, 0.0
    for k in range(instances):
        model = random_model(rng, correlated=(k % 2 == 1))
        gamma = rng.uniform(0.0, 2.0, model.N)
        x = rng.multivariate_normal(np.zeros(model.dim), model.sigma(gamma))
        g = grad_log_g(x, gamma, model)
        fd = np.empty(model.N)
        for n in range(model.N):
            h = 1e-5 * max(gamma[n], 1.0)
            e = np.zeros(model.N)
            e[n] = h
            fd[n] = (log_g(x, gamma + e, model) - log_g(x, gamma - e, model)) / (2 * h)
        worst_vec = max(worst_vec, float(np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1e-3))))

        L_N = int(rng.integers(1, 4))
        M = int(rng.integers(1, 9))
        pm = Phase1Model(generate_preambles(L_N, 1, rng)[:, 0], float(rng.uniform(0.1, 2)),
                         float(rng.uniform(0.5, 2)), M)
        K = float(rng.uniform(0.5, 50))
        xk = rng.normal(0, np.sqrt(pm.variances(K).max()), pm.dim)
        h = 1e-5 * max(K, 1.0)
        fdk = (log_g_K(xk, K + h, pm) - log_g_K(xk, K - h, pm)) / (2 * h)
        gk = grad_log_g_K(xk, K, pm)
        worst_scalar = max(worst_scalar, abs(gk - fdk) / max(abs(fdk), 1e-3))
    return {"instances": instances, "max_rel_error_vector": worst_vec, "max_rel_error_scalar": worst_scalar}


def oracle_check(samples=100_000, seed=0, grid_points=30, batch=10_000) -> dict:
    """Sampled stochastic gradients vs tensor-grid quadrature (4 dims), plus
    the gamma = 0 quadrature value vs the product of normal CDF differences."""
    rng = np.random.default_rng(seed)
    L, N, M = 2, 3, 1
    S = generate_preambles(L, N, rng)
    # columns with equal symbol ratios give identical gradients; avoid them
    while np.unique(np.round(S[1] / S[0], 9)).size < N:
        S = generate_preambles(L, N, rng)
    model = DetectionModel.build(S, 1.0, M)
    gamma = np.array([0.8, 0.0, 0.3])
    y = rng.multivariate_normal(np.zeros(model.dim), model.sigma(gamma))
    cb = Codebook.design(1, 0.8, 1.0, 2.0, 2)
    yq = quantize(y, cb)
    _, quad_grad = brute_force_quantized_likelihood(yq, cb, model, gamma, grid_points)
    lo = cell_lower_edges(yq, cb)
    acc = np.zeros(N)
    done = 0
    while done < samples:
        n = min(batch, samples - done)
        X = lo + cb.delta * rng.random((n, lo.size))
        grad, val = structured_terms(np.broadcast_to(model.S_hat, (n,) + model.S_hat.shape),
                                     np.ones((n, 1)), X[:, None, :, None],
                                     np.broadcast_to(gamma, (n, N)), model.sigma2, value=True)
        # grad g = exp(gbar) grad gbar, the integrand of the expectation form
        acc += (np.exp(val - log_cell_density(model.dim, cb))[:, None] * grad).sum(axis=0)
        done += n
    acc /= samples
    cosine = float(acc @ quad_grad / (np.linalg.norm(acc) * np.linalg.norm(quad_grad)))

    m1 = DetectionModel.build(generate_preambles(1, N, rng), 1.0, 1)
    cb1 = Codebook(2, 1.0)
    yq1 = np.array([0.5, -1.5])
    value, _ = brute_force_quantized_likelihood(yq1, cb1, m1, np.zeros(N), 600)
    sd = np.sqrt(0.5)
    closed = (norm.cdf(1 / sd) - norm.cdf(0)) * (norm.cdf(-1 / sd) - norm.cdf(-2 / sd))
    return {"cosine": cosine, "sampled_grad": acc, "quadrature_grad": quad_grad,
            "cdf_value": value, "cdf_closed_form": float(closed),
            "cdf_abs_error": float(abs(value - closed))}
