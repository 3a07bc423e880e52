"""Phase-I estimation of the number of active devices K.

All devices send the same preamble, so per antenna the real received block
has covariance

    Sigma_m(K) = K beta / 2 (s1 s1^T + s2 s2^T) + sigma2 / 2 I

with s1 = [Re s; Im s] and s2 = [-Im s; Re s]. s1 and s2 are orthogonal
with squared norm ||s||^2, so Sigma_m is diagonal in a fixed rotated basis
and the likelihood in K costs O(L_N M) per evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .quantizer import Codebook, interval_index, quantize

LOG_2PI = math.log(2.0 * math.pi)


def phase1_columns(s) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_1d(np.asarray(s, dtype=complex))
    return np.concatenate([s.real, s.imag]), np.concatenate([-s.imag, s.real])


def sigma_m_of_K(K: float, s_hat_cols, beta: float, sigma2: float) -> np.ndarray:
    s1, s2 = (np.asarray(v, dtype=float) for v in s_hat_cols)
    return 0.5 * K * beta * (np.outer(s1, s1) + np.outer(s2, s2)) + 0.5 * sigma2 * np.eye(s1.size)


@dataclass(frozen=True)
class Phase1Model:
    """Likelihood model for Phase-I data with preamble symbols ``s``."""

    s: np.ndarray
    beta: float
    sigma2: float
    M: int
    basis: np.ndarray = field(init=False, repr=False)
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s1, s2 = phase1_columns(self.s)
        mu, Q = np.linalg.eigh(np.outer(s1, s1) + np.outer(s2, s2))
        object.__setattr__(self, "basis", Q)
        object.__setattr__(self, "weights", np.clip(mu, 0.0, None))

    @property
    def L_N(self) -> int:
        return np.atleast_1d(self.s).size

    @property
    def dim(self) -> int:
        return 2 * self.L_N * self.M

    def sigma_m(self, K: float) -> np.ndarray:
        return sigma_m_of_K(K, phase1_columns(self.s), self.beta, self.sigma2)

    def variances(self, K: float) -> np.ndarray:
        return 0.5 * self.sigma2 + 0.5 * K * self.beta * self.weights

    def rotate(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=float).reshape(self.M, 2 * self.L_N)
        return X @ self.basis


def log_g_K(x, K: float, model: Phase1Model, log_px: float = 0.0) -> float:
    """gbar(K) = sum_m [-1/2 x_m^T Sigma_m^-1 x_m - 1/2 log|Sigma_m|] - M L_N log 2pi - log p(x)."""
    z2 = (model.rotate(x) ** 2).sum(axis=0)
    d = model.variances(K)
    return float(-0.5 * (z2 / d).sum() - 0.5 * model.M * np.log(d).sum()
                 - model.M * model.L_N * LOG_2PI - log_px)


def grad_log_g_K(x, K: float, model: Phase1Model) -> float:
    z2 = (model.rotate(x) ** 2).sum(axis=0)
    return _grad_from_energy(z2, K, model)


def _grad_from_energy(z2: np.ndarray, K: float, model: Phase1Model) -> float:
    d = model.variances(K)
    dd = 0.5 * model.beta * model.weights
    return float((0.5 * z2 / d ** 2 * dd).sum() - 0.5 * model.M * (dd / d).sum())


@dataclass
class EstimatorConfig:
    N: int
    beta: float
    sigma2: float
    M: int
    L_N: int = 1
    K0: float = 1.0
    rho: float = 2.0
    bits: int | None = 4
    epsilon: float = 1e-3
    max_inner: int = 500
    accumulate: bool = False

    def __post_init__(self):
        if self.L_N < 1:
            raise ValueError(f"L_N must be >= 1, got {self.L_N}")
        if not 0 <= self.K0 <= self.N:
            raise ValueError(f"K0 must lie in [0, N], got {self.K0}")


@dataclass
class EstimationTrace:
    k_hats: np.ndarray
    deltas: np.ndarray
    inner_iterations: np.ndarray

    @property
    def k_hat(self) -> float:
        return float(self.k_hats[-1])


def scalar_nsgd(lo: np.ndarray, widths: np.ndarray, model: Phase1Model, K_init: float, N: float,
                rng: np.random.Generator, epsilon: float = 1e-3, max_iter: int = 500,
                step: Callable[[int], float] = lambda i: i ** -0.5) -> tuple[float, int]:
    """Normalized SGD for K on [0, N]; x is uniform on cells [lo, lo + widths).

    ``widths`` of zero encode infinite-resolution entries (x fixed at ``lo``).
    In one dimension the normalized gradient is its sign.
    """
    K = float(K_init)
    Q = model.basis
    M = model.M
    for i in range(1, max_iter + 1):
        x = lo + widths * rng.random(lo.shape)
        z2 = ((x.reshape(M, -1) @ Q) ** 2).sum(axis=0)
        g = _grad_from_energy(z2, K, model)
        if abs(g) < 1e-300:
            continue
        new = min(max(K + step(i) * math.copysign(1.0, g), 0.0), float(N))
        eta = abs(new - K)
        K = new
        if eta < epsilon:
            return K, i
    return K, max_iter


def golden_section_estimate(yq, model: Phase1Model, N: float, tol: float = 1e-8) -> float:
    """Deterministic maximizer of gbar at the cell midpoints over K in [0, N]."""
    z2 = (model.rotate(yq) ** 2).sum(axis=0)

    def f(K):
        d = model.variances(K)
        return -0.5 * (z2 / d).sum() - 0.5 * model.M * np.log(d).sum()

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, float(N)
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def _cells(ybar, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    ybar = np.asarray(ybar, dtype=float)
    if cb.infinite:
        return ybar.copy(), np.zeros_like(ybar)
    q = np.asarray(interval_index(ybar, cb))
    lo = (q - 1 - cb.half) * cb.delta
    return lo, np.full_like(lo, cb.delta)


def _interleave(blocks: list[np.ndarray], M: int) -> np.ndarray:
    """Per-symbol 2M vectors -> one ybar ordered antenna by antenna as [Re...; Im...]."""
    arr = np.stack([b.reshape(M, 2) for b in blocks], axis=2)  # (M, 2, L)
    return arr.reshape(M, -1).ravel()


def oea_estimate(ybar, s, config: EstimatorConfig, rng: np.random.Generator) -> EstimationTrace:
    """One codebook from K0, quantize all L_N symbols, solve for K once."""
    cb = Codebook.design(config.K0, config.beta, config.sigma2, config.rho, config.bits)
    model = Phase1Model(np.atleast_1d(s), config.beta, config.sigma2, config.M)
    lo, widths = _cells(ybar, cb)
    K, its = scalar_nsgd(lo, widths, model, config.K0, config.N, rng, config.epsilon, config.max_inner)
    return EstimationTrace(np.array([config.K0, K]), np.array([cb.delta]), np.array([its]))


def pea_estimate(sim_hook: Callable[[int], tuple[complex, np.ndarray]], config: EstimatorConfig,
                 rng: np.random.Generator) -> EstimationTrace:
    """Progressive estimation: redesign the codebook from the last estimate
    before each new Phase-I symbol, then re-estimate K warm-started.

    ``sim_hook(i)`` returns ``(s_i, ybar_i)`` for symbol i = 1..L_N, where
    ``ybar_i`` is the analog 2M-vector received for that symbol.
    """
    k_hats = [float(config.K0)]
    deltas, inner = [], []
    symbols, los, widths = [], [], []
    for i in range(1, config.L_N + 1):
        cb = Codebook.design(k_hats[-1], config.beta, config.sigma2, config.rho, config.bits)
        s_i, y_i = sim_hook(i)
        lo, w = _cells(y_i, cb)
        if config.accumulate:
            symbols.append(s_i), los.append(lo), widths.append(w)
            s_use = np.array(symbols)
            lo_use, w_use = _interleave(los, config.M), _interleave(widths, config.M)
        else:
            s_use, lo_use, w_use = np.atleast_1d(s_i), lo, w
        model = Phase1Model(s_use, config.beta, config.sigma2, config.M)
        K, its = scalar_nsgd(lo_use, w_use, model, k_hats[-1], config.N, rng,
                             config.epsilon, config.max_inner)
        k_hats.append(K)
        deltas.append(cb.delta)
        inner.append(its)
    return EstimationTrace(np.array(k_hats), np.array(deltas), np.array(inner))


def quantized_phase1(ybar, k_hat: float, config: EstimatorConfig) -> np.ndarray:
    cb = Codebook.design(k_hat, config.beta, config.sigma2, config.rho, config.bits)
    return quantize(ybar, cb)
