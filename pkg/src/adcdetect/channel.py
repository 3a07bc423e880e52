"""Ground-truth synthesis: activity, correlated Rayleigh channels, link
budget and received signals for both protocol phases."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal_model import real_expand_received


@dataclass(frozen=True)
class LinkBudget:
    noise_psd_dbm_hz: float = -169.0
    bandwidth_hz: float = 10e6
    tx_power_dbm: float = 23.0
    distance_km: float = 1.0

    def pathloss_db(self) -> float:
        if self.distance_km <= 0:
            raise ValueError(f"distance must be positive, got {self.distance_km} km")
        return 128.1 + 37.6 * np.log10(self.distance_km)


def dbm_to_mw(dbm: float) -> float:
    return 10.0 ** (dbm / 10.0)


def link_budget_to_params(lb: LinkBudget, normalize: bool = True) -> tuple[float, float]:
    """Return (beta, sigma2).

    Raw mode gives both in mW. ``normalize=True`` rescales so sigma2 = 1,
    which keeps the per-device SNR beta/sigma2 unchanged.
    """
    sigma2_dbm = lb.noise_psd_dbm_hz + 10.0 * np.log10(lb.bandwidth_hz)
    beta_dbm = lb.tx_power_dbm - lb.pathloss_db()
    if normalize:
        return dbm_to_mw(beta_dbm - sigma2_dbm), 1.0
    return dbm_to_mw(beta_dbm), dbm_to_mw(sigma2_dbm)


def snr_db(lb: LinkBudget) -> float:
    beta, sigma2 = link_budget_to_params(lb)
    return 10.0 * np.log10(beta / sigma2)


def draw_activity(N: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Binary pattern with exactly K ones placed uniformly at random."""
    if not 0 <= K <= N:
        raise ValueError(f"need 0 <= K <= N, got K={K}, N={N}")
    alpha = np.zeros(N)
    alpha[rng.choice(N, size=K, replace=False)] = 1.0
    return alpha


def exponential_covariance(c: complex, M: int) -> np.ndarray:
    """[C]_{i,j} = c^(i-j) for i >= j, Hermitian above the diagonal."""
    if abs(c) > 1:
        raise ValueError(f"|c| must be <= 1, got |c|={abs(c)}")
    i, j = np.indices((M, M))
    lower = np.power(complex(c), np.maximum(i - j, 0))
    C = np.where(i >= j, lower, np.conj(lower.T))
    if np.isrealobj(c) or complex(c).imag == 0:
        C = C.real.astype(complex)
    return C


def hermitian_sqrt(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(C)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.conj().T


def complex_normal(shape, rng: np.random.Generator, var: float = 1.0) -> np.ndarray:
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def draw_channels(N: int, M: int, rng: np.random.Generator, c: complex | None = None,
                  per_device_cov: np.ndarray | None = None) -> np.ndarray:
    """N x M channel matrix, row n = (C_n^(1/2) h_n)^T with h_n ~ CN(0, I).

    ``c=None`` and no ``per_device_cov`` gives i.i.d. Rayleigh fading.
    """
    H = complex_normal((N, M), rng)
    if per_device_cov is not None:
        roots = np.array([hermitian_sqrt(Cn) for Cn in per_device_cov])
        return np.einsum("nij,nj->ni", roots, H)
    if c is None or c == 0:
        return H
    root = hermitian_sqrt(exponential_covariance(c, M))
    return H @ root.T


def synthesize_received(S: np.ndarray, alpha: np.ndarray, beta: float, H: np.ndarray,
                        sigma2: float, rng: np.random.Generator):
    """Y = S gamma^(1/2) H + Z with Z ~ CN(0, sigma2). Returns (Y, ybar)."""
    L = S.shape[0]
    M = H.shape[1]
    gamma = np.asarray(alpha, dtype=float) * beta
    Z = complex_normal((L, M), rng, sigma2)
    Y = S @ (np.sqrt(gamma)[:, None] * H) + Z
    return Y, real_expand_received(Y)


def synthesize_phase1_received(s_symbol, K: float, beta: float, M: int, sigma2: float,
                               rng: np.random.Generator, h: np.ndarray | None = None) -> np.ndarray:
    """Phase-I signal for identical preambles, ybar of length 2 L_N M.

    Uses the distributional identity sum_n alpha_n h_n ~ sqrt(K) h_1 for
    i.i.d. channels. ``s_symbol`` may be a scalar or an L_N-vector; pass
    ``h`` (length M) to reuse an aggregate channel within a coherence block,
    in which case ``h`` already carries the sqrt(K) scaling.
    """
    s = np.atleast_1d(np.asarray(s_symbol, dtype=complex))
    if h is None:
        h = np.sqrt(K) * complex_normal(M, rng)
    Z = complex_normal((s.size, M), rng, sigma2)
    Y = np.sqrt(beta) * np.outer(s, h) + Z
    return real_expand_received(Y)


def phase1_aggregate_channel(alpha: np.ndarray, H: np.ndarray) -> np.ndarray:
    """Exact Phase-I aggregate sum_n alpha_n h_n from drawn channels."""
    return np.asarray(alpha, dtype=float) @ H
