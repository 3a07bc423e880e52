"""Phase-II activity detection from quantized covariance data.

The per-sample log-integrand is

    gbar(x, gamma) = -1/2 x^T Sigma^-1 x - 1/2 log|Sigma| - ML log(2 pi) - log p(x)

and the detector ascends it with unit-normalized stochastic gradients,
projecting onto gamma >= 0 after every step. Only gbar and its gradient are
evaluated; exp(gbar) never is.

Two evaluation paths exist. The *structured* path covers i.i.d. channels
(one 2L x 2L block shared by every antenna) and channels where all devices
share one real antenna covariance (M blocks after rotating the antenna axis
by its eigenvectors); it is vectorized over a leading batch axis so many
independent trials advance together. The *dense* path handles arbitrary
per-device covariances on the full 2LM x 2LM matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .quantizer import Codebook, cell_lower_edges, log_cell_density
from .signal_model import StackedCovariance, as_s_hat, received_covariance

LOG_2PI = math.log(2.0 * math.pi)
ZERO_GRAD = 1e-300


@dataclass(frozen=True)
class DetectionModel:
    """Everything the likelihood needs besides the data: S_hat, C, sigma2."""

    S_hat: np.ndarray
    sigma2: float
    M: int
    structure: str
    C: StackedCovariance | None = None
    lam: np.ndarray | None = None
    U: np.ndarray | None = None

    @classmethod
    def build(cls, S, sigma2: float, M: int, C: StackedCovariance | None = None,
              structure: str | None = None) -> "DetectionModel":
        if sigma2 <= 0:
            raise ValueError(f"sigma2 must be positive, got {sigma2}")
        S_hat = as_s_hat(S)
        if C is not None and C.M != M:
            raise ValueError(f"C has {C.M} antennas, expected {M}")
        if structure is None:
            if C is None or C.iid:
                structure = "iid"
            elif C.shared_real:
                structure = "kron"
            else:
                structure = "dense"
        if structure == "iid":
            return cls(S_hat, sigma2, M, "iid", C, np.ones(1), None)
        if C is None:
            raise ValueError(f"structure {structure!r} needs a stacked covariance")
        if structure == "kron":
            if not C.shared_real:
                raise ValueError("kron structure needs one shared real antenna covariance")
            lam, U = np.linalg.eigh(C.shared)
            return cls(S_hat, sigma2, M, "kron", C, np.clip(lam, 0.0, None), U)
        if structure == "dense":
            if C is None:
                C = _iid_C(S_hat.shape[1] // 2, M)
            return cls(S_hat, sigma2, M, "dense", C)
        raise ValueError(f"unknown structure {structure!r}")

    @property
    def L(self) -> int:
        return self.S_hat.shape[0] // 2

    @property
    def N(self) -> int:
        return self.S_hat.shape[1] // 2

    @property
    def dim(self) -> int:
        return 2 * self.L * self.M

    def rotated(self, x: np.ndarray) -> np.ndarray:
        """Data as (J, 2L, r) blocks matching ``lam`` (structured paths)."""
        X = np.asarray(x, dtype=float).reshape(self.M, 2 * self.L)
        if self.structure == "iid":
            return X.T[None]
        return (self.U.T @ X)[:, :, None]

    def sigma(self, gamma) -> np.ndarray:
        return received_covariance(self.S_hat, self.C, gamma, self.sigma2,
                                   structure=self.structure, M=self.M).dense()


def _iid_C(N: int, M: int) -> StackedCovariance:
    from .signal_model import iid_stacked_covariance
    return iid_stacked_covariance(N, M)


# ---------------------------------------------------------------------------
# structured (batched) evaluation


def structured_terms(S_hat, lam, Xt, gamma, sigma2, value: bool = False):
    """Gradient (and optionally value, without the log p(x) term) of gbar.

    Shapes, with a leading batch axis T: S_hat (T, 2L, 2N), lam (T, J),
    Xt (T, J, 2L, r), gamma (T, N). Returns grad (T, N) and, if requested,
    the value (T,).
    """
    T, two_l, two_n = S_hat.shape
    N = two_n // 2
    r = Xt.shape[-1]
    gg = np.concatenate([gamma, gamma], axis=1)
    base = 0.5 * (S_hat * gg[:, None, :]) @ S_hat.transpose(0, 2, 1)
    Sig = lam[:, :, None, None] * base[:, None] + (0.5 * sigma2) * np.eye(two_l)
    chol = np.linalg.cholesky(Sig)
    J = lam.shape[1]
    # inverting the small triangular factor once and then multiplying is
    # much cheaper than solving against all 2N + r right-hand sides
    Linv = np.linalg.solve(chol, np.broadcast_to(np.eye(two_l), chol.shape))
    V = Linv @ S_hat[:, None]
    w = Linv @ Xt
    # u = Sigma^-1 x, so S_hat^T u = V^T w
    p = V.transpose(0, 1, 3, 2) @ w
    p2 = (p * p).sum(axis=3)
    v2 = (V * V).sum(axis=2)
    quad = 0.25 * np.einsum("tj,tjn->tn", lam, p2[..., :N] + p2[..., N:])
    trace = 0.25 * r * np.einsum("tj,tjn->tn", lam, v2[..., :N] + v2[..., N:])
    grad = quad - trace
    if not value:
        return grad
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=2, axis2=3)).sum(axis=(1, 2))
    M_L = J * r * two_l / 2.0
    val = -0.5 * (w * w).sum(axis=(1, 2, 3)) - 0.5 * r * logdet - M_L * LOG_2PI
    return grad, val


def _structured_single(x, gamma, model: DetectionModel, value: bool):
    out = structured_terms(model.S_hat[None], model.lam[None], model.rotated(x)[None],
                           np.asarray(gamma, dtype=float)[None], model.sigma2, value)
    if value:
        return out[0][0], out[1][0]
    return out[0]


# ---------------------------------------------------------------------------
# dense evaluation


def _dense_terms(x, gamma, model: DetectionModel, value: bool):
    gamma = np.asarray(gamma, dtype=float)
    M, L, N = model.M, model.L, model.N
    Sig = model.sigma(gamma)
    cf = cho_factor(Sig, lower=True)
    u = cho_solve(cf, x)
    P = model.S_hat.reshape(2 * L, 2, N)
    D = model.C.blocks.reshape(M, 2, M, 2, N)
    r = np.einsum("ian,mi->man", P, u.reshape(M, 2 * L))
    quad = 0.5 * np.einsum("man,mapbn,pbn->n", r, D, r, optimize=True)
    Sinv = cho_solve(cf, np.eye(Sig.shape[0])).reshape(M, 2 * L, M, 2 * L)
    W = np.einsum("ian,mipj,jbn->mapbn", P, Sinv, P, optimize=True)
    grad = quad - 0.5 * np.einsum("mapbn,mapbn->n", D, W)
    if not value:
        return grad
    logdet = 2.0 * np.log(np.diag(cf[0])).sum()
    val = -0.5 * x @ u - 0.5 * logdet - M * L * LOG_2PI
    return grad, val


def _terms(x, gamma, model: DetectionModel, value: bool):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"x has shape {x.shape}, expected ({model.dim},)")
    if np.any(np.asarray(gamma) < 0):
        raise ValueError("gamma must be nonnegative")
    if model.structure == "dense":
        return _dense_terms(x, gamma, model, value)
    return _structured_single(x, gamma, model, value)


def log_g(x, gamma, model: DetectionModel, cb: Codebook | None = None) -> float:
    """gbar(x, gamma); the uniform-sampling density term uses ``cb`` (none if omitted)."""
    _, val = _terms(x, gamma, model, True)
    log_px = log_cell_density(model.dim, cb) if cb is not None else 0.0
    return float(val - log_px)


def grad_log_g(x, gamma, model: DetectionModel) -> np.ndarray:
    """Gradient of gbar with respect to gamma (length N)."""
    return _terms(x, gamma, model, False)


def log_likelihood(ybar, gamma, model: DetectionModel) -> float:
    """log p(ybar | gamma) of the unquantized Gaussian model."""
    return log_g(ybar, gamma, model)


# ---------------------------------------------------------------------------
# NSGD


def inverse_sqrt_schedule(i: int) -> float:
    return i ** -0.5


@dataclass
class DetectorConfig:
    epsilon: float = 1e-3
    max_iterations: int | None = None
    step: Callable[[int], float] = inverse_sqrt_schedule
    record_path: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iterations is None:
            self.max_iterations = 10 * math.ceil(1.0 / self.epsilon)
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class DetectionResult:
    gamma_hat: np.ndarray
    iterations: int
    eta_trace: np.ndarray
    converged: bool
    path: np.ndarray | None = None
    objective_trace: np.ndarray | None = field(default=None, repr=False)

    def delta_trace(self, reference: np.ndarray | None = None) -> np.ndarray:
        """||gamma_i - gamma_ref||_1 / N along the path (final iterate by default)."""
        if self.path is None:
            raise ValueError("run the detector with record_path=True")
        ref = self.gamma_hat if reference is None else np.asarray(reference)
        return np.abs(self.path - ref).sum(axis=1) / self.path.shape[1]


@dataclass
class DetectionProblem:
    """One NSGD instance: quantized data, its codebook and the model."""

    yq: np.ndarray
    cb: Codebook
    model: DetectionModel
    rng: np.random.Generator

    def sampler(self):
        yq = np.asarray(self.yq, dtype=float)
        if self.cb.infinite:
            return lambda: yq
        lo = cell_lower_edges(yq, self.cb)
        delta = self.cb.delta
        rng = self.rng
        return lambda: lo + delta * rng.random(lo.shape)


def nsgd_detect(yq, cb: Codebook, model: DetectionModel, config: DetectorConfig,
                rng: np.random.Generator) -> DetectionResult:
    """Normalized SGD on the quantized likelihood, starting from gamma = 0."""
    return nsgd_detect_batch([DetectionProblem(yq, cb, model, rng)], config)[0]


def nsgd_detect_batch(problems: Sequence[DetectionProblem], config: DetectorConfig) -> list[DetectionResult]:
    """Run independent NSGD instances in lockstep.

    Each instance draws only from its own generator, so the result of one
    instance does not depend on which others share the batch.
    """
    if not problems:
        return []
    structures = {p.model.structure for p in problems}
    if "dense" in structures:
        return [_nsgd_dense(p, config) for p in problems]
    shapes = {(p.model.structure, p.model.S_hat.shape, p.model.M) for p in problems}
    if len(shapes) != 1:
        raise ValueError("batched problems must share structure and dimensions")

    T = len(problems)
    N = problems[0].model.N
    S_hat = np.stack([p.model.S_hat for p in problems])
    lam = np.stack([p.model.lam for p in problems])
    sigma2 = np.array([p.model.sigma2 for p in problems])
    if not np.all(sigma2 == sigma2[0]):
        raise ValueError("batched problems must share sigma2")
    samplers = [p.sampler() for p in problems]
    models = [p.model for p in problems]

    gamma = np.zeros((T, N))
    etas: list[list[float]] = [[] for _ in range(T)]
    paths = [[np.zeros(N)] for _ in range(T)] if config.record_path else None
    iterations = np.zeros(T, dtype=int)
    converged = np.zeros(T, dtype=bool)
    active = np.arange(T)
    i = 0
    while active.size and i < config.max_iterations:
        i += 1
        Xt = np.stack([models[t].rotated(samplers[t]()) for t in active])
        G = gamma[active]
        grad = structured_terms(S_hat[active], lam[active], Xt, G, sigma2[0])
        norm = np.linalg.norm(grad, axis=1)
        ok = norm >= ZERO_GRAD
        step = config.step(i)
        new = G.copy()
        new[ok] = np.maximum(G[ok] + step * grad[ok] / norm[ok, None], 0.0)
        eta = np.abs(new - G).sum(axis=1) / N
        gamma[active] = new
        done = np.zeros(active.size, dtype=bool)
        for k, t in enumerate(active):
            if not ok[k]:
                continue
            etas[t].append(eta[k])
            iterations[t] = i
            if paths is not None:
                paths[t].append(new[k].copy())
            if eta[k] < config.epsilon:
                converged[t] = True
                done[k] = True
        active = active[~done]

    return [
        DetectionResult(gamma[t].copy(), int(iterations[t]), np.array(etas[t]), bool(converged[t]),
                        np.array(paths[t]) if paths is not None else None)
        for t in range(T)
    ]


def _nsgd_dense(problem: DetectionProblem, config: DetectorConfig) -> DetectionResult:
    model = problem.model
    draw = problem.sampler()
    gamma = np.zeros(model.N)
    etas = []
    path = [gamma.copy()] if config.record_path else None
    converged = False
    i = 0
    while i < config.max_iterations:
        i += 1
        grad = _dense_terms(draw(), gamma, model, False)
        norm = np.linalg.norm(grad)
        if norm < ZERO_GRAD:
            continue
        new = np.maximum(gamma + config.step(i) * grad / norm, 0.0)
        eta = np.abs(new - gamma).sum() / model.N
        gamma = new
        etas.append(eta)
        if path is not None:
            path.append(gamma.copy())
        if eta < config.epsilon:
            converged = True
            break
    return DetectionResult(gamma, i, np.array(etas), converged,
                           np.array(path) if path is not None else None)


# ---------------------------------------------------------------------------
# infinite-resolution benchmark


def infinite_adc_detect(ybar, model: DetectionModel, config: DetectorConfig,
                        gamma0: np.ndarray | None = None, armijo: float = 1e-4,
                        max_halvings: int = 60) -> DetectionResult:
    """Projected gradient ascent on log p(ybar | gamma) with backtracking.

    Trial steps use a Barzilai-Borwein length; each accepted step satisfies
    the projected Armijo condition, so the objective never decreases.
    """
    ybar = np.asarray(ybar, dtype=float)
    N = model.N
    gamma = np.zeros(N) if gamma0 is None else np.maximum(np.asarray(gamma0, dtype=float), 0.0)
    grad, f = _terms(ybar, gamma, model, True)
    t = 1.0 / max(np.linalg.norm(grad), ZERO_GRAD)
    etas, objective = [], [f]
    path = [gamma.copy()] if config.record_path else None
    converged = False
    i = 0
    while i < config.max_iterations:
        i += 1
        for _ in range(max_halvings):
            cand = np.maximum(gamma + t * grad, 0.0)
            step = cand - gamma
            g_new, f_new = _terms(ybar, cand, model, True)
            if f_new >= f + armijo * grad @ step:
                break
            t *= 0.5
        else:
            cand, step, g_new, f_new = gamma, np.zeros(N), grad, f
        eta = np.abs(step).sum() / N
        etas.append(eta)
        y = g_new - grad
        sy = step @ y
        t = (step @ step) / -sy if sy < 0 else 2.0 * t
        t = float(np.clip(t, 1e-12, 1e12))
        gamma, grad, f = cand, g_new, f_new
        objective.append(f)
        if path is not None:
            path.append(gamma.copy())
        if eta < config.epsilon:
            converged = True
            break
    return DetectionResult(gamma, i, np.array(etas), converged,
                           np.array(path) if path is not None else None, np.array(objective))


def decide_activity(gamma_hat, threshold: float) -> np.ndarray:
    """1 where gamma_hat exceeds the threshold, else 0."""
    return (np.asarray(gamma_hat) > threshold).astype(int)


def detection_errors(alpha_hat, alpha) -> tuple[float, float]:
    """(missed-detection fraction, false-alarm fraction) for one trial."""
    alpha = np.asarray(alpha).astype(bool)
    alpha_hat = np.asarray(alpha_hat).astype(bool)
    K = alpha.sum()
    mdp = (alpha & ~alpha_hat).sum() / K if K else 0.0
    fap = (~alpha & alpha_hat).sum() / (alpha.size - K) if K < alpha.size else 0.0
    return float(mdp), float(fap)
