"""Tensor-grid midpoint quadrature of the quantized likelihood.

Test oracle only: the cost is gridPointsPerDim ** (2LM), so the total
dimension is capped at 6. Derivatives of Sigma are taken from the dense
covariance by linearity in gamma, independently of the detector's
closed-form gradient.
"""
from __future__ import annotations

import numpy as np

from .detector import DetectionModel
from .quantizer import Codebook, interval_index

MAX_DIM = 6


def _grid(yq, cb: Codebook, points: int):
    q = np.asarray(interval_index(np.asarray(yq, dtype=float), cb))
    lo = (q - 1 - cb.half) * cb.delta
    h = cb.delta / points
    offsets = (np.arange(points) + 0.5) * h
    axes = [l + offsets for l in lo]
    return axes, h


def brute_force_quantized_likelihood(yq, cb: Codebook, model: DetectionModel, gamma,
                                     grid_points: int = 40, chunk: int = 200_000):
    """Return (v, grad v) with v = integral of p(x | gamma) over the truncated cells."""
    dim = model.dim
    if dim > MAX_DIM:
        raise ValueError(f"quadrature limited to {MAX_DIM} dimensions, got {dim}")
    gamma = np.asarray(gamma, dtype=float)
    N = model.N
    Sig = model.sigma(gamma)
    Sinv = np.linalg.inv(Sig)
    _, logdet = np.linalg.slogdet(Sig)
    base = model.sigma(np.zeros(N))
    dS = np.array([model.sigma(np.eye(N)[n]) - base for n in range(N)])
    # quadratic forms u^T dS_n u with u = Sinv x  ->  x^T A_n x
    A = np.einsum("ij,njk,kl->nil", Sinv, dS, Sinv)
    traces = np.einsum("ij,nji->n", Sinv, dS)
    log_norm = -0.5 * dim * np.log(2 * np.pi) - 0.5 * logdet

    axes, h = _grid(yq, cb, grid_points)
    weight = h ** dim
    value = 0.0
    grad = np.zeros(N)
    total = grid_points ** dim
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(start + chunk, total)), (grid_points,) * dim)
        pts = np.stack([axes[d][idx[d]] for d in range(dim)], axis=1)
        quad = np.einsum("pi,ij,pj->p", pts, Sinv, pts)
        dens = np.exp(log_norm - 0.5 * quad)
        score = 0.5 * np.einsum("pi,nij,pj->pn", pts, A, pts) - 0.5 * traces
        value += dens.sum() * weight
        grad += (dens[:, None] * score).sum(axis=0) * weight
    return value, grad
