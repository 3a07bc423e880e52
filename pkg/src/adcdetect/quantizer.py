"""Uniform B-bit ADC codebook.

Cells are indexed q = 1..2^B. Interval I_q is left-closed/right-open with
the two extreme cells unbounded; the truncated cell J_q clips the extremes
to width ``delta`` so every J_q is a bounded interval of width ``delta``.
A codebook with ``bits=None`` is the infinite-resolution pass-through.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def design_step_size(k_hat: float, beta: float, sigma2: float, rho: float, bits: int) -> float:
    """delta = rho * sqrt(2 k_hat beta + 2 sigma2) / 2^B (k_hat may be real)."""
    if rho <= 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if bits < 1:
        raise ValueError(f"bits must be >= 1, got {bits}")
    if k_hat < 0:
        raise ValueError(f"k_hat must be nonnegative, got {k_hat}")
    return rho * math.sqrt(2.0 * k_hat * beta + 2.0 * sigma2) / 2 ** bits


@dataclass(frozen=True)
class Codebook:
    bits: int | None
    delta: float = 1.0
    rho: float | None = None
    k_hat: float | None = None

    def __post_init__(self):
        if self.bits is not None and self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")

    @classmethod
    def design(cls, k_hat: float, beta: float, sigma2: float, rho: float = 2.0,
               bits: int | None = 4) -> "Codebook":
        if bits is None:
            return cls(None, 1.0, rho, k_hat)
        return cls(bits, design_step_size(k_hat, beta, sigma2, rho, bits), rho, k_hat)

    @property
    def infinite(self) -> bool:
        return self.bits is None

    @property
    def n_levels(self) -> int:
        return 2 ** self.bits

    @property
    def half(self) -> int:
        return 2 ** (self.bits - 1)

    @property
    def levels(self) -> np.ndarray:
        q = np.arange(1, self.n_levels + 1)
        return (q - self.half - 0.5) * self.delta

    def interval(self, q: int) -> tuple[float, float]:
        """I_q as (low, high); extreme cells extend to -inf / +inf."""
        self._check_q(q)
        lo = -math.inf if q == 1 else (q - 1 - self.half) * self.delta
        hi = math.inf if q == self.n_levels else (q - self.half) * self.delta
        return lo, hi

    def truncated_cell(self, q: int) -> tuple[float, float]:
        """J_q = [(q-1-2^(B-1)) delta, (q-2^(B-1)) delta)."""
        self._check_q(q)
        return (q - 1 - self.half) * self.delta, (q - self.half) * self.delta

    def _check_q(self, q: int) -> None:
        if self.infinite:
            raise ValueError("pass-through codebook has no cells")
        if not 1 <= q <= self.n_levels:
            raise ValueError(f"cell index {q} outside 1..{self.n_levels}")

    def record(self) -> str:
        """One-line provenance record."""
        bits = "inf" if self.infinite else str(self.bits)
        return f"B={bits} delta={self.delta!r} rho={self.rho!r} k_hat={self.k_hat!r}"


def interval_index(x, cb: Codebook):
    """Cell index q in 1..2^B for each x (left-closed cells)."""
    x = np.asarray(x, dtype=float)
    q = np.floor(x / cb.delta) + cb.half + 1
    q = np.clip(q, 1, cb.n_levels).astype(np.int64)
    return q if q.ndim else int(q)


def quantize(ybar, cb: Codebook) -> np.ndarray:
    """Map each entry to the midpoint of its cell (identity when B is infinite)."""
    ybar = np.asarray(ybar, dtype=float)
    if cb.infinite:
        return ybar.copy()
    q = interval_index(ybar, cb)
    return (np.asarray(q) - cb.half - 0.5) * cb.delta


def cell_lower_edges(yq, cb: Codebook) -> np.ndarray:
    """Left edge of the truncated cell containing each quantized value."""
    yq = np.asarray(yq, dtype=float)
    return (np.asarray(interval_index(yq, cb)) - 1 - cb.half) * cb.delta


def sample_uniform_in_cells(yq, cb: Codebook, rng: np.random.Generator) -> np.ndarray:
    """Draw x uniformly from the product of truncated cells around ``yq``."""
    lo = cell_lower_edges(yq, cb)
    return lo + cb.delta * rng.random(lo.shape)


def log_cell_density(dim: int, cb: Codebook) -> float:
    """log p(x) for the uniform sampling density over ``dim`` truncated cells."""
    if cb.infinite:
        return 0.0
    return -dim * math.log(cb.delta)
