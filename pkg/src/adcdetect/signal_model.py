"""Real-domain signal model: preambles, real expansions, stacked channel
covariance and the covariance of the stacked received vector.

Layout conventions used throughout the package:

* ``S_hat`` is the 2L x 2N real expansion ``[[Re S, -Im S], [Im S, Re S]]``.
* A received block ``Y`` (L x M, complex) becomes ``ybar`` of length 2LM,
  antenna by antenna, each antenna contributing ``[Re(y_m); Im(y_m)]``.
* The stacked channel covariance ``C`` is indexed by 2M x 2M blocks
  (block ``2k`` / ``2k+1`` = real / imaginary part at antenna ``k``, zero
  based); every block is diagonal over devices, so only the N diagonal
  entries are stored: ``blocks[a, b, n]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SQRT_HALF = np.sqrt(0.5)


def generate_preambles(L: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """Draw an L x N preamble matrix with entries (+-1 +- 1j) * sqrt(2)/2."""
    if L < 1 or N < 1:
        raise ValueError(f"L and N must be positive, got L={L}, N={N}")
    re = rng.choice((-SQRT_HALF, SQRT_HALF), size=(L, N))
    im = rng.choice((-SQRT_HALF, SQRT_HALF), size=(L, N))
    return re + 1j * im


def real_expand_preamble(S: np.ndarray) -> np.ndarray:
    """Return S_hat = [[Re S, -Im S], [Im S, Re S]] (2L x 2N).

    The block-diagonal S_bar (M copies of S_hat) is never formed; see
    :func:`dense_block_diag` for the explicit version used by test oracles.
    """
    S = np.atleast_2d(np.asarray(S))
    return np.block([[S.real, -S.imag], [S.imag, S.real]])


def real_expand_received(Y: np.ndarray, L: int | None = None, M: int | None = None) -> np.ndarray:
    """Stack a complex L x M received block into ybar (length 2LM)."""
    Y = np.asarray(Y)
    if Y.ndim != 2:
        raise ValueError(f"Y must be 2-D (L x M), got shape {Y.shape}")
    if (L is not None and Y.shape[0] != L) or (M is not None and Y.shape[1] != M):
        raise ValueError(f"Y has shape {Y.shape}, expected ({L}, {M})")
    # (M, 2L): row m is [Re y_m, Im y_m]
    return np.concatenate([Y.real.T, Y.imag.T], axis=1).ravel()


def ybar_to_antenna_blocks(ybar: np.ndarray, M: int) -> np.ndarray:
    """View ybar as an (M, 2L) array, one row per antenna."""
    ybar = np.asarray(ybar, dtype=float)
    if ybar.size % (2 * M):
        raise ValueError(f"length {ybar.size} is not a multiple of 2M={2 * M}")
    return ybar.reshape(M, -1)


def dense_block_diag(block: np.ndarray, copies: int) -> np.ndarray:
    return np.kron(np.eye(copies), block)


def expand_gamma(gamma: np.ndarray, M: int) -> np.ndarray:
    """Diagonal of gamma_bar (length 2NM): [gamma, gamma] repeated M times."""
    gamma = np.asarray(gamma, dtype=float)
    return np.tile(np.concatenate([gamma, gamma]), M)


def theoretical_power(K: float, beta: float, sigma2: float) -> float:
    """Per-dimension power of ybar: K*beta/2 + sigma2/2."""
    return 0.5 * K * beta + 0.5 * sigma2


@dataclass(frozen=True)
class StackedCovariance:
    """Real channel covariance E[h_bar h_bar^T] stored as diagonal blocks.

    ``blocks`` has shape (2M, 2M, N). ``per_device`` keeps the complex
    M x M matrices it was built from.
    """

    per_device: np.ndarray
    blocks: np.ndarray
    iid: bool = False
    shared_real: bool = False
    _shared: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.blocks.shape[2]

    @property
    def M(self) -> int:
        return self.blocks.shape[0] // 2

    @property
    def shared(self) -> np.ndarray | None:
        """The common real M x M covariance when every device shares one."""
        return self._shared

    def block(self, a: int, b: int) -> np.ndarray:
        return self.blocks[a, b]

    def dense(self) -> np.ndarray:
        """Explicit 2NM x 2NM matrix (oracle use only)."""
        M2, _, N = self.blocks.shape
        out = np.zeros((M2 * N, M2 * N))
        idx = np.arange(N)
        for a in range(M2):
            for b in range(M2):
                out[a * N + idx, b * N + idx] = self.blocks[a, b]
        return out


def _check_cov(Cn: np.ndarray, n: int, tol: float = 1e-10) -> None:
    if Cn.ndim != 2 or Cn.shape[0] != Cn.shape[1]:
        raise ValueError(f"C_{n} must be square, got shape {Cn.shape}")
    if not np.allclose(Cn, Cn.conj().T, atol=tol):
        raise ValueError(f"C_{n} is not Hermitian")
    if not np.allclose(np.diag(Cn), 1.0, atol=tol):
        raise ValueError(f"C_{n} does not have a unit diagonal")


def build_stacked_covariance(per_device_cov) -> StackedCovariance:
    """Assemble C from the per-device covariances C_n.

    Block (2k+a, 2j+b) holds, for every device n, one half of entry
    (a*M + k, b*M + j) of C_bar_n = [[Re C_n, -Im C_n], [Im C_n, Re C_n]].
    """
    covs = np.asarray(per_device_cov, dtype=complex)
    if covs.ndim == 2:
        covs = covs[None]
    if covs.ndim != 3:
        raise ValueError("expected a list of square matrices")
    N, M, _ = covs.shape
    for n in range(N):
        _check_cov(covs[n], n)

    re, im = covs.real, covs.imag
    # quarter blocks of C_bar_n, each (N, M, M)
    quarters = ((re, -im), (im, re))
    blocks = np.empty((2 * M, 2 * M, N))
    for a in range(2):
        for b in range(2):
            # entry [k, j] of quarter (a, b) -> block (2k+a, 2j+b)
            blocks[a::2, b::2, :] = 0.5 * np.transpose(quarters[a][b], (1, 2, 0))

    eye = np.eye(M)
    iid = bool(np.allclose(covs, eye, atol=1e-14))
    shared_real = bool(np.allclose(covs, covs[0], atol=1e-14) and np.allclose(im, 0.0, atol=1e-14))
    shared = re[0].copy() if shared_real else None
    return StackedCovariance(covs, blocks, iid=iid, shared_real=shared_real, _shared=shared)


def iid_stacked_covariance(N: int, M: int) -> StackedCovariance:
    return build_stacked_covariance(np.broadcast_to(np.eye(M, dtype=complex), (N, M, M)))


@dataclass(frozen=True)
class ReceivedCovariance:
    """Covariance of ybar in one of three storage forms.

    ``structure`` is one of

    * ``"iid"``: ``blocks`` is a single 2L x 2L matrix repeated M times on
      the diagonal;
    * ``"kron"``: Sigma = (U x I) diag(blocks) (U x I)^T with ``blocks``
      of shape (M, 2L, 2L), obtained when all devices share one real
      antenna covariance with eigenvectors ``U``;
    * ``"dense"``: ``blocks`` is the full 2LM x 2LM matrix.
    """

    structure: str
    blocks: np.ndarray
    M: int
    U: np.ndarray | None = None

    def dense(self) -> np.ndarray:
        if self.structure == "dense":
            return self.blocks
        if self.structure == "iid":
            return dense_block_diag(self.blocks, self.M)
        T = np.kron(self.U, np.eye(self.blocks.shape[1]))
        D = np.zeros((T.shape[0], T.shape[0]))
        d = self.blocks.shape[1]
        for k in range(self.M):
            D[k * d:(k + 1) * d, k * d:(k + 1) * d] = self.blocks[k]
        return T @ D @ T.T

    def diagonal(self) -> np.ndarray:
        if self.structure == "iid":
            return np.tile(np.diag(self.blocks), self.M)
        return np.diag(self.dense())


def _kron_factors(C: StackedCovariance):
    lam, U = np.linalg.eigh(C.shared)
    return np.clip(lam, 0.0, None), U


def gram_blocks(S_hat: np.ndarray, C: StackedCovariance, gamma: np.ndarray) -> np.ndarray:
    """Noise-free Sigma as (M, 2L, M, 2L) via the per-block rule.

    Block (m, p) = sum_{a,b} S_hat_a diag(C[2m+a, 2p+b] * gamma) S_hat_b^T,
    where S_hat_a are the real/imaginary column halves of S_hat.
    """
    two_l, two_n = S_hat.shape
    N = two_n // 2
    M = C.M
    P = S_hat.reshape(two_l, 2, N)
    D = C.blocks.reshape(M, 2, M, 2, N) * np.asarray(gamma, dtype=float)
    return np.einsum("ian,xapbn,jbn->xipj", P, D, P, optimize=True)


def received_covariance(S, C: StackedCovariance | None, gamma, sigma2: float,
                        structure: str | None = None, M: int | None = None) -> ReceivedCovariance:
    """Covariance of ybar: S_bar C gamma_bar S_bar^T + sigma2/2 I.

    ``C=None`` (with the antenna count ``M``) or an i.i.d. ``C`` selects the
    single-block form. A ``C`` whose devices share one real covariance
    selects the Kronecker form. Pass ``structure="dense"`` to force the
    explicit matrix.
    """
    if sigma2 <= 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    S_hat = as_s_hat(S)
    gamma = np.asarray(gamma, dtype=float)
    two_l, two_n = S_hat.shape
    N = two_n // 2
    if gamma.shape != (N,):
        raise ValueError(f"gamma has shape {gamma.shape}, expected ({N},)")
    if C is not None and C.N != N:
        raise ValueError(f"C describes {C.N} devices, preambles {N}")
    if np.any(gamma < 0):
        raise ValueError("gamma must be nonnegative")

    noise = 0.5 * sigma2 * np.eye(two_l)
    base = 0.5 * (S_hat * np.concatenate([gamma, gamma])) @ S_hat.T
    if structure is None:
        if C is None or C.iid:
            structure = "iid"
        elif C.shared_real:
            structure = "kron"
        else:
            structure = "dense"
    if structure == "iid":
        if C is not None and not C.iid:
            raise ValueError("iid structure requested for a correlated C")
        M = C.M if C is not None else (M or 1)
        return ReceivedCovariance("iid", base + noise, M)
    if C is None:
        raise ValueError(f"structure {structure!r} needs a stacked covariance")
    if structure == "kron":
        lam, U = _kron_factors(C)
        blocks = lam[:, None, None] * base[None] + noise[None]
        return ReceivedCovariance("kron", blocks, C.M, U)
    G = gram_blocks(S_hat, C, gamma)
    M = C.M
    dense = G.reshape(M * two_l, M * two_l) + 0.5 * sigma2 * np.eye(M * two_l)
    return ReceivedCovariance("dense", dense, M)


def as_s_hat(S) -> np.ndarray:
    """Accept a complex preamble matrix or an already expanded real S_hat."""
    S = np.asarray(S)
    if np.iscomplexobj(S):
        return real_expand_preamble(S)
    if S.ndim != 2 or S.shape[0] % 2 or S.shape[1] % 2:
        raise ValueError(f"real input must be a 2L x 2N expansion, got shape {S.shape}")
    return S.astype(float, copy=False)
