"""Rank-k truncation of value matrices and the subspace metrics built on it.

Everything goes through the N x N Gram matrix ``M.T @ M``. The value
matrices here are tall (many states, few tasks), so a symmetric eigensolve
of the Gram matrix is much cheaper than a full SVD of ``M``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative threshold on sigma_r / sigma_1 below which a rank is not "effective".
EFFECTIVE_RANK_RTOL = 1e-10


@dataclass(frozen=True)
class TruncatedSvd:
    left_factors: np.ndarray  # d x k, orthonormal columns
    singular_values: np.ndarray  # length k, nonincreasing
    right_factors: np.ndarray  # N x k, orthonormal columns

    @property
    def rank(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self) -> np.ndarray:
        return (self.left_factors * self.singular_values) @ self.right_factors.T


@dataclass(frozen=True)
class SubspaceComplement:
    """Orthonormal basis (N x (N - rank)) of the complement of a top-``rank`` row space."""

    basis: np.ndarray
    rank: int


def _check_matrix(M, k: int) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] < 1 or M.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D matrix, got shape {M.shape}")
    if not 1 <= k <= M.shape[1]:
        raise ValueError(f"k={k} outside [1, {M.shape[1]}]")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix contains non-finite entries")
    return M


def _gram_eigh(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of M^T M sorted by decreasing eigenvalue."""
    evals, evecs = np.linalg.eigh(M.T @ M)
    return evals[::-1], evecs[:, ::-1]


def _canonical_signs(right: np.ndarray) -> np.ndarray:
    # +1/-1 per column so the largest-|.| entry (first on ties) is nonnegative
    idx = np.argmax(np.abs(right), axis=0)
    signs = np.sign(right[idx, np.arange(right.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def truncated_svd(M, k: int) -> TruncatedSvd:
    """Top-``k`` singular triples of ``M``.

    The right factors come from the Gram eigensolve. ``M @ H`` is then
    re-orthogonalized with a thin QR and a k x k SVD, which keeps the left
    factors orthonormal even when some of the retained singular values are
    zero. Signs are fixed so the largest-magnitude entry of each right
    singular vector is nonnegative.

    A d x N matrix has only ``min(d, N)`` singular triples, so for ``k > d``
    the result holds ``d`` of them; ``project_rank_k`` is unaffected.
    """
    M = _check_matrix(M, k)
    _, evecs = _gram_eigh(M)
    H = evecs[:, :k]
    Q, R = np.linalg.qr(M @ H)
    u_small, sigma, wt = np.linalg.svd(R, full_matrices=False)
    U = Q @ u_small
    H = H @ wt.T
    signs = _canonical_signs(H)
    return TruncatedSvd(
        left_factors=U * signs,
        singular_values=sigma,
        right_factors=H * signs,
    )


def top_right_factors(M, k: int) -> np.ndarray:
    """Top-``k`` right singular vectors of ``M`` (unsigned)."""
    M = _check_matrix(M, k)
    return _gram_eigh(M)[1][:, :k]


def project_rank_k(M, k: int) -> np.ndarray:
    """Best rank-``k`` approximation ``M @ H_k @ H_k.T`` of ``M``.

    ``k == N`` returns an exact copy of ``M``: the projector is the identity and
    skipping the round trip keeps full-rank TSVD bit-identical to plain TD.
    """
    M = _check_matrix(M, k)
    if k == M.shape[1]:
        return M.copy()
    H = _gram_eigh(M)[1][:, :k]
    return (M @ H) @ H.T


def row_space_complement(M, r: int) -> SubspaceComplement:
    M = np.asarray(M, dtype=float)
    N = M.shape[1]
    if r >= N:
        raise ValueError(
            f"rank r={r} leaves an empty complement for N={N}; use empty_complement()"
        )
    M = _check_matrix(M, r)
    evals, evecs = _gram_eigh(M)
    sigma = np.sqrt(np.clip(evals, 0.0, None))
    if not sigma[r - 1] > EFFECTIVE_RANK_RTOL * sigma[0]:
        raise ValueError(
            f"matrix has effective rank below r={r} "
            f"(sigma_r/sigma_1 = {sigma[r - 1] / max(sigma[0], 1e-300):.3e})"
        )
    return SubspaceComplement(basis=np.ascontiguousarray(evecs[:, r:]), rank=r)


def empty_complement(N: int) -> SubspaceComplement:
    """Zero-width complement for the full-rank case r == N."""
    return SubspaceComplement(basis=np.zeros((N, 0)), rank=N)


def misalignment(V, C: SubspaceComplement) -> float:
    """Squared Frobenius mass of ``V`` outside the retained row space."""
    V = np.asarray(V, dtype=float)
    if V.shape[1] != C.basis.shape[0]:
        raise ValueError(
            f"V has {V.shape[1]} columns but complement lives in R^{C.basis.shape[0]}"
        )
    if C.basis.shape[1] == 0:
        return 0.0
    # ||V B B^T||_F == ||V B||_F since B has orthonormal columns
    VB = V @ C.basis
    return float(np.sum(VB * VB))


def frobenius_mse(A, B) -> float:
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    diff = A - B
    return float(np.sum(diff * diff) / diff.size)
