"""Dense tensor kernel: contraction and the matrix factorizations used everywhere else.

Tensors are plain C-ordered :class:`numpy.ndarray` objects; leg order is the
axis order and the data layout is row-major.  Real (``float64``) and complex
(``complex128``) tensors share every routine here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import ContractShapeError, DegenerateMetricError, NumericError

__all__ = [
    "SvdResult",
    "contract",
    "svd_truncated",
    "qr",
    "eigh_hermitian",
    "pinv_from_eigh",
    "pinv_hermitian",
    "hermitize",
]


def contract(a: np.ndarray, b: np.ndarray, pairs: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum over the paired legs of ``a`` and ``b``.

    The result carries the unpaired legs of ``a`` (in order) followed by the
    unpaired legs of ``b``.  Internally the operands are permuted so the summed
    legs are adjacent, flattened to matrices and multiplied with one GEMM.

    Parameters
    ----------
    a, b : ndarray
        Operands.
    pairs : sequence of (int, int)
        ``(leg_of_a, leg_of_b)`` pairs to contract.

    Raises
    ------
    ContractShapeError
        If a paired leg has mismatched dimensions or a leg is paired twice.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    legs_a = [int(i) % a.ndim if a.ndim else int(i) for i, _ in pairs]
    legs_b = [int(j) % b.ndim if b.ndim else int(j) for _, j in pairs]
    if len(set(legs_a)) != len(legs_a) or len(set(legs_b)) != len(legs_b):
        raise ContractShapeError(f"leg paired twice in {pairs}")
    for i, j in zip(legs_a, legs_b):
        if a.shape[i] != b.shape[j]:
            raise ContractShapeError(
                f"leg {i} of a (dim {a.shape[i]}) != leg {j} of b (dim {b.shape[j]})"
            )
    free_a = [i for i in range(a.ndim) if i not in legs_a]
    free_b = [j for j in range(b.ndim) if j not in legs_b]
    k = int(np.prod([a.shape[i] for i in legs_a], dtype=np.int64))
    ma = np.ascontiguousarray(a.transpose(free_a + legs_a)).reshape(-1, k)
    mb = np.ascontiguousarray(b.transpose(legs_b + free_b)).reshape(k, -1)
    out = ma @ mb
    return out.reshape([a.shape[i] for i in free_a] + [b.shape[j] for j in free_b])


@dataclass(frozen=True)
class SvdResult:
    """Truncated SVD ``m ~= u @ diag(s) @ v.conj().T``.

    ``u`` and ``v`` have orthonormal columns, ``s`` is non-increasing and
    ``truncation_weight`` is the discarded fraction of ``sum(s**2)``.
    """

    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    truncation_weight: float

    @property
    def rank(self) -> int:
        return len(self.s)


def _check_finite(m: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(m)):
        raise NumericError(f"non-finite entries in {what}")


def _svd(m: np.ndarray):
    try:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesdd", check_finite=False)
    except np.linalg.LinAlgError:
        return scipy.linalg.svd(m, full_matrices=False, lapack_driver="gesvd", check_finite=False)


def svd_truncated(m: np.ndarray, max_rank: int, rel_cutoff: float = 0.0) -> SvdResult:
    """SVD of a matrix keeping at most ``max_rank`` singular values.

    Values not exceeding ``rel_cutoff * s[0]`` are dropped as well, but at
    least one value is always kept.  Ties at the boundary are broken by LAPACK
    order, so exactly ``max_rank`` values survive.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"svd_truncated expects a matrix, got shape {m.shape}")
    if max_rank < 1:
        raise ValueError("max_rank must be >= 1")
    _check_finite(m, "svd input")
    u, s, vh = _svd(m)
    keep = min(max_rank, len(s))
    if rel_cutoff > 0 and len(s):
        keep = min(keep, int(np.count_nonzero(s > rel_cutoff * s[0])))
    keep = max(keep, 1)
    total = float(np.sum(s**2))
    weight = float(np.sum(s[keep:] ** 2)) / total if total > 0 else 0.0
    return SvdResult(
        u=np.ascontiguousarray(u[:, :keep]),
        s=s[:keep].copy(),
        v=np.ascontiguousarray(vh[:keep].conj().T),
        truncation_weight=weight,
    )


def qr(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR: ``q`` has orthonormal columns and ``q @ r == m``."""
    m = np.asarray(m)
    _check_finite(m, "qr input")
    q, r = np.linalg.qr(m, mode="reduced")
    return q, r


def hermitize(g: np.ndarray) -> np.ndarray:
    """Return ``(g + g^dagger) / 2``."""
    return 0.5 * (g + g.conj().T)


def eigh_hermitian(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix, eigenvalues ascending."""
    _check_finite(g, "eigh input")
    try:
        return scipy.linalg.eigh(g, check_finite=False, driver="evd")
    except np.linalg.LinAlgError:
        return scipy.linalg.eigh(g, check_finite=False, driver="ev")


def pinv_from_eigh(w: np.ndarray, v: np.ndarray, tol: float) -> np.ndarray:
    """Pseudo-inverse from an eigendecomposition ``g = v diag(w) v^dagger``.

    Eigenvalues below ``tol * max(w)`` are discarded; this also removes every
    negative eigenvalue, i.e. the metric is projected to the PSD cone first.
    """
    lam_max = float(np.max(w)) if len(w) else 0.0
    if not lam_max > 0:
        raise DegenerateMetricError("metric has no positive eigenvalue")
    keep = w >= tol * lam_max
    if not np.any(keep):
        raise DegenerateMetricError(f"no eigenvalue above tol={tol:g} * lambda_max")
    vk = v[:, keep]
    return (vk / w[keep]) @ vk.conj().T


def pinv_hermitian(g: np.ndarray, tol: float) -> np.ndarray:
    """Pseudo-inverse of a Hermitian (PSD) matrix with a relative eigenvalue cutoff."""
    w, v = eigh_hermitian(np.asarray(g))
    return pinv_from_eigh(w, v, tol)
