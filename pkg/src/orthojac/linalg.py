"""Dense float64 kernels, seeded orthogonal matrices, and a Jacobi SVD.

Matrices are row-major C-contiguous float64 ``numpy.ndarray`` objects and
vectors are 1-D float64 arrays.  The helpers here add the shape/finiteness
validation the rest of the package relies on; products delegate to numpy.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DimensionError
from .rng import SplitMix64

JACOBI_TOL = 1e-14
JACOBI_MAX_SWEEPS = 60


def as_matrix(obj, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Validate and convert ``obj`` to a 2-D finite float64 array."""
    m = np.ascontiguousarray(obj, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise DimensionError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise DimensionError(f"expected {cols} columns, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise DimensionError("matrix contains non-finite entries")
    return m


def as_vector(obj, size: int | None = None) -> np.ndarray:
    """Validate and convert ``obj`` to a 1-D finite float64 array."""
    v = np.ascontiguousarray(obj, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"expected a vector, got ndim={v.ndim}")
    if size is not None and v.shape[0] != size:
        raise DimensionError(f"expected length {size}, got {v.shape[0]}")
    if not np.all(np.isfinite(v)):
        raise DimensionError("vector contains non-finite entries")
    return v


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with explicit inner-dimension check."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Matrix-vector product with explicit dimension check."""
    if a.ndim != 2 or x.ndim != 1:
        raise DimensionError("matvec expects a matrix and a vector")
    if a.shape[1] != x.shape[0]:
        raise DimensionError(f"incompatible shapes: {a.shape} @ {x.shape}")
    return a @ x


def transpose(a: np.ndarray) -> np.ndarray:
    """Transposed copy (keeps results C-contiguous)."""
    if a.ndim != 2:
        raise DimensionError("transpose expects a matrix")
    return np.ascontiguousarray(a.T)


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """alpha * x + y for same-shaped arrays."""
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def frobenius_defect(m: np.ndarray) -> float:
    """Frobenius distance ``||M M^T - I||_F`` from orthogonality."""
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"expected a square matrix, got {m.shape}")
    gram = m @ m.T
    gram[np.diag_indices_from(gram)] -= 1.0
    return float(np.sqrt(np.sum(gram * gram)))


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """QR factorization by Householder reflections.

    Returns (Q, R) with Q orthogonal and R upper triangular.  Loop order
    is fixed, so results are deterministic for identical inputs.
    """
    a = as_matrix(a)
    m, n = a.shape
    r = a.copy()
    q = np.eye(m)
    for j in range(min(m, n)):
        x = r[j:, j]
        norm_x = float(np.sqrt(np.sum(x * x)))
        if norm_x == 0.0:
            continue
        v = x.copy()
        # Reflect onto -sign(x0)*e1 to avoid cancellation.
        v[0] += norm_x if v[0] >= 0.0 else -norm_x
        beta = 2.0 / float(np.sum(v * v))
        r[j:, j:] -= beta * np.outer(v, v @ r[j:, j:])
        q[:, j:] -= beta * np.outer(q[:, j:] @ v, v)
    return q, r


def random_orthogonal(n: int, seed: int) -> np.ndarray:
    """Seeded random orthogonal matrix, unique per (n, seed).

    A standard-Gaussian matrix is drawn from the SplitMix64 stream for
    ``seed`` (row-major fill), QR-factorized by Householder reflections,
    and the columns of Q are sign-flipped so the diagonal of R is
    positive, which makes the factorization (and hence the result)
    unambiguous.
    """
    if n < 1:
        raise DimensionError(f"matrix size must be positive, got {n}")
    g = SplitMix64(seed).gaussian_matrix(n, n)
    q, r = householder_qr(g)
    # sign(0) := +1
    signs = np.where(np.diag(r) >= 0.0, 1.0, -1.0)
    return np.ascontiguousarray(q * signs[np.newaxis, :])


def svd_values(
    m: np.ndarray,
    tol: float = JACOBI_TOL,
    max_sweeps: int = JACOBI_MAX_SWEEPS,
) -> np.ndarray:
    """Singular values by one-sided Jacobi, sorted descending.

    Columns are rotated pairwise until every off-diagonal inner product
    satisfies ``|a_p . a_q| <= tol * ||a_p|| * ||a_q||``; singular values
    are the final column norms.  Raises ConvergenceError (carrying the
    worst relative off-diagonal) if the sweep cap is hit.
    """
    a = as_matrix(m).copy()
    if a.shape[0] < a.shape[1]:
        a = np.ascontiguousarray(a.T)
    rows, cols = a.shape
    if cols == 0:
        return np.empty(0)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                ap = a[:, p]
                aq = a[:, q]
                app = float(ap @ ap)
                aqq = float(aq @ aq)
                apq = float(ap @ aq)
                if abs(apq) <= tol * np.sqrt(app * aqq):
                    continue
                rotated = True
                zeta = (aqq - app) / (2.0 * apq)
                if zeta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cs = 1.0 / np.sqrt(1.0 + t * t)
                sn = cs * t
                new_p = cs * ap - sn * aq
                new_q = sn * ap + cs * aq
                a[:, p] = new_p
                a[:, q] = new_q
        if not rotated:
            break
    else:
        worst = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                denom = np.sqrt(float(a[:, p] @ a[:, p]) * float(a[:, q] @ a[:, q]))
                if denom > 0.0:
                    worst = max(worst, abs(float(a[:, p] @ a[:, q])) / denom)
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge in {max_sweeps} sweeps", worst
        )
    values = np.sqrt(np.sum(a * a, axis=0))
    return np.sort(values)[::-1].copy()
