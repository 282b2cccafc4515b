"""Dense float64 matrix kernels used throughout the package.

Right least-squares solves, inversion, the principal matrix square root and
norms.  All routines are pure functions of their arguments and reject
non-finite input up front.
"""

from __future__ import annotations

import numpy as np

# Condition ceiling: 1e-4 / machine epsilon (~4.5e11).  Beyond this the
# normal equations carry no trustworthy digits.
MAX_CONDITION = 1e-4 / np.finfo(float).eps

# Numerical floor for the normal equations, not a modeling regularizer.
RIDGE_SCALE = 1e-10


class RankDeficient(Exception):
    """Regressor Gram matrix is numerically singular (insufficient excitation)."""


class Singular(Exception):
    """Matrix is numerically singular."""


class NoPrincipalRoot(Exception):
    """Square-root iteration diverged; spectrum touches the negative real axis."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert to a finite float64 2-D array."""
    arr = np.asarray(a, dtype=float)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf entries")
    return arr


def frob(M) -> float:
    """Frobenius norm."""
    return float(np.linalg.norm(as_matrix(M)))


def norm2_est(M, tol: float = 1e-6, max_iter: int = 500) -> float:
    """Spectral norm via power iteration on M^T M (well within 1% relative)."""
    A = as_matrix(M)
    if not A.any():
        return 0.0
    rng = np.random.default_rng(0x5EED)
    v = rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = A @ v
        sigma_new = float(np.linalg.norm(w))
        if sigma_new == 0.0:
            # restart away from the null space
            v = rng.standard_normal(A.shape[1])
            v /= np.linalg.norm(v)
            continue
        v = A.T @ w
        v /= np.linalg.norm(v)
        if abs(sigma_new - sigma) <= tol * sigma_new:
            return sigma_new
        sigma = sigma_new
    return sigma


def lstsq_right(Y, X) -> np.ndarray:
    """Minimizer K of ||Y - K X||_F for row-spanning X.

    Solved through the normal equations K = Y X^T (X X^T)^-1 with a tiny
    trace-scaled ridge as a round-off floor.  Raises RankDeficient when the
    Gram matrix X X^T is numerically singular, which in practice signals
    insufficient excitation in the data columns.
    """
    Y = as_matrix(Y, "Y")
    X = as_matrix(X, "X")
    q, s = X.shape
    if Y.shape[1] != s:
        raise ValueError(f"column mismatch: Y has {Y.shape[1]}, X has {s}")
    if s < q:
        raise ValueError(f"need at least {q} columns, got {s}")
    G = X @ X.T
    cond = np.linalg.cond(G)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise RankDeficient(f"Gram matrix condition {cond:.3e} exceeds {MAX_CONDITION:.3e}")
    lam = RIDGE_SCALE * np.trace(G) / q
    return np.linalg.solve(G + lam * np.eye(q), X @ Y.T).T


def inv(M) -> np.ndarray:
    """Inverse of a well-conditioned square matrix.

    One Newton refinement step polishes the solve so the residual
    M inv(M) - I stays near the floating-point floor.
    """
    A = as_matrix(M)
    n, n2 = A.shape
    if n != n2:
        raise ValueError(f"matrix must be square, got {A.shape}")
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise Singular(f"condition estimate {cond:.3e} exceeds {MAX_CONDITION:.3e}")
    X = np.linalg.solve(A, np.eye(n))
    X = X + X @ (np.eye(n) - A @ X)
    return X


def sqrtm_principal(M, tol: float = 1e-12, max_iter: int = 100) -> np.ndarray:
    """Principal square root by the Denman-Beavers iteration.

    Determinant-based scaling accelerates convergence; the iteration is pure
    real arithmetic.  Divergence or a bad squaring residual raises
    NoPrincipalRoot, the symptom of an eigenvalue on (or hugging) the closed
    negative real axis.
    """
    A = as_matrix(M)
    n, n2 = A.shape
    if n != n2:
        raise ValueError(f"matrix must be square, got {A.shape}")
    norm_A = np.linalg.norm(A)
    Y = A.copy()
    Z = np.eye(n)
    for _ in range(max_iter):
        sy, ldy = np.linalg.slogdet(Y)
        sz, ldz = np.linalg.slogdet(Z)
        if sy * sz > 0 and np.isfinite(ldy) and np.isfinite(ldz):
            gamma = np.exp(-(ldy + ldz) / (2 * n))
        else:
            gamma = 1.0
        try:
            Zi = np.linalg.inv(gamma * Z)
            Yi = np.linalg.inv(gamma * Y)
        except np.linalg.LinAlgError as exc:
            raise NoPrincipalRoot(f"iteration broke down: {exc}") from exc
        Y_next = 0.5 * (gamma * Y + Zi)
        Z_next = 0.5 * (gamma * Z + Yi)
        if not (np.all(np.isfinite(Y_next)) and np.all(np.isfinite(Z_next))):
            raise NoPrincipalRoot("iteration produced non-finite values")
        delta = np.linalg.norm(Y_next - Y) / max(np.linalg.norm(Y), np.finfo(float).tiny)
        Y, Z = Y_next, Z_next
        if delta < tol:
            break
    residual = np.linalg.norm(Y @ Y - A) / max(norm_A, np.finfo(float).tiny)
    if not np.isfinite(residual) or residual > 1e-8:
        raise NoPrincipalRoot(f"squaring residual {residual:.3e} after iteration")
    return Y
