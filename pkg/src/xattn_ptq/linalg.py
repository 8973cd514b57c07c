"""Dense real linear algebra used by the compensation solvers.

Every routine takes and returns float64 ``numpy`` arrays. Matrices are plain
2-D arrays; there is no wrapper class.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ContractError, IllConditionedError, NumericError, ShapeError

SYMMETRY_RTOL = 1e-10


class SymEig(NamedTuple):
    eigenvalues: np.ndarray  # ascending
    eigenvectors: np.ndarray  # orthonormal columns


class SvdResult(NamedTuple):
    u: np.ndarray
    singular_values: np.ndarray  # descending
    vt: np.ndarray


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractError(f"{name} has non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def _require_symmetric(m: np.ndarray, name: str) -> np.ndarray:
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")
    asym = np.linalg.norm(m - m.T)
    if asym > SYMMETRY_RTOL * np.linalg.norm(m):
        raise ContractError(f"{name} is not symmetric (|M - M^T|_F = {asym:.3e})")
    return 0.5 * (m + m.T)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of every column made positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def jacobi_eigh(m: np.ndarray, max_sweeps: int = 60) -> SymEig:
    """Cyclic Jacobi eigensolver for a symmetric matrix.

    Slow compared to LAPACK but short and fully deterministic; it is kept as
    an independent route for cross-checking :func:`sym_eig`.
    """
    a = np.array(m, dtype=np.float64, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n < 2 or scale == 0.0:
        return _sorted_eig(np.diag(a).copy(), v)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off <= 1e-15 * scale:
            return _sorted_eig(np.diag(a).copy(), v)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")


def _sorted_eig(d: np.ndarray, v: np.ndarray) -> SymEig:
    order = np.argsort(d, kind="stable")
    return SymEig(d[order], _fix_signs(v[:, order]))


def sym_eig(m, method: str = "lapack") -> SymEig:
    """Eigendecomposition of a symmetric matrix, eigenvalues ascending."""
    m = _require_symmetric(as_matrix(m, "m"), "m")
    if method == "jacobi":
        return jacobi_eigh(m)
    if method != "lapack":
        raise ContractError(f"unknown eigensolver {method!r}")
    try:
        d, v = np.linalg.eigh(m)
    except np.linalg.LinAlgError as exc:
        raise NumericError(str(exc)) from exc
    return _sorted_eig(d, v)


def svd(m) -> SvdResult:
    m = as_matrix(m, "m")
    try:
        u, sv, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(str(exc)) from exc
    if u.size:
        idx = np.argmax(np.abs(u), axis=0)
        signs = np.sign(u[idx, np.arange(u.shape[1])])
        signs[signs == 0] = 1.0
        u = u * signs
        vt = vt * signs[:, None]
    return SvdResult(u, sv, vt)


def solve_sylvester(a, b, c) -> np.ndarray:
    """Solve ``a @ X + X @ b = c`` for symmetric ``a`` (n x n) and ``b`` (m x m).

    Both operands are diagonalised, after which the equation decouples
    elementwise: ``X'_ij = C'_ij / (d_i + e_j)``.
    """
    a = _require_symmetric(as_matrix(a, "a"), "a")
    b = _require_symmetric(as_matrix(b, "b"), "b")
    c = as_matrix(c, "c")
    if c.shape != (a.shape[0], b.shape[0]):
        raise ShapeError(f"c must be {(a.shape[0], b.shape[0])}, got {c.shape}")
    d, u = sym_eig(a)
    e, v = sym_eig(b)
    denom = d[:, None] + e[None, :]
    gap = float(np.min(np.abs(denom))) if denom.size else np.inf
    if gap <= 1e-12:
        raise IllConditionedError(
            f"eigenvalue pair sums to {gap:.3e}; Sylvester operator is near-singular", gap
        )
    return u @ ((u.T @ c @ v) / denom) @ v.T


def solve_generalized_sylvester(lam: float, g, b, c) -> np.ndarray:
    """Solve ``lam * X + g @ X @ b = c`` for PSD ``g`` and ``b`` without inverting ``g``.

    With ``g = U D U^T`` and ``b = V E V^T`` the rotated unknown satisfies
    ``(lam + d_i e_j) X'_ij = C'_ij``, which is well posed for any ``lam > 0``
    even when ``g`` is singular.
    """
    if not lam > 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    g = _require_symmetric(as_matrix(g, "g"), "g")
    b = _require_symmetric(as_matrix(b, "b"), "b")
    c = as_matrix(c, "c")
    if c.shape != (g.shape[0], b.shape[0]):
        raise ShapeError(f"c must be {(g.shape[0], b.shape[0])}, got {c.shape}")
    d, u = sym_eig(g)
    e, v = sym_eig(b)
    denom = lam + d[:, None] * e[None, :]
    if denom.size and np.min(denom) <= 0:
        raise IllConditionedError("operands are not PSD enough for the given lambda", float(np.min(denom)))
    return u @ ((u.T @ c @ v) / denom) @ v.T


def ridge_solve(h, lam: float, rhs) -> np.ndarray:
    """Return ``(h + lam I)^{-1} rhs`` for symmetric PSD ``h``."""
    if not lam > 0:
        raise ContractError(f"lambda must be positive, got {lam}")
    h = _require_symmetric(as_matrix(h, "h"), "h")
    rhs = as_matrix(rhs, "rhs")
    if rhs.shape[0] != h.shape[0]:
        raise ShapeError(f"rhs has {rhs.shape[0]} rows, h is {h.shape}")
    d, u = sym_eig(h)
    denom = d + lam
    if np.min(denom) <= 0:
        raise IllConditionedError("h + lam I is not positive definite", float(np.min(denom)))
    return u @ ((u.T @ rhs) / denom[:, None])


def sylvester_residual(a, b, c, x) -> float:
    return float(np.linalg.norm(a @ x + x @ b - c))
