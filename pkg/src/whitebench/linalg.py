"""Dense symmetric linear-algebra kernels.

Everything downstream (whitening fits, the 2-D theory checks, the ridge
solve inside LIME) runs on matrices of at most a few hundred rows, so the
eigendecomposition is a cyclic Jacobi iteration: short, dependency-free,
and very accurate at this size. All routines work on float64 numpy arrays
and return freshly allocated results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Absolute threshold below which a minimum eigenvalue triggers diagonal
# regularization of a covariance-like matrix.
SPD_EIGENVALUE_THRESHOLD = 1e-16


class NonFiniteError(ValueError):
    """Input contains NaN or infinity."""


class NotSPDError(ArithmeticError):
    """Matrix is not symmetric positive definite where it must be."""


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenvalues (descending) and matching orthonormal eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def _as_symmetric(m, name="matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
        raise ValueError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError(f"{name} has non-finite entries")
    scale = np.abs(m).max()
    if np.abs(m - m.T).max() > 1e-8 * max(scale, 1.0):
        raise ValueError(f"{name} is not symmetric")
    # Exact symmetry keeps the Jacobi sweeps well behaved.
    return 0.5 * (m + m.T)


def sym_eig(m, tol_factor: float = 1e-12, max_sweeps: int = 64) -> EigenDecomposition:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate away every off-diagonal pair (p, q) in turn until the
    off-diagonal Frobenius norm drops below ``tol_factor`` times the
    Frobenius norm of the input. Eigenvalues come back sorted descending,
    ties broken by first occurrence; eigenvector columns match the order.
    """
    a = _as_symmetric(m)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if n == 1 or norm == 0.0:
        return EigenDecomposition(np.diag(a).copy(), v)
    threshold = tol_factor * norm

    for _ in range(max_sweeps):
        off_diag = a - np.diag(np.diag(a))
        if np.linalg.norm(off_diag) <= threshold:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app, aqq = a[p, p], a[q, q]
                # Entries that no longer matter at working precision are
                # zeroed outright; rotating on them only stirs noise.
                if abs(app) + 100.0 * abs(apq) == abs(app) and abs(aqq) + 100.0 * abs(apq) == abs(aqq):
                    a[p, q] = 0.0
                    a[q, p] = 0.0
                    continue
                tau = (aqq - app) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                elif tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # Similarity transform on columns then rows of the pair.
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ArithmeticError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")

    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    return EigenDecomposition(values[order], v[:, order])


def regularize_spd(m) -> np.ndarray:
    """Pad the diagonal just enough to push the spectrum clear of zero.

    If the minimum eigenvalue falls below ``SPD_EIGENVALUE_THRESHOLD`` the
    matrix gains ``(|lambda_min| + pad) * I`` with a pad of 1e-12 scaled by
    the mean diagonal magnitude (so the rule is dimensionless). Matrices
    that are already safely positive definite come back unchanged.
    """
    m = _as_symmetric(m)
    lam_min = sym_eig(m).eigenvalues[-1]
    if lam_min >= SPD_EIGENVALUE_THRESHOLD:
        return m
    pad = 1e-12 * max(1.0, np.trace(m) / m.shape[0])
    return m + (abs(lam_min) + pad) * np.eye(m.shape[0])


def inv_sqrt(m) -> np.ndarray:
    """Symmetric inverse square root ``R`` with ``R m R = I``.

    Requires a positive definite input; regularize first if the spectrum
    may touch zero.
    """
    decomp = sym_eig(m)
    lam = decomp.eigenvalues
    if lam[-1] <= 0.0:
        raise NotSPDError(f"matrix has eigenvalue {lam[-1]:.3e} <= 0")
    u = decomp.eigenvectors
    r = (u / np.sqrt(lam)) @ u.T
    return 0.5 * (r + r.T)


def cholesky(m) -> np.ndarray:
    """Lower-triangular ``L`` with positive diagonal and ``L L^T = m``."""
    a = _as_symmetric(m)
    n = a.shape[0]
    low = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - low[j, :j] @ low[j, :j]
        if d <= 0.0:
            raise NotSPDError(f"leading minor {j + 1} is not positive definite")
        low[j, j] = np.sqrt(d)
        if j + 1 < n:
            low[j + 1 :, j] = (a[j + 1 :, j] - low[j + 1 :, :j] @ low[j, :j]) / low[j, j]
    return low


def solve_lower(low, b) -> np.ndarray:
    """Forward substitution: solve ``low @ x = b`` for lower-triangular ``low``."""
    low = np.asarray(low, dtype=np.float64)
    x = np.array(b, dtype=np.float64)
    vector = x.ndim == 1
    if vector:
        x = x[:, None]
    for i in range(low.shape[0]):
        if i:
            x[i] -= low[i, :i] @ x[:i]
        x[i] /= low[i, i]
    return x[:, 0] if vector else x


def lower_inverse(low) -> np.ndarray:
    """Inverse of a lower-triangular matrix (itself lower triangular)."""
    return solve_lower(low, np.eye(np.asarray(low).shape[0]))


def solve_spd(m, b) -> np.ndarray:
    """Solve ``m @ x = b`` for symmetric positive definite ``m`` via Cholesky."""
    low = cholesky(m)
    y = solve_lower(low, b)
    # Back substitution with L^T, reusing the forward solver on reversed axes.
    rev = solve_lower(low.T[::-1, ::-1], np.asarray(y, dtype=np.float64)[::-1])
    return rev[::-1]


def spd_inverse(m) -> np.ndarray:
    inv = solve_spd(m, np.eye(np.asarray(m).shape[0]))
    return 0.5 * (inv + inv.T)


def pseudo_inverse(a, rcond: float = 1e-12) -> np.ndarray:
    """Moore-Penrose pseudo-inverse via eigendecomposition of ``a^T a``.

    Singular values below ``rcond`` times the largest are treated as zero,
    which is what makes the rank-deficient regressions in the partial
    whitening well defined.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError("input has non-finite entries")
    gram = a.T @ a
    decomp = sym_eig(0.5 * (gram + gram.T))
    lam = np.clip(decomp.eigenvalues, 0.0, None)
    sigma = np.sqrt(lam)
    if sigma[0] == 0.0:
        return np.zeros((a.shape[1], a.shape[0]))
    keep = sigma > rcond * sigma[0]
    u = decomp.eigenvectors[:, keep]
    return (u / lam[keep]) @ u.T @ a.T
