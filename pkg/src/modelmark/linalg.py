"""Dense SVD, Moore-Penrose pseudoinverse and minimum-norm least squares.

The SVD is a one-sided (Hestenes) Jacobi iteration. Column pairs are visited
in round-robin tournament order, so every round rotates n/2 disjoint pairs at
once and can be done with whole-array numpy operations; one sweep is n-1
rounds and touches every pair exactly once. Tall inputs are first reduced to
their triangular factor by Householder QR, and Jacobi runs on that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NoConvergence, NonFiniteValue

EPS = np.finfo(np.float64).eps
OFF_DIAGONAL_TOL = 1e-12
MAX_SWEEPS = 60


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray  # [m, k]
    singular_values: np.ndarray  # [k], descending
    Vt: np.ndarray  # [k, n]

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.singular_values) @ self.Vt


def _as_matrix(A) -> np.ndarray:
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise NonFiniteValue("matrix has NaN or Inf entries")
    return A


def _tournament(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Round-robin schedule: n-1 rounds of disjoint (p, q) pairs covering all pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        pairs = [(players[i], players[size - 1 - i]) for i in range(size // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_tall(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the columns of A (m >= n); returns (G, V) with A V = G."""
    m, n = A.shape
    # row j holds [column j of G | column j of V]; pair gathers stay contiguous
    W = np.hstack([A.T, np.eye(n)])
    if n < 2:
        return W[:, :m].T, W[:, m:].T
    floor = (EPS * np.linalg.norm(A)) ** 2
    rounds = _tournament(n)
    for _ in range(MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            Wp, Wq = W[p], W[q]
            Gp, Gq = Wp[:, :m], Wq[:, :m]
            alpha = np.einsum("ij,ij->i", Gp, Gp)
            beta = np.einsum("ij,ij->i", Gq, Gq)
            gamma = np.einsum("ij,ij->i", Gp, Gq)
            active = (np.abs(gamma) > OFF_DIAGONAL_TOL * np.sqrt(alpha * beta)) & (np.abs(gamma) > floor)
            if not active.any():
                continue
            rotated = True
            if not active.all():
                p, q, Wp, Wq = p[active], q[active], Wp[active], Wq[active]
                alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = (1.0 / np.sqrt(1.0 + t * t))[:, None]
            s = c * t[:, None]
            W[p], W[q] = c * Wp - s * Wq, s * Wp + c * Wq
        if not rotated:
            return W[:, :m].T, W[:, m:].T
    raise NoConvergence(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps")


def _householder_qr(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall matrix: A = Q R, Q [m, n] orthonormal, R [n, n] upper."""
    m, n = A.shape
    R = A.copy()
    vs = []
    for k in range(n):
        x = R[k:, k]
        norm = np.linalg.norm(x)
        v = x.copy()
        v[0] += norm if x[0] >= 0 else -norm
        vnorm = np.linalg.norm(v)
        if vnorm > 0:
            v /= vnorm
            R[k:, k:] -= 2.0 * np.outer(v, v @ R[k:, k:])
        vs.append(v)
    Q = np.eye(m, n)
    for k in range(n - 1, -1, -1):
        v = vs[k]
        Q[k:, k:] -= 2.0 * np.outer(v, v @ Q[k:, k:])
    return Q, np.triu(R[:n])


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of U not in ``keep`` with an orthonormal completion."""
    out = U.copy()
    basis = U[:, keep]
    for j in np.flatnonzero(~keep):
        # project the standard basis off the current span; take the largest residual
        R = np.eye(U.shape[0])
        for _ in range(2):
            R -= basis @ (basis.T @ R)
        norms = np.linalg.norm(R, axis=0)
        best = int(np.argmax(norms))
        out[:, j] = R[:, best] / norms[best]
        basis = np.column_stack([basis, out[:, j]])
    return out


def svd(A) -> SvdResult:
    """Thin SVD, singular values sorted in descending order."""
    A = _as_matrix(A)
    m, n = A.shape
    if m < n:
        r = svd(A.T)
        return SvdResult(r.Vt.T.copy(), r.singular_values, r.U.T.copy())
    if n == 0:
        return SvdResult(np.zeros((m, 0)), np.zeros(0), np.zeros((0, 0)))
    Q = None
    if m > n:
        Q, A = _householder_qr(A)
    G, V = _jacobi_tall(A)
    s = np.linalg.norm(G, axis=0)
    order = np.argsort(-s, kind="stable")
    s, G, V = s[order], G[:, order], V[:, order]
    keep = s > max(m, n) * EPS * (s[0] if s.size else 0.0)
    U = np.zeros_like(G)
    U[:, keep] = G[:, keep] / s[keep]
    if not keep.all():
        U = _complete_basis(U, keep)
    if Q is not None:
        U = Q @ U
    return SvdResult(U, s, V.T.copy())


def pinv_with_rank(A, rcond: float = 1.0) -> tuple[np.ndarray, int]:
    """``(pinv(A), number of singular values kept)``."""
    A = _as_matrix(A)
    m, n = A.shape
    r = svd(A)
    if r.singular_values.size == 0:
        return np.zeros((n, m)), 0
    cutoff = rcond * r.singular_values[0] * max(m, n) * EPS
    keep = r.singular_values > cutoff
    inv = np.zeros_like(r.singular_values)
    inv[keep] = 1.0 / r.singular_values[keep]
    return (r.Vt.T * inv) @ r.U.T, int(keep.sum())


def pinv(A, rcond: float = 1.0) -> np.ndarray:
    """Moore-Penrose pseudoinverse with a relative singular-value cutoff.

    Singular values at or below ``rcond * max(s) * max(m, n) * eps`` are
    treated as zero, so rank-deficient inputs are handled.
    """
    return pinv_with_rank(A, rcond)[0]


def matrix_rank(A, rcond: float = 1.0) -> int:
    return pinv_with_rank(A, rcond)[1]


def lstsq_solve(A, B, rcond: float = 1.0) -> np.ndarray:
    """Minimum-norm least-squares solution X of A X ~= B, i.e. pinv(A) @ B."""
    A = _as_matrix(A)
    B = np.array(B, dtype=np.float64)
    vector = B.ndim == 1
    B = _as_matrix(B[:, None] if vector else B)
    if A.shape[0] != B.shape[0]:
        raise DimensionMismatch(f"A has {A.shape[0]} rows, B has {B.shape[0]}")
    X = pinv(A, rcond) @ B
    return X[:, 0] if vector else X
