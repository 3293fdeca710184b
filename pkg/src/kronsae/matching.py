"""Aligning two dictionaries and comparing covariance structures.

``faq_match`` solves the quadratic assignment

    max_Pi  trace(Pi^T G_A Pi G_B),   G_A = X X^T,  G_B = Y Y^T

with Frank-Wolfe over doubly stochastic matrices (FAQ), projecting the final
iterate onto a permutation with an exact linear assignment.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MetricError, NumericError
from .numerics import as_matrix


def linear_assignment(cost) -> np.ndarray:
    """Exact minimum-cost perfect matching of a square cost matrix.

    Shortest augmenting paths with dual potentials (Hungarian method,
    O(n^3)); the inner scan over columns is vectorised. Returns ``perm`` with
    row ``i`` assigned to column ``perm[i]``.
    """
    cost = as_matrix(cost, "cost")
    n = cost.shape[0]
    if cost.shape[1] != n:
        raise ContractError(f"cost matrix must be square, got {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    # 1-based columns; column 0 is the virtual root of each augmenting tree.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used
            free[0] = False
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free[1:] & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free[1:], minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    perm = np.empty(n, dtype=np.int64)
    perm[row_of[1:] - 1] = np.arange(n)
    return perm


def assignment_cost(cost, perm) -> float:
    cost = np.asarray(cost)
    return float(cost[np.arange(len(perm)), perm].sum())


def permutation_matrix(perm) -> np.ndarray:
    n = len(perm)
    out = np.zeros((n, n))
    out[np.arange(n), perm] = 1.0
    return out


def qap_objective(G_A, G_B, perm) -> float:
    """``trace(Pi^T G_A Pi G_B)`` for the permutation ``Pi[i, perm[i]] = 1``."""
    G_A = np.asarray(G_A)
    G_B = np.asarray(G_B)
    return float(np.sum(G_A * G_B[np.ix_(perm, perm)]))


def rv_coefficient(S, C) -> float:
    """``trace(S C) / sqrt(trace(S^2) trace(C^2))``."""
    S = as_matrix(S, "S")
    C = as_matrix(C, "C")
    if S.shape != C.shape or S.shape[0] != S.shape[1]:
        raise ContractError(f"RV needs square matrices of equal size, got {S.shape}, {C.shape}")
    ss = float(np.trace(S @ S))
    cc = float(np.trace(C @ C))
    if ss <= 0 or cc <= 0:
        raise MetricError("RV coefficient undefined: trace(S^2) or trace(C^2) is zero")
    return float(np.trace(S @ C)) / math.sqrt(ss * cc)


@dataclass
class MatchResult:
    permutation: np.ndarray
    objective: float
    rv_before: float
    rv_after: float
    iterations_used: int

    def aligned(self, Y) -> np.ndarray:
        """Rows of ``Y`` reordered so that row ``i`` is matched to reference row ``i``."""
        return np.asarray(Y)[self.permutation]

    def to_json(self) -> dict:
        return {
            "permutation": [int(i) for i in self.permutation],
            "objective": self.objective,
            "rv_before": self.rv_before,
            "rv_after": self.rv_after,
            "iterations": self.iterations_used,
        }


def faq_match(X, Y, max_iter: int = 30) -> MatchResult:
    """Match the rows of ``Y`` to the rows of ``X`` (both F x d)."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ContractError(f"X and Y need the same number of rows, got {X.shape[0]} and {Y.shape[0]}")
    F = X.shape[0]
    if F < 2:
        raise ContractError("matching needs at least two features")
    if max_iter < 1:
        raise ContractError(f"max_iter must be >= 1, got {max_iter}")
    G_A = X @ X.T
    G_B = Y @ Y.T

    P = np.full((F, F), 1.0 / F)
    prev = None
    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        grad = 2.0 * G_A @ P @ G_B
        cols = linear_assignment(-grad)
        if prev is not None and np.array_equal(cols, prev):
            # Same vertex as last time: the line search has nothing left to do.
            break
        prev = cols
        D = -P
        D[np.arange(F), cols] += 1.0
        b = float(np.sum(grad * D))
        a = float(np.sum((G_A @ D @ G_B) * D))
        if abs(a) < 1e-12:
            alpha = 1.0 if b > 0 else 0.0
        elif a < 0:
            alpha = min(max(-b / (2.0 * a), 0.0), 1.0)
        else:
            alpha = 1.0 if b > 0 else 0.0
        P = P + alpha * D

    perm = linear_assignment(-P)
    G_B_aligned = G_B[np.ix_(perm, perm)]
    return MatchResult(
        permutation=perm,
        objective=float(np.sum(G_A * G_B_aligned)),
        rv_before=rv_coefficient(G_A, G_B),
        rv_after=rv_coefficient(G_A, G_B_aligned),
        iterations_used=iterations,
    )


def _round_robin(n: int):
    """``n - 1`` orderings of ``range(n)`` (n even); pairing slot ``i`` with
    slot ``i + n/2`` in each covers every index pair exactly once."""
    players = list(range(n))
    half = n // 2
    for _ in range(n - 1):
        yield players[:half] + players[half:][::-1]
        players = [players[0], players[-1]] + players[1:-1]


def jacobi_eigh(A, tol: float = 1e-13, max_sweeps: int = 60):
    """Eigenvalues (ascending) and eigenvectors of a symmetric matrix.

    Cyclic Jacobi in round-robin (parallel) order: each round applies n/2
    disjoint plane rotations at once. The working matrix is re-permuted so the
    rotated pairs are the slots ``(i, i + n/2)``, which keeps every update a
    contiguous half-block operation.
    """
    A = as_matrix(A, "A").copy()
    n = A.shape[0]
    if A.shape[1] != n:
        raise ContractError(f"matrix must be square, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericError("matrix has non-finite entries")
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(A).max(initial=0))):
        raise ContractError("matrix is not symmetric")
    if n == 1:
        return A.diagonal().copy(), np.ones((1, 1))
    size = n + (n % 2)
    if size != n:
        # An isolated zero index makes the count even; it is never rotated.
        A = np.pad(A, ((0, 1), (0, 1)))
    scale = np.linalg.norm(A)
    if scale == 0:
        return np.zeros(n), np.eye(n)
    half = size // 2
    V = np.eye(size)
    order = np.arange(size)  # order[slot] = original index held in that slot
    rows = np.arange(half)
    off_diag = ~np.eye(size, dtype=bool)
    for _ in range(max_sweeps):
        off = np.linalg.norm(A[off_diag])
        if off <= tol * scale:
            break
        for target in _round_robin(size):
            target = np.asarray(target)
            slot_of = np.empty(size, dtype=np.int64)
            slot_of[order] = np.arange(size)
            rel = slot_of[target]
            A = A[np.ix_(rel, rel)]
            V = V[:, rel]
            order = target

            apq = A[rows, rows + half]
            app = A[rows, rows]
            aqq = A[rows + half, rows + half]
            rotate = np.abs(apq) > 1e-300
            # a huge |tau| means the pair is already diagonal; t then rounds to 0
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                tau = np.where(rotate, (aqq - app) / (2.0 * apq), 0.0)
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(rotate, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c

            lo, hi = A[:, :half].copy(), A[:, half:].copy()
            A[:, :half] = lo * c - hi * s
            A[:, half:] = lo * s + hi * c
            lo, hi = A[:half].copy(), A[half:].copy()
            A[:half] = c[:, None] * lo - s[:, None] * hi
            A[half:] = s[:, None] * lo + c[:, None] * hi
            lo, hi = V[:, :half].copy(), V[:, half:].copy()
            V[:, :half] = lo * c - hi * s
            V[:, half:] = lo * s + hi * c
    else:
        raise NumericError(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
    # Undo the slot permutation, then drop the padding index.
    slot_of = np.empty(size, dtype=np.int64)
    slot_of[order] = np.arange(size)
    w = A.diagonal()[slot_of][:n].copy()
    V = V[:, slot_of][:n, :n]
    idx = np.argsort(w, kind="stable")
    return w[idx], V[:, idx]


def symmetric_eigvals(A) -> np.ndarray:
    return jacobi_eigh(A)[0]


def effective_rank(eigenvalues, neg_tol: float = 1e-10) -> float:
    """``exp`` of the Shannon entropy of the normalised eigenvalue spectrum."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(lam < -neg_tol):
        warnings.warn(
            f"matrix is not PSD: smallest eigenvalue {lam.min():.3e}", RuntimeWarning, stacklevel=2
        )
    lam = np.clip(lam, 0.0, None)
    total = lam.sum()
    if total <= 0:
        raise MetricError("effective rank undefined for a zero spectrum")
    p = lam[lam > 0] / total
    return float(math.exp(-np.sum(p * np.log(p))))


def mean_abs_correlation(C) -> float:
    """Mean ``|corr_ij|`` over ``i != j`` of the correlation-normalised ``C``."""
    C = as_matrix(C, "C")
    diag = C.diagonal()
    if np.any(diag <= 0):
        raise MetricError("correlation undefined: non-positive diagonal entry")
    scale = 1.0 / np.sqrt(diag)
    R = C * scale[:, None] * scale[None, :]
    n = C.shape[0]
    if n < 2:
        raise MetricError("mean correlation needs at least two features")
    off = np.abs(R[~np.eye(n, dtype=bool)])
    return float(off.mean())


@dataclass
class CovarianceDiagnostics:
    rv: float | None
    effective_rank: float
    mean_correlation: float
    rank_delta: float | None = None

    def to_json(self) -> dict:
        return {
            "rv": self.rv,
            "effective_rank": self.effective_rank,
            "mean_correlation": self.mean_correlation,
            "rank_delta": self.rank_delta,
        }


def gram_eigvals(W) -> np.ndarray:
    """Eigenvalues of ``W @ W.T`` computed from the smaller Gram matrix.

    ``W W^T`` and ``W^T W`` share their nonzero spectrum; the remaining
    eigenvalues are zero.
    """
    W = as_matrix(W, "W")
    rows, cols = W.shape
    if rows <= cols:
        return symmetric_eigvals(W @ W.T)
    small = symmetric_eigvals(W.T @ W)
    return np.concatenate([np.zeros(rows - cols), small])


def covariance_diagnostics(
    C=None, S=None, s_effective_rank: float | None = None, factor=None
) -> CovarianceDiagnostics:
    """RV against the reference ``S`` (if given), effective rank and mean |correlation| of ``C``.

    Pass ``factor=W`` instead of ``C`` when ``C = W W^T``; the spectrum is
    then taken from the smaller Gram matrix. ``rank_delta`` is
    ``|effective_rank(S) - effective_rank(C)|``.
    """
    if factor is not None:
        factor = as_matrix(factor, "factor")
        C = factor @ factor.T
        eig = gram_eigvals(factor)
    else:
        C = as_matrix(C, "C")
        eig = symmetric_eigvals(C)
    erank = effective_rank(eig)
    rv = None
    delta = None
    if S is not None:
        rv = rv_coefficient(S, C)
        if s_effective_rank is None:
            s_effective_rank = effective_rank(symmetric_eigvals(S))
        delta = abs(s_effective_rank - erank)
    return CovarianceDiagnostics(
        rv=rv, effective_rank=erank, mean_correlation=mean_abs_correlation(C), rank_delta=delta
    )
