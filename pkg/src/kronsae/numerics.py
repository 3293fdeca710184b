"""Dense linear algebra, seeded sampling and top-k selection.

Matrices and vectors are plain ``float64`` numpy arrays. Every routine here
is a pure function of its arguments.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DecompositionError

PIVOT_TOL = 1e-12

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    """PCG64 stream; its output is identical on every platform for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b, parallel: bool = False) -> np.ndarray:
    """Matrix product with a shape check.

    The default path is a single BLAS call, which is deterministic for a
    fixed thread count. ``parallel=True`` splits the rows of ``a`` into
    chunks; it is only offered for the large-batch case and changes nothing
    numerically on a single thread.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if not parallel:
        return a @ b
    from concurrent.futures import ThreadPoolExecutor

    chunks = np.array_split(np.arange(a.shape[0]), 4)
    with ThreadPoolExecutor(max_workers=4) as pool:
        parts = list(pool.map(lambda rows: a[rows] @ b, chunks))
    return np.vstack(parts)


def cholesky(s) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == s`` (unblocked, column by column).

    Raises
    ------
    DecompositionError
        If a pivot falls below ``PIVOT_TOL``; ``err.pivot`` names its index.
    """
    s = as_matrix(s, "cholesky input")
    n = s.shape[0]
    if s.shape[1] != n:
        raise ContractError(f"cholesky needs a square matrix, got {s.shape}")
    scale = max(1.0, float(np.max(np.abs(s)))) if s.size else 1.0
    if not np.allclose(s, s.T, rtol=0.0, atol=1e-12 * scale):
        raise ContractError("cholesky input is not symmetric")
    L = np.zeros_like(s)
    for j in range(n):
        row = L[j, :j]
        pivot = s[j, j] - row @ row
        if not np.isfinite(pivot) or pivot <= PIVOT_TOL:
            raise DecompositionError(
                f"matrix is not positive definite: pivot {j} = {pivot:.3e}", pivot=j
            )
        L[j, j] = np.sqrt(pivot)
        if j + 1 < n:
            L[j + 1 :, j] = (s[j + 1 :, j] - L[j + 1 :, :j] @ row) / L[j, j]
    return L


def topk_indices(x: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries of each row of ``x``.

    Ties are broken towards the lowest index. Returns an int array of shape
    ``(rows, k)``, sorted ascending within each row.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    n = x.shape[1]
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    if k == n:
        idx = np.broadcast_to(np.arange(n), x.shape).copy()
        return idx[0] if single else idx
    # argpartition is exact unless the k-th value is tied across the boundary;
    # those rows fall back to a stable sort, which prefers lower indices.
    part = np.argpartition(-x, k - 1, axis=1)[:, :k]
    kth = np.min(np.take_along_axis(x, part, axis=1), axis=1)
    n_at_least = np.count_nonzero(x >= kth[:, None], axis=1)
    ambiguous = np.flatnonzero(n_at_least != k)
    if ambiguous.size:
        part[ambiguous] = np.argsort(-x[ambiguous], axis=1, kind="stable")[:, :k]
    part.sort(axis=1)
    return part[0] if single else part


def topk_mask(x, k: int) -> np.ndarray:
    """Keep the ``k`` largest entries (per row for 2-D input) and zero the rest."""
    x = np.asarray(x, dtype=np.float64)
    idx = topk_indices(x, k)
    out = np.zeros_like(x)
    if x.ndim == 1:
        out[idx] = x[idx]
    else:
        np.put_along_axis(out, idx, np.take_along_axis(x, idx, axis=1), axis=1)
    return out


def sample_standard_normal(rng: Rng, rows: int, cols: int) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ContractError(f"shape must be positive, got ({rows}, {cols})")
    return rng.standard_normal((rows, cols))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)
