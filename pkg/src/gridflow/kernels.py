"""Dense tile kernels and whole-problem reference oracles.

Tiles are float64 numpy arrays, row-major. The blocked compute path and the
blocked comparison oracle pin the same k-ascending accumulation order so that
matrix-multiply results can be compared bitwise; everything else is compared
with a relative Frobenius tolerance.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg


class KernelError(ValueError):
    """Raised on malformed kernel operands (shape mismatch, bad pivot)."""


def _tile(x) -> np.ndarray:
    t = np.asarray(x, dtype=np.float64)
    if t.ndim != 2:
        raise KernelError(f"tile must be 2-D, got shape {t.shape}")
    return t


# ---------------------------------------------------------------------------
# Tile kernels (used by Compute instructions)
# ---------------------------------------------------------------------------

def gemm_acc(c, a, b, sign: int = 1) -> np.ndarray:
    """C +- A@B with left-to-right inner-product order (numpy matmul)."""
    c, a, b = _tile(c), _tile(a), _tile(b)
    if a.shape[1] != b.shape[0] or c.shape != (a.shape[0], b.shape[1]):
        raise KernelError(f"gemm shapes {c.shape} {a.shape} {b.shape} not conformable")
    if sign not in (1, -1):
        raise KernelError("sign must be +1 or -1")
    return c + sign * (a @ b)


def trsm_tile(l, b) -> np.ndarray:
    """Solve L@X = B by forward substitution, L lower-triangular."""
    l, b = _tile(l), _tile(b)
    if l.shape[0] != l.shape[1] or l.shape[0] != b.shape[0]:
        raise KernelError(f"trsm shapes {l.shape} {b.shape} not conformable")
    if np.any(np.diag(l) == 0.0):
        raise KernelError("trsm: zero diagonal entry")
    return scipy.linalg.solve_triangular(l, b, lower=True)


def trsmt_tile(b, l) -> np.ndarray:
    """Solve X@L.T = B for X, L lower-triangular (right transposed solve)."""
    b, l = _tile(b), _tile(l)
    if l.shape[0] != l.shape[1] or b.shape[1] != l.shape[0]:
        raise KernelError(f"trsmt shapes {b.shape} {l.shape} not conformable")
    if np.any(np.diag(l) == 0.0):
        raise KernelError("trsmt: zero diagonal entry")
    return scipy.linalg.solve_triangular(l, b.T, lower=True).T


def syrk_acc(c, a) -> np.ndarray:
    """C - A@A.T (Schur-complement update step)."""
    c, a = _tile(c), _tile(a)
    return gemm_acc(c, a, a.T, sign=-1)


def syrk_step(c, a) -> np.ndarray:
    """C + A@A.T; positive accumulation form used inside lowered reductions."""
    c, a = _tile(c), _tile(a)
    return gemm_acc(c, a, a.T, sign=1)


def chol_tile(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite tile."""
    a = _tile(a)
    if a.shape[0] != a.shape[1]:
        raise KernelError(f"chol tile must be square, got {a.shape}")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise KernelError(f"chol: non-positive pivot ({e})") from e


# ---------------------------------------------------------------------------
# Online-softmax attention state
#
# Per-query state (m, l, o) is packed into a single (q, d+2) tile so it can
# travel through registers/channels like any other tile: columns [0:d] hold o,
# column d holds m, column d+1 holds l.
# ---------------------------------------------------------------------------

def flash_init(q_rows: int, d: int) -> np.ndarray:
    state = np.zeros((q_rows, d + 2))
    state[:, d] = -np.inf
    return state


def flash_update(state, s, v) -> np.ndarray:
    """One online-softmax step: fold score tile S and value tile V into state."""
    state, s, v = _tile(state), _tile(s), _tile(v)
    d = v.shape[1]
    if state.shape != (s.shape[0], d + 2) or s.shape[1] != v.shape[0]:
        raise KernelError(f"flash shapes {state.shape} {s.shape} {v.shape} not conformable")
    o, m, l = state[:, :d], state[:, d], state[:, d + 1]
    m_hat = np.maximum(m, s.max(axis=1))
    # exp(-inf - finite) == 0, so the first step falls out of the same formula
    scale = np.exp(m - m_hat)
    p = np.exp(s - m_hat[:, None])
    out = np.empty_like(state)
    out[:, :d] = scale[:, None] * o + p @ v
    out[:, d] = m_hat
    out[:, d + 1] = scale * l + p.sum(axis=1)
    return out


def softmax_step(state, q, k, v) -> np.ndarray:
    """Score tile from Q and K (scaled by 1/sqrt(d)), then one flash update."""
    q, k = _tile(q), _tile(k)
    if q.shape[1] != k.shape[1]:
        raise KernelError(f"softmax_step: Q {q.shape} and K {k.shape} widths differ")
    s = (q @ k.T) / np.sqrt(q.shape[1])
    return flash_update(state, s, v)


def softmax_fin(state) -> np.ndarray:
    """Finalize attention state: O = o / l."""
    state = _tile(state)
    d = state.shape[1] - 2
    l = state[:, d + 1]
    if np.any(l == 0.0):
        raise KernelError("softmax_fin: zero mass row")
    return state[:, :d] / l[:, None]


# ---------------------------------------------------------------------------
# Whole-problem reference oracles (tests and the run verifier only)
# ---------------------------------------------------------------------------

def oracle_matmul(a, b) -> np.ndarray:
    """Dense matmul as k-ascending rank-1 updates (documented order)."""
    a, b = _tile(a), _tile(b)
    if a.shape[1] != b.shape[0]:
        raise KernelError(f"matmul shapes {a.shape} {b.shape} not conformable")
    c = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        c = c + np.outer(a[:, k], b[k, :])
    return c


def oracle_matmul_blocked(a, b, tile: int) -> np.ndarray:
    """Tile-blocked matmul, k-ascending over tiles. Bitwise comparator for
    schedules that preserve the k accumulation order."""
    a, b = _tile(a), _tile(b)
    m, kk = a.shape
    n = b.shape[1]
    if m % tile or kk % tile or n % tile:
        raise KernelError("dimensions must be multiples of the tile size")
    c = np.zeros((m, n))
    for i in range(0, m, tile):
        for j in range(0, n, tile):
            acc = np.zeros((tile, tile))
            for k in range(0, kk, tile):
                acc = gemm_acc(acc, a[i:i + tile, k:k + tile], b[k:k + tile, j:j + tile])
            c[i:i + tile, j:j + tile] = acc
    return c


def oracle_trsm(l, b) -> np.ndarray:
    l, b = _tile(l), _tile(b)
    return scipy.linalg.solve_triangular(l, b, lower=True)


def oracle_cholesky(a) -> np.ndarray:
    a = _tile(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as e:
        raise KernelError(f"cholesky oracle: {e}") from e


def oracle_attention(q, k, v) -> np.ndarray:
    """Dense softmax(Q K^T / sqrt(d)) V."""
    q, k, v = _tile(q), _tile(k), _tile(v)
    s = (q @ k.T) / np.sqrt(q.shape[1])
    s = s - s.max(axis=1, keepdims=True)
    p = np.exp(s)
    return (p @ v) / p.sum(axis=1, keepdims=True)


def oracle_prefix_sum(a) -> np.ndarray:
    """Running sum of row-blocks of height `tile_rows` is just a cumsum when
    the dense layout stacks the blocks; callers pass the stacked array."""
    a = np.asarray(a, dtype=np.float64)
    return np.cumsum(a, axis=0)


def rel_error(got, want) -> float:
    """Relative Frobenius error, 0 denominator treated as absolute."""
    got, want = np.asarray(got, dtype=np.float64), np.asarray(want, dtype=np.float64)
    denom = np.linalg.norm(want)
    err = np.linalg.norm(got - want)
    return err / denom if denom > 0 else err
