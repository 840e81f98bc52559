"""Small dense linear-algebra and statistics kernel.

Everything works on float64 numpy arrays. Matrices that hold token vectors
store one token per *column* (embedding convention), so ``cosine_matrix``
compares columns.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np


class LinalgError(ValueError):
    pass


def _as2d(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = _as2d(a, "a")
    b = _as2d(b, "b")
    if a.shape[1] != b.shape[0]:
        raise LinalgError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax(v, axis: int = 0) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise LinalgError("softmax of an empty vector")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = 0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def cosine_matrix(columns) -> np.ndarray:
    """Pairwise cosine similarity between the columns of ``columns``.

    The result is exactly symmetric with a unit diagonal.
    """
    m = _as2d(columns, "columns")
    norms = np.linalg.norm(m, axis=0)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise LinalgError(f"column {int(bad[0])} has zero norm")
    unit = m / norms
    c = unit.T @ unit
    c = np.clip(c, -1.0, 1.0)
    upper = np.triu(c, 1)
    c = upper + upper.T
    np.fill_diagonal(c, 1.0)
    return c


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise LinalgError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise LinalgError("pearson needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(xc @ xc)
    sy = np.sqrt(yc @ yc)
    # relative test so float noise around a constant still counts as degenerate
    if sx <= 1e-14 * max(1.0, np.abs(x).max()) or sy <= 1e-14 * max(1.0, np.abs(y).max()):
        raise LinalgError("zero variance input")
    r = float((xc @ yc) / (sx * sy))
    return min(1.0, max(-1.0, r))


def percentile_rank(m) -> np.ndarray:
    """Fractional rank ``(rank - 0.5) / n`` of every entry, ties averaged."""
    arr = np.asarray(m, dtype=np.float64)
    flat = arr.ravel()
    n = flat.size
    if n == 0:
        return arr.copy()
    order = np.argsort(flat, kind="mergesort")
    sorted_vals = flat[order]
    # boundaries of tie groups
    starts = np.flatnonzero(np.r_[True, sorted_vals[1:] != sorted_vals[:-1]])
    ends = np.r_[starts[1:], n]
    avg_rank = (starts + ends + 1) / 2.0  # mean of 1-based ranks in the group
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg_rank, ends - starts)
    return ((ranks - 0.5) / n).reshape(arr.shape)


def jacobi_eigen(m, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """All eigenpairs of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching eigenvectors as
    columns.
    """
    a = _as2d(m, "m").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise LinalgError(f"matrix must be square, got {a.shape}")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > 1e-9 * scale:
        raise LinalgError("matrix is not symmetric")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0:
                    t = 1.0
                elif abs(theta) > 1e150:  # theta^2 would overflow; t ~ 1 / (2 theta)
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                # rotate rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="mergesort")
    return w[order], v[:, order]


def symmetric_topk_eigen(m, k: int) -> tuple[np.ndarray, np.ndarray]:
    a = _as2d(m, "m")
    if k > a.shape[0]:
        raise LinalgError(f"k={k} exceeds matrix size {a.shape[0]}")
    w, v = jacobi_eigen(a)
    vecs = v[:, :k].copy()
    # deterministic sign: largest-magnitude component positive
    for j in range(k):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return w[:k], vecs


def pca_project(vectors, k: int) -> np.ndarray:
    """Project column vectors onto their top-``k`` principal axes (k x n)."""
    x = _as2d(vectors, "vectors")
    if x.shape[1] < 2:
        raise LinalgError("pca needs at least 2 column vectors")
    centered = x - x.mean(axis=1, keepdims=True)
    # the n x n Gram matrix is small whenever n < dim; eigenvectors map back
    if x.shape[1] <= x.shape[0]:
        gram = centered.T @ centered
        w, u = symmetric_topk_eigen(gram, k)
        return (u * np.sqrt(np.clip(w, 0.0, None))).T
    cov = centered @ centered.T
    _, axes = symmetric_topk_eigen(cov, k)
    return axes.T @ centered


def write_matrix_csv(path, m, row_labels: Sequence, col_labels: Sequence) -> None:
    arr = np.asarray(m, dtype=np.float64)
    if arr.shape != (len(row_labels), len(col_labels)):
        raise LinalgError(f"label counts {len(row_labels)}x{len(col_labels)} do not match shape {arr.shape}")
    lines = ["," + ",".join(str(c) for c in col_labels)]
    for lab, row in zip(row_labels, arr):
        lines.append(str(lab) + "," + ",".join(f"{v:.12g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path) -> tuple[np.ndarray, list[str], list[str]]:
    rows = Path(path).read_text().strip().splitlines()
    col_labels = rows[0].split(",")[1:]
    row_labels, data = [], []
    for line in rows[1:]:
        parts = line.split(",")
        row_labels.append(parts[0])
        data.append([float(p) for p in parts[1:]])
    return np.array(data, dtype=np.float64).reshape(len(row_labels), len(col_labels)), row_labels, col_labels
