from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from probsig.linalg import (LinalgError, cosine_matrix, jacobi_eigen, log_softmax, matmul, pca_project, pearson,
                            percentile_rank, read_matrix_csv, softmax, symmetric_topk_eigen, write_matrix_csv)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(LinalgError, match=r"2x3 by 2x3"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    assert np.allclose(matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]]), [[1, 2], [3, 4]])


def test_softmax_is_shift_invariant_and_stable():
    v = np.array([1000.0, 1001.0, 999.0])
    p = softmax(v)
    assert np.isfinite(p).all() and p.sum() == pytest.approx(1.0)
    assert np.allclose(p, softmax(v - 1000.0))
    assert np.allclose(np.log(p), log_softmax(v))
    with pytest.raises(LinalgError):
        softmax(np.array([]))


def test_cosine_matrix_against_loop():
    rng = np.random.default_rng(0)
    m = rng.normal(size=(7, 5))
    c = cosine_matrix(m)
    for i in range(5):
        for j in range(5):
            ref = m[:, i] @ m[:, j] / (np.linalg.norm(m[:, i]) * np.linalg.norm(m[:, j]))
            assert c[i, j] == pytest.approx(ref, abs=1e-12)
    assert np.array_equal(c, c.T)
    assert np.all(np.diag(c) == 1.0)


def test_cosine_matrix_zero_column_names_index():
    m = np.ones((3, 4))
    m[:, 2] = 0
    with pytest.raises(LinalgError, match="column 2"):
        cosine_matrix(m)


def test_pearson_matches_corrcoef_and_rejects_constants():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=30), rng.normal(size=30)
    assert pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    assert pearson(x, 3 * x + 1) == pytest.approx(1.0)
    with pytest.raises(LinalgError):
        pearson(np.ones(5), x[:5])
    with pytest.raises(LinalgError):
        pearson(np.full(5, 0.3) + 1e-18, x[:5])


def test_percentile_rank_ties_are_averaged():
    r = percentile_rank(np.array([3.0, 1.0, 1.0, 2.0]))
    # ranks 4, 1.5, 1.5, 3 -> (rank - 0.5) / 4
    assert np.allclose(r, [0.875, 0.25, 0.25, 0.625])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(-10, 10)))
def test_jacobi_matches_eigh(a):
    s = a + a.T
    w, v = jacobi_eigen(s)
    ref = np.linalg.eigh(s)[0][::-1]
    scale = max(1.0, np.abs(s).max())
    assert np.allclose(w, ref, atol=1e-9 * scale)
    assert np.allclose(v @ np.diag(w) @ v.T, s, atol=1e-8 * scale)
    assert np.allclose(v.T @ v, np.eye(6), atol=1e-10)


def test_jacobi_rejects_nonsymmetric():
    with pytest.raises(LinalgError, match="symmetric"):
        jacobi_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_topk_sign_convention():
    s = np.diag([3.0, 2.0, 1.0])
    w, v = symmetric_topk_eigen(s, 2)
    assert np.allclose(w, [3, 2])
    for j in range(2):
        assert v[np.argmax(np.abs(v[:, j])), j] > 0
    with pytest.raises(LinalgError):
        symmetric_topk_eigen(s, 4)


def test_pca_recovers_a_line():
    t = np.linspace(-1, 1, 8)
    direction = np.array([1.0, 2.0, -1.0, 0.5])
    pts = np.outer(direction, t)  # 4-dim, 8 points on a line
    proj = pca_project(pts, 1)[0]
    assert abs(np.corrcoef(proj, t)[0, 1]) == pytest.approx(1.0)
    # both the covariance route (n > dim) and the Gram route (n <= dim) match an SVD up to sign
    rng = np.random.default_rng(2)
    for shape in [(3, 9), (9, 4)]:
        x = rng.normal(size=shape)
        p = pca_project(x, 2)
        _, sv, vt = np.linalg.svd(x - x.mean(axis=1, keepdims=True), full_matrices=False)
        for k in range(2):
            assert np.allclose(np.abs(p[k]), np.abs(sv[k] * vt[k]), atol=1e-8)


def test_matrix_csv_roundtrip(tmp_path):
    m = np.array([[1.0, 2.5e-13], [-3.0, 1 / 3]])
    write_matrix_csv(tmp_path / "m.csv", m, [101, 102], ["a", "b"])
    back, rows, cols = read_matrix_csv(tmp_path / "m.csv")
    assert rows == ["101", "102"] and cols == ["a", "b"]
    assert np.allclose(back, m, rtol=1e-11)
    with pytest.raises(LinalgError):
        write_matrix_csv(tmp_path / "x.csv", m, [1], [1, 2])
