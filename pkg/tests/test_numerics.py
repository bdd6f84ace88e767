from __future__ import annotations

import numpy as np
import pytest

from tdquant import numerics
from tdquant.errors import ParameterError, ShapeError, SingularHessianError


def matmul_oracle(a, b):
    # independent triple-loop product
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def gauss_solve_oracle(a, b):
    # Gaussian elimination with partial pivoting
    a = a.astype(np.float64).copy()
    b = b.astype(np.float64).copy()
    n = a.shape[0]
    for col in range(n):
        piv = col + int(np.argmax(np.abs(a[col:, col])))
        if piv != col:
            a[[col, piv]] = a[[piv, col]]
            b[[col, piv]] = b[[piv, col]]
        for row in range(col + 1, n):
            f = a[row, col] / a[col, col]
            a[row, col:] -= f * a[col, col:]
            b[row] -= f * b[col]
    x = np.zeros_like(b)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - a[row, row + 1 :] @ x[row + 1 :]) / a[row, row]
    return x


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(8, 8))
    b = rng.normal(size=(8, 8))
    got = numerics.matmul(a, b)
    want = matmul_oracle(a, b)
    assert np.max(np.abs(got - want)) <= 1e-12


def test_matmul_dimension_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        numerics.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_rejects_non_finite():
    bad = np.array([[1.0, np.nan], [0.0, 1.0]])
    with pytest.raises(ParameterError):
        numerics.matmul(bad, np.eye(2))


def test_matmul_associativity_random_triples():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a = rng.normal(size=(5, 4))
        b = rng.normal(size=(4, 6))
        c = rng.normal(size=(6, 3))
        left = numerics.matmul(numerics.matmul(a, b), c)
        right = numerics.matmul(a, numerics.matmul(b, c))
        scale = max(1.0, np.max(np.abs(left)))
        assert np.max(np.abs(left - right)) / scale <= 1e-9


def test_cholesky_solve_identity_returns_rhs_exactly():
    rhs = np.array([1.5, -2.25, 0.125])
    x = numerics.cholesky_solve(np.eye(3), rhs, damping=0.0)
    assert np.array_equal(x, rhs)


def test_cholesky_solve_matches_gaussian_elimination_oracle():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(2, 9))
        m = rng.normal(size=(n, n))
        h = m @ m.T + n * np.eye(n)
        rhs = rng.normal(size=n)
        got = numerics.cholesky_solve(h, rhs, damping=0.0)
        want = gauss_solve_oracle(h, rhs)
        assert np.max(np.abs(got - want)) <= 1e-9


def test_cholesky_solve_residual_bound():
    rng = np.random.default_rng(3)
    m = rng.normal(size=(6, 6))
    h = m @ m.T + 6 * np.eye(6)
    rhs = rng.normal(size=(6, 4))
    x = numerics.cholesky_solve(h, rhs, damping=0.0)
    resid = np.linalg.norm(h @ x - rhs)
    assert resid <= 1e-8 * np.linalg.norm(rhs)


def test_cholesky_solve_damping_shifts_diagonal():
    h = np.diag([1.0, 3.0])  # mean diag = 2.0
    rhs = np.array([1.0, 1.0])
    x = numerics.cholesky_solve(h, rhs, damping=0.5)
    # damped system is diag(2, 4)
    assert np.allclose(x, [0.5, 0.25], atol=1e-15)


def test_cholesky_indefinite_reports_pivot_index():
    h = np.diag([2.0, -1.0, 4.0])
    with pytest.raises(SingularHessianError) as exc:
        numerics.cholesky_solve(h, np.ones(3), damping=0.0)
    assert exc.value.pivot == 1
    assert "singular Hessian" in str(exc.value)


def test_cholesky_solve_round_trip_random_spd():
    rng = np.random.default_rng(4)
    for _ in range(10):
        n = int(rng.integers(2, 8))
        m = rng.normal(size=(n, n))
        h = m @ m.T + n * np.eye(n)
        x = rng.normal(size=n)
        back = numerics.cholesky_solve(h, h @ x, damping=0.0)
        assert np.max(np.abs(back - x)) <= 1e-8 * max(1.0, np.max(np.abs(x)))


def test_cholesky_rejects_asymmetric_and_bad_damping():
    with pytest.raises(ParameterError):
        numerics.cholesky_solve(np.array([[1.0, 2.0], [0.0, 1.0]]), np.ones(2))
    with pytest.raises(ParameterError):
        numerics.cholesky_solve(np.eye(2), np.ones(2), damping=-0.1)


def test_softmax_huge_temperature_flattens():
    # exact flattening error at tau is ~max|v - mean(v)| / (n * tau),
    # which for these scores is 1.42e-6 at tau=1e6
    w = numerics.softmax_with_temperature([5.0, -3.0, 0.2], tau=1e6)
    assert np.max(np.abs(w - 1.0 / 3.0)) <= 1.5e-6
    w = numerics.softmax_with_temperature([5.0, -3.0, 0.2], tau=1e7)
    assert np.max(np.abs(w - 1.0 / 3.0)) <= 1e-6


def test_softmax_sums_to_one_and_is_stable_for_extreme_scores():
    w = numerics.softmax_with_temperature([1e6, 0.0, -1e6], tau=1.0)
    assert abs(float(np.sum(w)) - 1.0) <= 1e-12
    assert np.all(np.isfinite(w))


def test_softmax_shift_invariance():
    rng = np.random.default_rng(5)
    for _ in range(10):
        v = rng.normal(size=7) * 10.0
        c = float(rng.normal()) * 100.0
        a = numerics.softmax_with_temperature(v, tau=0.7)
        b = numerics.softmax_with_temperature(v + c, tau=0.7)
        assert np.max(np.abs(a - b)) <= 1e-12


def test_softmax_rejects_non_positive_temperature():
    for tau in (0.0, -1.0):
        with pytest.raises(ParameterError):
            numerics.softmax_with_temperature([1.0, 2.0], tau=tau)


def test_rng_identical_seeds_give_bit_identical_sequences():
    a = numerics.Rng(1234)
    b = numerics.Rng(1234)
    assert np.array_equal(a.normal((64,)), b.normal((64,)))
    assert np.array_equal(a.uniform((64,)), b.uniform((64,)))


def test_rng_resume_from_position_continues_stream():
    a = numerics.Rng(99)
    first = a.normal((10,))
    rest_a = a.normal((10,))
    b = numerics.Rng(99, pos=a.pos - 20)
    assert np.array_equal(b.normal((10,)), first)
    assert np.array_equal(b.normal((10,)), rest_a)


def test_rng_split_streams_differ_and_are_stable():
    root = numerics.Rng(7)
    c1 = root.split(0)
    c2 = root.split(1)
    assert c1.seed != c2.seed
    assert not np.array_equal(c1.normal((32,)), c2.normal((32,)))
    assert np.array_equal(numerics.Rng(7).split(0).normal((32,)), numerics.Rng(7).split(0).normal((32,)))


def test_rng_normal_moments_are_sane():
    z = numerics.Rng(2024).normal((20000,))
    assert abs(float(np.mean(z))) < 0.03
    assert abs(float(np.std(z)) - 1.0) < 0.03


def test_rng_rejects_negative_position():
    with pytest.raises(ParameterError):
        numerics.Rng(1, pos=-3)
