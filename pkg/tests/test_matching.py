import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kronsae import matching
from kronsae.errors import ContractError, MetricError
from kronsae.numerics import make_rng

from oracles import brute_force_lap, brute_force_qap, power_iteration_spectrum


def test_lap_known_instance():
    cost = np.array([[4.0, 1.0, 3.0], [2.0, 0.0, 5.0], [3.0, 2.0, 2.0]])
    perm = matching.linear_assignment(cost)
    assert matching.assignment_cost(cost, perm) == 5.0
    assert sorted(perm) == [0, 1, 2]


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.sampled_from([(1, 1), (2, 2), (3, 3), (4, 4), (5, 5)]), elements=st.integers(-20, 20).map(float)))
def test_lap_matches_brute_force(cost):
    perm = matching.linear_assignment(cost)
    assert sorted(perm) == list(range(cost.shape[0]))
    assert matching.assignment_cost(cost, perm) == brute_force_lap(cost)[0]


def test_lap_rectangular_and_nonfinite_rejected():
    with pytest.raises(ContractError):
        matching.linear_assignment(np.ones((2, 3)))
    with pytest.raises(ContractError):
        matching.linear_assignment(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    assert matching.linear_assignment(np.zeros((0, 0))).size == 0


def test_lap_large_against_dense_check():
    # optimality certificate: a random swap of two assignments never lowers the cost
    rng = make_rng(0)
    cost = rng.random((60, 60))
    perm = matching.linear_assignment(cost)
    base = matching.assignment_cost(cost, perm)
    for _ in range(500):
        i, j = rng.choice(60, 2, replace=False)
        p = perm.copy()
        p[i], p[j] = p[j], p[i]
        assert matching.assignment_cost(cost, p) >= base - 1e-12


def test_rv_reference_values():
    assert matching.rv_coefficient(np.eye(2), np.ones((2, 2))) == pytest.approx(2 / np.sqrt(8), abs=1e-15)
    A = make_rng(1).standard_normal((5, 5))
    S = A @ A.T
    assert matching.rv_coefficient(S, 3.0 * S) == pytest.approx(1.0, abs=1e-14)
    with pytest.raises(MetricError):
        matching.rv_coefficient(S, np.zeros((5, 5)))
    with pytest.raises(ContractError):
        matching.rv_coefficient(S, np.eye(4))


def test_qap_objective_identity():
    G = np.arange(9.0).reshape(3, 3)
    assert matching.qap_objective(G, G, np.arange(3)) == float(np.sum(G * G))


def test_faq_recovers_permuted_copy():
    rng = make_rng(3)
    X = rng.standard_normal((40, 8))
    perm0 = rng.permutation(40)
    Y = X[perm0]
    res = matching.faq_match(X, Y)
    np.testing.assert_array_equal(res.aligned(Y), X)
    assert res.rv_after == pytest.approx(1.0, abs=1e-9)
    assert res.objective == pytest.approx(float(np.sum((X @ X.T) ** 2)), rel=1e-12)
    assert res.rv_after >= res.rv_before


def test_faq_self_match_is_identity():
    X = make_rng(4).standard_normal((10, 3))
    res = matching.faq_match(X, X)
    np.testing.assert_array_equal(res.permutation, np.arange(10))


def test_faq_small_against_brute_force():
    rng = make_rng(5)
    for _ in range(10):
        X = rng.standard_normal((6, 3))
        Y = rng.standard_normal((6, 3))
        res = matching.faq_match(X, Y)
        best, _ = brute_force_qap(X @ X.T, Y @ Y.T)
        # a local optimum cannot exceed the global one
        assert res.objective <= best + 1e-9
        assert sorted(res.permutation) == list(range(6))


def test_faq_errors_and_json():
    X = np.ones((4, 2))
    with pytest.raises(ContractError):
        matching.faq_match(X, np.ones((5, 2)))
    with pytest.raises(ContractError):
        matching.faq_match(X, X, max_iter=0)
    out = matching.faq_match(make_rng(0).standard_normal((5, 2)), make_rng(1).standard_normal((5, 2))).to_json()
    assert set(out) == {"permutation", "objective", "rv_before", "rv_after", "iterations"}
    assert 1 <= out["iterations"] <= 30


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 13])
def test_jacobi_against_power_iteration(n):
    A = make_rng(n).standard_normal((n, n))
    S = A @ A.T + 0.5 * np.diag(np.arange(n))
    vals, vecs = matching.jacobi_eigh(S)
    np.testing.assert_allclose(vals, power_iteration_spectrum(S), rtol=1e-8, atol=1e-9)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(n), atol=1e-12)
    np.testing.assert_allclose(vecs @ np.diag(vals) @ vecs.T, S, atol=1e-11)


def test_jacobi_indefinite_and_diagonal():
    D = np.diag([3.0, -1.0, 2.0, 0.0])
    vals, _ = matching.jacobi_eigh(D)
    np.testing.assert_array_equal(vals, [-1.0, 0.0, 2.0, 3.0])
    A = make_rng(9).standard_normal((20, 20))
    S = A + A.T
    np.testing.assert_allclose(matching.symmetric_eigvals(S), np.sort(np.linalg.eigvalsh(S)), atol=1e-11)
    with pytest.raises(ContractError):
        matching.jacobi_eigh(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_effective_rank():
    assert matching.effective_rank(np.ones(4)) == pytest.approx(4.0)
    assert matching.effective_rank([5.0, 0.0, 0.0]) == pytest.approx(1.0)
    with pytest.raises(MetricError):
        matching.effective_rank(np.zeros(3))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        matching.effective_rank([1.0, -0.5])
    assert any("not PSD" in str(w.message) for w in caught)


def test_mean_abs_correlation():
    C = np.array([[4.0, 2.0], [2.0, 1.0]])
    assert matching.mean_abs_correlation(C) == pytest.approx(1.0)
    assert matching.mean_abs_correlation(np.eye(3)) == 0.0
    with pytest.raises(MetricError):
        matching.mean_abs_correlation(np.zeros((2, 2)))


def test_gram_spectrum_and_diagnostics():
    W = make_rng(2).standard_normal((12, 4))
    full = matching.symmetric_eigvals(W @ W.T)
    np.testing.assert_allclose(matching.gram_eigvals(W), full, atol=1e-11)
    S = np.cov(make_rng(3).standard_normal((12, 50)))
    via_factor = matching.covariance_diagnostics(S=S, factor=W)
    direct = matching.covariance_diagnostics(C=W @ W.T, S=S)
    assert via_factor.rv == pytest.approx(direct.rv, rel=1e-12)
    assert via_factor.effective_rank == pytest.approx(direct.effective_rank, rel=1e-9)
    assert via_factor.rank_delta == pytest.approx(
        abs(matching.effective_rank(matching.symmetric_eigvals(S)) - direct.effective_rank), rel=1e-9
    )
