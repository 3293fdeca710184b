import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kronsae.errors import ContractError, DecompositionError
from kronsae.numerics import cholesky, make_rng, matmul, relu, topk_indices, topk_mask

from oracles import naive_cholesky, pcg64_raw

# First draws of make_rng(0).standard_normal, frozen at build time.
GOLDEN_NORMALS_SEED0 = [
    0.1257302210933933,
    -0.1321048632913019,
    0.6404226504432821,
    0.10490011715303971,
]


def test_pcg64_stream_matches_reference_generator():
    rng = make_rng(2024)
    st_ = rng.bit_generator.state["state"]
    expected = pcg64_raw(st_["state"], st_["inc"], 16)
    assert [int(v) for v in rng.bit_generator.random_raw(16)] == expected


def test_seeded_normals_are_frozen():
    np.testing.assert_array_equal(make_rng(0).standard_normal(4), GOLDEN_NORMALS_SEED0)


def test_same_seed_same_stream():
    a = make_rng(7).standard_normal(1000)
    b = make_rng(7).standard_normal(1000)
    np.testing.assert_array_equal(a, b)


def test_matmul_shape_check():
    with pytest.raises(ContractError, match="mismatch"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ContractError):
        matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_parallel_identical():
    rng = make_rng(1)
    a, b = rng.standard_normal((37, 11)), rng.standard_normal((11, 5))
    np.testing.assert_array_equal(matmul(a, b), matmul(a, b, parallel=True))


def test_cholesky_against_scalar_oracle():
    rng = make_rng(3)
    A = rng.standard_normal((6, 6))
    S = A @ A.T + 6 * np.eye(6)
    L = cholesky(S)
    np.testing.assert_allclose(L, naive_cholesky(S.tolist()), rtol=0, atol=1e-12)
    np.testing.assert_allclose(L @ L.T, S, rtol=0, atol=1e-12)
    assert np.all(np.triu(L, 1) == 0)


def test_cholesky_identity():
    np.testing.assert_array_equal(cholesky(np.eye(4)), np.eye(4))


def test_cholesky_names_failing_pivot():
    S = np.eye(4)
    S[2, 2] = -1.0
    with pytest.raises(DecompositionError) as err:
        cholesky(S)
    assert err.value.pivot == 2
    assert "pivot 2" in str(err.value)


def test_cholesky_singular():
    S = np.ones((3, 3))
    with pytest.raises(DecompositionError) as err:
        cholesky(S)
    assert err.value.pivot == 1


def test_cholesky_rejects_nonsymmetric_and_nonsquare():
    with pytest.raises(ContractError):
        cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ContractError):
        cholesky(np.ones((2, 3)))


def test_topk_simple_and_ties():
    assert list(topk_indices(np.array([0.1, 3.0, 2.0, 3.0]), 2)) == [1, 3]
    # tie at the boundary resolves towards the lower index
    assert list(topk_indices(np.array([1.0, 2.0, 1.0, 1.0]), 2)) == [0, 1]
    assert list(topk_indices(np.zeros(5), 3)) == [0, 1, 2]


def test_topk_bounds():
    with pytest.raises(ContractError):
        topk_indices(np.ones(4), 0)
    with pytest.raises(ContractError):
        topk_indices(np.ones(4), 5)
    assert list(topk_indices(np.ones(4), 4)) == [0, 1, 2, 3]


def test_topk_mask_keeps_values():
    x = np.array([[0.5, -1.0, 2.0, 1.5]])
    np.testing.assert_array_equal(topk_mask(x, 2), [[0.0, 0.0, 2.0, 1.5]])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 12)), elements=st.integers(-4, 4).map(float)),
    st.data(),
)
def test_topk_matches_stable_sort(x, data):
    k = data.draw(st.integers(1, x.shape[1]))
    idx = topk_indices(x, k)
    ref = np.sort(np.argsort(-x, axis=1, kind="stable")[:, :k], axis=1)
    np.testing.assert_array_equal(idx, ref)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-1e6, 1e6)))
def test_relu_properties(x):
    r = relu(x)
    assert np.all(r >= 0)
    np.testing.assert_array_equal(relu(r), r)
    np.testing.assert_array_equal(r - relu(-x), x)
