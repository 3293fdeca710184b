import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kronsae import analysis
from kronsae.analysis import ActivationRecord
from kronsae.errors import ContractError, MetricError
from kronsae.numerics import make_rng
from kronsae.sae import SaeDims, kron_decoder_from_factors

from oracles import naive_head_means


def test_flops_reference_values():
    assert analysis.flops_topk(1536, 65536, 50) == 100_740_096
    assert analysis.flops_kron(1536, 2, 4, 8192, 50) == 75_639_808
    assert analysis.flops_topk(1, 1, 1) == 2
    with pytest.raises(ContractError):
        analysis.flops_topk(1536, 65536, 0)
    with pytest.raises(ContractError):
        analysis.flops_kron(1536, 2, 4.5, 8192, 50)


def test_flops_report_and_iso_budget():
    rep = analysis.flops_report((1536, 65536, 50), (1536, 2, 4, 8192, 50), reference_tokens=10**9)
    assert rep.ratio == pytest.approx(75_639_808 / 100_740_096)
    assert round(rep.ratio, 4) == 0.7508
    assert rep.iso_tokens == (10**9 * 100_740_096) // 75_639_808
    assert rep.iso_tokens / 10**9 == pytest.approx(1.3318, abs=1e-4)
    assert rep.params_topk == 2 * 65536 * 1536 + 65536 + 1536
    assert rep.params_kron == 8192 * 6 * 1536 + 8192 * 6 + 65536 * 1536 + 1536
    assert set(rep.to_json()) == {"flops_topk", "flops_kron", "params_topk", "params_kron", "ratio", "iso_tokens"}
    with pytest.raises(ContractError, match="h\\*m\\*n"):
        analysis.flops_report((1536, 65536, 50), (1536, 2, 4, 4096, 50))


def test_iso_budget_edge_cases():
    assert analysis.iso_flops_budget((1536, 65536, 50), (1536, 2, 4, 8192, 50), 0) == 0
    with pytest.raises(ContractError, match="m = n = 1"):
        analysis.iso_flops_budget((4, 8, 2), (4, 1, 1, 8, 2), 100)
    # degenerate factorisation really does cost more than the dense encoder
    assert analysis.flops_kron(64, 1, 1, 256, 8) > analysis.flops_topk(64, 256, 8)


@settings(max_examples=200, deadline=None)
@given(
    st.integers(1, 4096),
    st.sampled_from([(2, 4), (4, 8), (2, 32), (4, 4), (1, 8)]),
    st.integers(1, 512),
    st.integers(1, 64),
    st.integers(0, 10**12),
)
def test_iso_budget_is_exact_floor(d, mn, h, k, tokens):
    m, n = mn
    F = h * m * n
    ft, fk = analysis.flops_topk(d, F, k), analysis.flops_kron(d, m, n, h, k)
    iso = analysis.iso_flops_budget((d, F, k), (d, m, n, h, k), tokens)
    assert iso * fk <= tokens * ft < (iso + 1) * fk


def test_iso_budget_equal_flops():
    # d=2, m=n=4, h=1: 2*16 + 2 for TopK, 2*8 + 16 + 2 for Kron
    assert analysis.flops_kron(2, 4, 4, 1, 1) == analysis.flops_topk(2, 16, 1) == 34
    assert analysis.iso_flops_budget((2, 16, 1), (2, 4, 4, 1, 1), 987_654) == 987_654


def test_token_entropy():
    rec = ActivationRecord(0, token_counts={1: 5, 2: 5, 3: 5, 4: 5})
    assert analysis.token_entropy(rec) == pytest.approx(math.log(4))
    assert analysis.token_entropy(ActivationRecord(0, token_counts={7: 3})) == 0.0
    two = analysis.token_entropy(ActivationRecord(0, token_counts={1: 3, 2: 1}))
    assert two == pytest.approx(-(0.75 * math.log(0.75) + 0.25 * math.log(0.25)))
    assert round(two, 4) == 0.5623
    with pytest.raises(MetricError):
        analysis.token_entropy(ActivationRecord(0))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=1, max_size=12))
def test_token_entropy_bound(counts):
    rec = ActivationRecord(0, token_counts=dict(enumerate(counts)))
    h = analysis.token_entropy(rec)
    assert -1e-12 <= h <= math.log(len(counts)) + 1e-12
    if len(set(counts)) == 1:
        assert h == pytest.approx(math.log(len(counts)))


def test_multitoken_ratio():
    assert analysis.multitoken_ratio(ActivationRecord(0, sequence_counts=[10], sequence_lengths=[10])) == 1.0
    assert analysis.multitoken_ratio(ActivationRecord(0, sequence_counts=[1], sequence_lengths=[10])) == 0.1
    rec = ActivationRecord(0, sequence_counts=[2, 5], sequence_lengths=[10, 20])
    assert analysis.multitoken_ratio(rec) == pytest.approx(0.225)
    with pytest.raises(MetricError):
        analysis.multitoken_ratio(ActivationRecord(0))


def test_record_invariants():
    with pytest.raises(ContractError):
        ActivationRecord(0, token_counts={1: -1})
    with pytest.raises(ContractError):
        ActivationRecord(0, frequency=1.5)
    with pytest.raises(ContractError):
        ActivationRecord(0, sequence_counts=[3], sequence_lengths=[2])


def test_records_from_activations():
    acts = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 0.0], [3.0, 0.0], [0.0, 0.0]])
    tokens = np.array([5, 6, 5, 7, 5])
    recs = analysis.records_from_activations(acts, tokens, [0, 3, 5])
    r = recs[0]
    assert r.token_counts == {5: 2, 7: 1}
    assert r.sequence_counts == [2, 1] and r.sequence_lengths == [3, 2]
    assert (r.act_min, r.act_max, r.act_mean, r.frequency) == (1.0, 3.0, 2.0, 0.6)
    assert analysis.multitoken_ratio(r) == pytest.approx((2 / 3 + 1 / 2) / 2)
    assert recs[1].total == 0
    with pytest.raises(ContractError):
        analysis.records_from_activations(acts, tokens, [0, 3])


def test_head_correlation_duplicates():
    rng = make_rng(0)
    base = rng.random((50, 2))
    acts = np.repeat(base, 4, axis=1)  # heads of size 4 holding copies of one feature
    rep = analysis.head_correlation_report(acts, SaeDims.kron(d=3, h=2, m=2, n=2, k=1))
    np.testing.assert_allclose(rep.within, 1.0)
    assert rep.within_mean == pytest.approx(1.0)


def test_head_correlation_against_direct_summation():
    rng = make_rng(1)
    T, h, size = 200, 3, 4
    latent = rng.standard_normal((T, h))
    acts = np.repeat(latent, size, axis=1) + 0.7 * rng.standard_normal((T, h * size))
    acts[:, 5] = 0.0  # zero-variance feature
    dims = SaeDims.kron(d=3, h=h, m=2, n=2, k=1)
    rep = analysis.head_correlation_report(acts, dims)
    valid, within, out = naive_head_means(acts, size)
    np.testing.assert_array_equal(rep.feature_ids, valid)
    np.testing.assert_allclose(rep.within, within, rtol=0, atol=1e-10)
    np.testing.assert_allclose(rep.out, out, rtol=0, atol=1e-10)
    assert list(rep.excluded) == [5]
    assert rep.within_mean > rep.out_mean


def test_head_correlation_null_case():
    acts = make_rng(2).standard_normal((4000, 16))
    rep = analysis.head_correlation_report(acts, SaeDims.kron(d=2, h=4, m=2, n=2, k=1))
    assert abs(rep.within_mean) < 0.02 and abs(rep.out_mean) < 0.02
    assert np.all(np.abs(rep.within) <= 1) and np.all(np.abs(rep.out) <= 1)
    edges, w, o = rep.histogram(10)
    assert edges.size == 11 and w.sum() == 16 and o.sum() == 16


def test_head_correlation_errors():
    dims = SaeDims.kron(d=2, h=2, m=2, n=2, k=1)
    with pytest.raises(MetricError):
        analysis.head_correlation_report(np.zeros((10, 8)), dims)
    with pytest.raises(ContractError):
        analysis.head_correlation_report(np.zeros((10, 7)), dims)
    with pytest.raises(ContractError):
        analysis.head_correlation_report(np.ones((1, 8)), dims)


def test_uniform_init_variance():
    dims = SaeDims.kron(d=64, h=64, m=2, n=32, k=8)
    p = analysis.uniform_init_kron(dims, make_rng(0))
    w = np.concatenate([p.P.ravel(), p.Q.ravel()])
    a = math.sqrt(3.0 / (2 * dims.F))
    assert np.all(np.abs(w) <= a)
    assert w.var() == pytest.approx(1.0 / (2 * dims.F), rel=0.02)
    np.testing.assert_allclose(p.W_dec, kron_decoder_from_factors(p.P, p.Q))
