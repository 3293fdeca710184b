"""Feature statistics, FLOPs accounting and iso-FLOPs planning.

FLOPs are per token and cover the forward encoder plus the sparse decoder;
backward work is not counted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricError
from .sae import KronSaeParams, SaeDims, kron_decoder_from_factors

Count = int


def _positive(**kw) -> None:
    for name, value in kw.items():
        if int(value) != value or value < 1:
            raise ContractError(f"{name} must be a positive integer, got {value!r}")


def flops_topk(d: int, F: int, k: int) -> Count:
    """Dense encoder ``d*F`` plus a ``k``-sparse decoder ``k*d``."""
    _positive(d=d, F=F, k=k)
    return d * F + k * d


def flops_kron(d: int, m: int, n: int, h: int, k: int) -> Count:
    """Thin projections ``d*h*(m+n)``, one kernel op per post-latent, sparse decoder."""
    _positive(d=d, m=m, n=n, h=h, k=k)
    return d * h * (m + n) + m * n * h + k * d


def params_topk(d: int, F: int) -> Count:
    """Trainable scalars: encoder matrix and bias, decoder matrix and bias."""
    _positive(d=d, F=F)
    return 2 * F * d + F + d


def params_kron(d: int, m: int, n: int, h: int) -> Count:
    _positive(d=d, m=m, n=n, h=h)
    F = h * m * n
    return h * (m + n) * d + h * (m + n) + F * d + d


@dataclass(frozen=True)
class FlopsReport:
    flops_topk: Count
    flops_kron: Count
    params_topk: Count
    params_kron: Count
    ratio: float
    iso_tokens: int | None = None

    def to_json(self) -> dict:
        return {
            "flops_topk": self.flops_topk,
            "flops_kron": self.flops_kron,
            "params_topk": self.params_topk,
            "params_kron": self.params_kron,
            "ratio": self.ratio,
            "iso_tokens": self.iso_tokens,
        }


def _kron_tuple(cfg) -> tuple[int, int, int, int, int]:
    if isinstance(cfg, SaeDims):
        return cfg.d, cfg.m, cfg.n, cfg.h, cfg.k
    return tuple(int(c) for c in cfg)


def _topk_tuple(cfg) -> tuple[int, int, int]:
    if isinstance(cfg, SaeDims):
        return cfg.d, cfg.F, cfg.k
    return tuple(int(c) for c in cfg)


def flops_report(topk_cfg, kron_cfg, reference_tokens: int | None = None) -> FlopsReport:
    """Compare a TopK configuration ``(d, F, k)`` with a Kron one ``(d, m, n, h, k)``.

    The two must describe the same dictionary: equal ``d`` and ``h*m*n == F``.
    """
    d, F, k = _topk_tuple(topk_cfg)
    dk, m, n, h, kk = _kron_tuple(kron_cfg)
    if dk != d:
        raise ContractError(f"input width differs: TopK d={d}, Kron d={dk}")
    if h * m * n != F:
        raise ContractError(f"Kron dictionary h*m*n={h * m * n} does not equal TopK F={F}")
    ft, fk = flops_topk(d, F, k), flops_kron(d, m, n, h, kk)
    iso = None if reference_tokens is None else iso_flops_budget((d, F, k), (d, m, n, h, kk), reference_tokens)
    return FlopsReport(
        flops_topk=ft,
        flops_kron=fk,
        params_topk=params_topk(d, F),
        params_kron=params_kron(d, m, n, h),
        ratio=fk / ft,
        iso_tokens=iso,
    )


def iso_flops_budget(topk_cfg, kron_cfg, T_topk: int) -> int:
    """Token budget giving the Kron model the same training FLOPs as TopK on ``T_topk``.

    Only factorizations that actually save compute are accepted; ``m = n = 1``
    costs more than the dense encoder it replaces and is rejected.
    """
    d, F, k = _topk_tuple(topk_cfg)
    dk, m, n, h, kk = _kron_tuple(kron_cfg)
    if T_topk < 0 or int(T_topk) != T_topk:
        raise ContractError(f"token budget must be a nonnegative integer, got {T_topk!r}")
    if m == 1 and n == 1:
        raise ContractError("m = n = 1 is not a factorization: it costs more than a dense encoder")
    ft, fk = flops_topk(d, F, k), flops_kron(dk, m, n, h, kk)
    # exact integer floor; a float product can round across an integer
    return (int(T_topk) * ft) // fk


# ---------------------------------------------------------------- activation records


@dataclass
class ActivationRecord:
    """Firing statistics of a single feature.

    ``sequence_counts[i]`` activations were seen in a sequence of
    ``sequence_lengths[i]`` tokens. Only sequences in which the feature
    fired at least once are recorded.
    """

    feature_id: int
    token_counts: dict[int, int] = field(default_factory=dict)
    sequence_counts: list[int] = field(default_factory=list)
    sequence_lengths: list[int] = field(default_factory=list)
    act_min: float = math.nan
    act_max: float = math.nan
    act_mean: float = math.nan
    frequency: float = 0.0

    def __post_init__(self):
        if any(c < 0 for c in self.token_counts.values()) or any(c < 0 for c in self.sequence_counts):
            raise ContractError(f"feature {self.feature_id}: counts must be nonnegative")
        if len(self.sequence_counts) != len(self.sequence_lengths):
            raise ContractError(f"feature {self.feature_id}: sequence counts and lengths differ in length")
        if any(c > n for c, n in zip(self.sequence_counts, self.sequence_lengths)):
            raise ContractError(f"feature {self.feature_id}: more activations than tokens in a sequence")
        if not 0.0 <= self.frequency <= 1.0:
            raise ContractError(f"feature {self.feature_id}: frequency {self.frequency} outside [0, 1]")

    @property
    def total(self) -> int:
        return int(sum(self.token_counts.values()))

    def to_json(self) -> dict:
        return {
            "feature_id": self.feature_id,
            "activations": self.total,
            "distinct_tokens": len(self.token_counts),
            "sequences": len(self.sequence_counts),
            "min": self.act_min,
            "max": self.act_max,
            "mean": self.act_mean,
            "frequency": self.frequency,
        }


def token_entropy(record: ActivationRecord) -> float:
    """Natural-log entropy of the distribution of tokens the feature fired on."""
    counts = np.array([c for c in record.token_counts.values() if c > 0], dtype=np.float64)
    if counts.sum() == 0:
        raise MetricError(f"feature {record.feature_id} never activated")
    p = counts / counts.sum()
    return float(-np.sum(p * np.log(p)))


def multitoken_ratio(record: ActivationRecord) -> float:
    """Mean over recorded sequences of activations per token."""
    if not record.sequence_counts:
        raise MetricError(f"feature {record.feature_id} has no recorded sequences")
    c = np.asarray(record.sequence_counts, dtype=np.float64)
    n = np.asarray(record.sequence_lengths, dtype=np.float64)
    if np.any(n <= 0):
        raise ContractError(f"feature {record.feature_id}: sequence lengths must be positive")
    return float(np.mean(c / n))


def records_from_activations(acts: np.ndarray, token_ids: np.ndarray, offsets: np.ndarray) -> list[ActivationRecord]:
    """Build one record per feature from a ``(T, F)`` activation stream.

    ``offsets`` are sequence boundaries ``0 = o_0 < o_1 < ... < o_S = T``;
    sequence ``s`` spans rows ``o_s`` to ``o_{s+1} - 1``.
    """
    acts = np.asarray(acts, dtype=np.float64)
    token_ids = np.asarray(token_ids, dtype=np.int64)
    offsets = np.asarray(offsets, dtype=np.int64)
    T, F = acts.shape
    if token_ids.shape != (T,):
        raise ContractError(f"expected {T} token ids, got shape {token_ids.shape}")
    if offsets.ndim != 1 or offsets.size < 2 or offsets[0] != 0 or offsets[-1] != T or np.any(np.diff(offsets) <= 0):
        raise ContractError("offsets must increase strictly from 0 to the number of rows")
    lengths = np.diff(offsets)
    seq_of_row = np.repeat(np.arange(lengths.size), lengths)
    fired = acts > 0
    records = []
    for f in range(F):
        rows = np.flatnonzero(fired[:, f])
        if rows.size == 0:
            records.append(ActivationRecord(feature_id=f))
            continue
        vals = acts[rows, f]
        toks, tcounts = np.unique(token_ids[rows], return_counts=True)
        seqs, scounts = np.unique(seq_of_row[rows], return_counts=True)
        records.append(
            ActivationRecord(
                feature_id=f,
                token_counts={int(t): int(c) for t, c in zip(toks, tcounts)},
                sequence_counts=[int(c) for c in scounts],
                sequence_lengths=[int(lengths[s]) for s in seqs],
                act_min=float(vals.min()),
                act_max=float(vals.max()),
                act_mean=float(vals.mean()),
                frequency=rows.size / T,
            )
        )
    return records


# ---------------------------------------------------------------- head correlation


@dataclass
class HeadCorrelationReport:
    """Per-feature mean correlation with same-head and with all other features.

    Arrays are indexed by ``feature_ids``; features whose activations have
    zero variance are listed in ``excluded`` and take no part. A feature
    whose head has no other valid member gets ``nan`` in ``within``.
    """

    feature_ids: np.ndarray
    within: np.ndarray
    out: np.ndarray
    excluded: np.ndarray
    head_size: int

    @property
    def within_mean(self) -> float:
        w = self.within[np.isfinite(self.within)]
        return float(w.mean()) if w.size else math.nan

    @property
    def out_mean(self) -> float:
        o = self.out[np.isfinite(self.out)]
        return float(o.mean()) if o.size else math.nan

    def histogram(self, bins: int = 40) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Counts of per-feature means on a fixed grid over [-1, 1]."""
        edges = np.linspace(-1.0, 1.0, bins + 1)
        w, _ = np.histogram(self.within[np.isfinite(self.within)], edges)
        o, _ = np.histogram(self.out[np.isfinite(self.out)], edges)
        return edges, w, o

    def to_json(self) -> dict:
        return {
            "head_size": self.head_size,
            "features": int(self.feature_ids.size),
            "excluded": [int(i) for i in self.excluded],
            "within_mean": self.within_mean,
            "out_mean": self.out_mean,
        }


def pearson_matrix(acts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Correlation matrix of the columns of ``acts`` with nonzero variance.

    Returns ``(corr, valid)`` where ``valid`` holds the kept column indices.
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 2:
        raise ContractError(f"need a (T, F) matrix with T >= 2, got shape {acts.shape}")
    centred = acts - acts.mean(axis=0)
    ss = np.einsum("tf,tf->f", centred, centred)
    scale = np.max(ss) if ss.size else 0.0
    valid = np.flatnonzero(ss > 1e-24 * max(scale, 1.0))
    if valid.size == 0:
        raise MetricError("every feature has zero variance")
    c = centred[:, valid] / np.sqrt(ss[valid])
    corr = np.clip(c.T @ c, -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return corr, valid


def head_correlation_report(latent_activations, dims: SaeDims) -> HeadCorrelationReport:
    """Split each feature's mean correlation into its own head and the rest.

    Heads are contiguous blocks of ``m*n`` latents. Correlation is on raw
    activation values; the feature itself is excluded from its head mean.
    """
    acts = np.asarray(latent_activations, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[1] != dims.F:
        raise ContractError(f"expected activations of shape (T, {dims.F}), got {acts.shape}")
    corr, valid = pearson_matrix(acts)
    size = dims.head_size
    head = valid // size
    same = head[:, None] == head[None, :]
    np.fill_diagonal(same, False)
    other = head[:, None] != head[None, :]
    n_same = same.sum(axis=1)
    n_other = other.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        within = np.where(n_same > 0, (corr * same).sum(axis=1) / n_same, np.nan)
        out = np.where(n_other > 0, (corr * other).sum(axis=1) / n_other, np.nan)
    excluded = np.setdiff1d(np.arange(dims.F), valid)
    return HeadCorrelationReport(feature_ids=valid, within=within, out=out, excluded=excluded, head_size=size)


def uniform_init_kron(dims: SaeDims, rng: np.random.Generator) -> KronSaeParams:
    """Random KronSAE with symmetric uniform weights of the normal init's variance.

    The normal init draws ``N(0, 1) / sqrt(2F)``; a uniform on ``[-a, a]``
    has variance ``a**2 / 3``, so ``a = sqrt(3 / (2F))``. Biases start at zero
    and the decoder is built from the factors exactly as in training init.
    """
    dims.validate(kron=True)
    a = math.sqrt(3.0 / (2.0 * dims.F))
    w = rng.uniform(-a, a, size=(dims.h, dims.m + dims.n, dims.d))
    P, Q = w[:, : dims.m].copy(), w[:, dims.m :].copy()
    return KronSaeParams(
        P=P,
        Q=Q,
        b_enc=np.zeros(dims.h * (dims.m + dims.n)),
        W_dec=kron_decoder_from_factors(P, Q),
        b_dec=np.zeros(dims.d),
    )
