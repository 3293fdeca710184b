"""Toy model of correlated features.

Ground-truth features ``x_sparse = L @ topk(relu(x))`` with ``x ~ N(0, I)`` and
``S = L L^T`` block-structured. A small ReLU autoencoder
``relu(W^T W x + b)`` compresses them to ``d`` dimensions; its hidden states
``W x`` are what the SAEs are trained on. Each SAE decoder is then aligned to
the autoencoder's feature directions and its covariance ``W_dec W_dec^T`` is
compared with ``S``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import matching, sae, training
from .errors import ContractError, DecompositionError, KronSaeError, TrainingError
from .numerics import cholesky, relu, topk_mask

log = logging.getLogger(__name__)

RIDGE_START = 1e-8
RIDGE_MAX = 1e-2


class CovarianceError(ContractError):
    """The block layout is invalid or cannot be made positive definite."""


@dataclass
class CovarianceSpec:
    F: int
    diagonal_blocks: list[tuple[int, int, float]] = field(default_factory=list)
    off_diagonal_blocks: list[tuple[int, int, int, int, float]] = field(default_factory=list)
    ridge: float = 0.0

    @classmethod
    def from_dict(cls, doc: dict) -> "CovarianceSpec":
        return cls(
            F=int(doc["F"]),
            diagonal_blocks=[tuple(b) for b in doc.get("diagonal_blocks", [])],
            off_diagonal_blocks=[tuple(b) for b in doc.get("off_diagonal_blocks", [])],
            ridge=float(doc.get("ridge", 0.0)),
        )

    def to_dict(self) -> dict:
        return {
            "F": self.F,
            "diagonal_blocks": [list(b) for b in self.diagonal_blocks],
            "off_diagonal_blocks": [list(b) for b in self.off_diagonal_blocks],
            "ridge": self.ridge,
        }

    @property
    def is_degenerate(self) -> bool:
        """No correlation structure at all, so RV comparisons carry no signal."""
        return not self.diagonal_blocks and not self.off_diagonal_blocks


def default_covariance_spec(F: int = 256) -> CovarianceSpec:
    """Diagonal blocks of sizes 32, 16, 8 (intra-correlation 0.6) tiled along the
    diagonal, plus two off-diagonal blocks of correlation 0.3 linking pairs of
    the large blocks."""
    sizes = (32, 16, 8)
    blocks = []
    start = 0
    i = 0
    while start + sizes[i % 3] <= F:
        blocks.append((start, sizes[i % 3], 0.6))
        start += sizes[i % 3]
        i += 1
    big = [b for b in blocks if b[1] == 32]
    off = []
    if len(big) >= 4:
        off.append((big[1][0], big[0][0], 32, 32, 0.3))
        off.append((big[3][0], big[2][0], 32, 32, 0.3))
    return CovarianceSpec(F=F, diagonal_blocks=blocks, off_diagonal_blocks=off)


def _assemble(spec: CovarianceSpec) -> np.ndarray:
    F = spec.F
    if F < 1:
        raise CovarianceError(f"F must be positive, got {F}")
    S = np.eye(F)
    taken = np.zeros((F, F), dtype=bool)

    def claim(r0, c0, rows, cols, label):
        if rows < 1 or cols < 1 or r0 < 0 or c0 < 0 or r0 + rows > F or c0 + cols > F:
            raise CovarianceError(f"{label} is out of bounds for F={F}")
        region = taken[r0 : r0 + rows, c0 : c0 + cols]
        if region.any():
            raise CovarianceError(f"{label} overlaps another block")
        region[:] = True

    for n, (start, size, corr) in enumerate(spec.diagonal_blocks):
        label = f"diagonal block {n} (start={start}, size={size})"
        if not -1.0 < corr < 1.0:
            raise CovarianceError(f"{label}: correlation {corr} outside (-1, 1)")
        claim(start, start, size, size, label)
        block = np.full((size, size), float(corr))
        np.fill_diagonal(block, 1.0)
        S[start : start + size, start : start + size] = block
    for n, (r0, c0, rows, cols, corr) in enumerate(spec.off_diagonal_blocks):
        label = f"off-diagonal block {n} (row={r0}, col={c0}, {rows}x{cols})"
        if not -1.0 < corr < 1.0:
            raise CovarianceError(f"{label}: correlation {corr} outside (-1, 1)")
        if r0 < c0 + cols and c0 < r0 + rows:
            raise CovarianceError(f"{label} intersects the main diagonal")
        claim(r0, c0, rows, cols, label)
        claim(c0, r0, cols, rows, label + " (mirror)")
        S[r0 : r0 + rows, c0 : c0 + cols] = corr
        S[c0 : c0 + cols, r0 : r0 + rows] = corr
    return S


def build_covariance(spec: CovarianceSpec) -> tuple[np.ndarray, np.ndarray]:
    """Assemble ``S`` and its Cholesky factor, adding a ridge only if needed.

    The ridge starts at ``spec.ridge`` (tried as is when positive, otherwise
    skipped) and then escalates by factors of ten from 1e-8 up to 1e-2.
    """
    S0 = _assemble(spec)
    ridges = [spec.ridge] if spec.ridge > 0 else [0.0]
    r = RIDGE_START
    while r <= RIDGE_MAX * (1 + 1e-9):
        if r > ridges[-1]:
            ridges.append(r)
        r *= 10
    last = None
    for ridge in ridges:
        S = S0 + ridge * np.eye(spec.F) if ridge else S0
        try:
            L = cholesky(S)
        except DecompositionError as err:
            last = err
            continue
        if ridge:
            log.info("covariance needed ridge %.0e", ridge)
        return S, L
    raise CovarianceError(
        f"covariance is indefinite even with ridge {RIDGE_MAX:g} (pivot {last.pivot})"
    )


def generate_batch(L: np.ndarray, rng, B: int, k_gen: int = 8) -> np.ndarray:
    """``B`` rows of ``L @ topk(relu(x), k_gen)`` with ``x ~ N(0, I_F)``."""
    F = L.shape[0]
    if not 1 <= k_gen <= F:
        raise ContractError(f"k_gen must lie in [1, {F}], got {k_gen}")
    x = rng.standard_normal((B, F))
    return topk_mask(relu(x), k_gen) @ L.T


@dataclass
class ToyAeParams:
    W: np.ndarray  # (d, F)
    b: np.ndarray  # (F,)

    kind = "toy-ae"

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "b": self.b}

    def with_tensors(self, **arrays) -> "ToyAeParams":
        t = self.tensors()
        t.update(arrays)
        return ToyAeParams(**t)


def toy_ae_forward(ae: ToyAeParams, x: np.ndarray) -> np.ndarray:
    return relu((x @ ae.W.T) @ ae.W + ae.b)


def toy_ae_loss_and_grad(ae: ToyAeParams, x: np.ndarray):
    """MSE of ``relu(W^T W x + b)`` against ``x`` and its gradient."""
    H = x @ ae.W.T
    pre = H @ ae.W + ae.b
    out = relu(pre)
    r = out - x
    loss = float(np.mean(r * r))
    G = (2.0 / r.size) * r * (pre > 0)
    # W @ (G^T x) regrouped so no F x F product is formed
    grad_W = (G @ ae.W.T).T @ x + H.T @ G
    return loss, ToyAeParams(W=grad_W, b=G.sum(axis=0))


@dataclass
class ToyAeConfig:
    steps: int = 12_000
    batch_size: int = 512
    lr: float = 1e-3
    lr_min: float = 1e-6
    warmup_frac: float = 0.05


def train_toy_ae(data: np.ndarray, d: int, F: int, cfg: ToyAeConfig, rng, W0=None) -> tuple[ToyAeParams, list[float]]:
    """Fit the bottleneck autoencoder on rows of ``data`` with AdamW + cosine LR.

    Returns the parameters and the loss recorded every 100 steps.
    """
    if d > F:
        raise ContractError(f"bottleneck d={d} must not exceed F={F}")
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != F:
        raise ContractError(f"data must be (N, {F}), got {data.shape}")
    W = rng.standard_normal((d, F)) * math.sqrt(2.0 / (d + F)) if W0 is None else np.array(W0, dtype=np.float64)
    ae = ToyAeParams(W=W, b=np.zeros(F))
    if cfg.steps == 0:
        return ae, []
    opt_cfg = training.TrainConfig(
        lr_init=cfg.lr, lr_min=cfg.lr_min, warmup_frac=cfg.warmup_frac,
        batch_size=cfg.batch_size, token_budget=cfg.steps * cfg.batch_size,
    )
    state = training.OptimizerState.zeros_like(ae)
    batches = training.iterate_batches(data, cfg.batch_size, rng)
    history = []
    for step in range(cfg.steps):
        loss, grads = toy_ae_loss_and_grad(ae, next(batches))
        if not math.isfinite(loss):
            raise TrainingError("toy autoencoder diverged", step=step)
        ae, state = training.adamw_step(ae, grads, state, training.lr_at(opt_cfg, step + 1, cfg.steps), opt_cfg)
        if (step + 1) % 100 == 0:
            history.append(loss)
    return ae, history


def hidden_states(ae: ToyAeParams, x_sparse) -> np.ndarray:
    """``W @ x`` for every row: the inputs the SAEs are trained on."""
    x_sparse = np.asarray(x_sparse, dtype=np.float64)
    if x_sparse.shape[-1] != ae.W.shape[1]:
        raise ContractError(f"rows must have F={ae.W.shape[1]} entries, got {x_sparse.shape}")
    return x_sparse @ ae.W.T


@dataclass
class ModelSpec:
    label: str
    kind: str  # "topk" | "kron"
    dims: sae.SaeDims
    kernel: sae.Kernel = field(default_factory=sae.Kernel)


def default_models(F: int = 256, d: int = 64, k: int = 8) -> list[ModelSpec]:
    return [
        ModelSpec("TopK", "topk", sae.SaeDims(d=d, F=F, k=k)),
        ModelSpec(f"Kron h=4,m=2,n={F // 8}", "kron", sae.SaeDims.kron(d=d, h=4, m=2, n=F // 8, k=k)),
    ]


@dataclass
class ToyExperimentConfig:
    """Sizes and budgets of one toy run. ``sae_train`` is reused for every SAE."""

    d: int = 64
    F: int = 256
    k_gen: int = 8
    n_rows: int = 32_768
    ae: ToyAeConfig = field(default_factory=ToyAeConfig)
    sae_train: training.TrainConfig = field(
        default_factory=lambda: training.TrainConfig(batch_size=256, token_budget=256 * 8000)
    )
    match_iter: int = 30


@dataclass
class SeedResult:
    seed: int
    metrics: dict[str, dict]
    sae_params: dict[str, object] = field(default_factory=dict)
    ae: ToyAeParams | None = None
    S: np.ndarray | None = None
    hidden: np.ndarray | None = None


def _spawn(seed: int, count: int):
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def run_toy_seed(
    spec: CovarianceSpec,
    models: list[ModelSpec],
    seed: int,
    cfg: ToyExperimentConfig,
    S=None,
    L=None,
    s_effective_rank=None,
) -> SeedResult:
    """One full pass: data, autoencoder, every SAE, matching and diagnostics."""
    if S is None or L is None:
        S, L = build_covariance(spec)
    if s_effective_rank is None:
        s_effective_rank = matching.effective_rank(matching.symmetric_eigvals(S))
    data_rng, ae_rng, *model_rngs = _spawn(seed, 2 + len(models))
    stage = "data generation"
    try:
        x_sparse = generate_batch(L, data_rng, cfg.n_rows, cfg.k_gen)
        stage = "toy autoencoder"
        ae, _ = train_toy_ae(x_sparse, cfg.d, cfg.F, cfg.ae, ae_rng)
        hidden = hidden_states(ae, x_sparse)
        features = ae.W.T  # one d-dimensional direction per ground-truth feature

        metrics = {"AE": covariance_summary(S, features, s_effective_rank)}
        fitted = {}
        for spec_m, rng in zip(models, model_rngs):
            stage = f"SAE {spec_m.label}"
            params = sae.init_params(spec_m.kind, spec_m.dims, rng)
            tcfg = training.TrainConfig(**{**asdict(cfg.sae_train), "seed": int(rng.integers(2**31))})
            result = training.train(params, spec_m.dims, spec_m.kernel, hidden, tcfg)
            stage = f"matching {spec_m.label}"
            match = matching.faq_match(features, result.params.W_dec, max_iter=cfg.match_iter)
            aligned = match.aligned(result.params.W_dec)
            entry = covariance_summary(S, aligned, s_effective_rank)
            entry["ev"] = training.evaluate(result.params, spec_m.dims, spec_m.kernel, hidden)["ev"]
            entry["rv_unmatched"] = matching.rv_coefficient(S, result.params.W_dec @ result.params.W_dec.T)
            entry["match_iterations"] = match.iterations_used
            metrics[spec_m.label] = entry
            fitted[spec_m.label] = result.params
    except KronSaeError as err:
        raise type(err)(f"seed {seed}, {stage}: {err}") from err
    return SeedResult(seed=seed, metrics=metrics, sae_params=fitted, ae=ae, S=S, hidden=hidden)


def covariance_summary(S, W, s_effective_rank) -> dict:
    diag = matching.covariance_diagnostics(S=S, factor=W, s_effective_rank=s_effective_rank)
    return {
        "rv": diag.rv,
        "effective_rank": diag.effective_rank,
        "mean_corr": diag.mean_correlation,
        "rank_delta": diag.rank_delta,
    }


def aggregate(per_seed: list[dict]) -> dict:
    """Mean (and sample std when there are at least two seeds) of every metric."""
    out = {}
    for label in per_seed[0]:
        out[label] = {}
        for key in per_seed[0][label]:
            vals = np.array([run[label][key] for run in per_seed], dtype=np.float64)
            entry = {"mean": float(vals.mean())}
            if len(vals) > 1:
                entry["std"] = float(vals.std(ddof=1))
            out[label][key] = entry
    return out


def run_toy_experiment(
    spec: CovarianceSpec,
    models: list[ModelSpec] | None = None,
    seeds=(0,),
    cfg: ToyExperimentConfig | None = None,
    keep: bool = False,
) -> dict:
    """Run every seed and aggregate. With ``keep`` the per-seed objects are
    returned under ``"runs"`` (not JSON-serialisable)."""
    cfg = cfg or ToyExperimentConfig()
    models = models or default_models(cfg.F, cfg.d)
    if spec.F != cfg.F:
        raise ContractError(f"covariance spec has F={spec.F}, experiment expects F={cfg.F}")
    if not seeds:
        raise ContractError("at least one seed is required")
    S, L = build_covariance(spec)
    s_erank = matching.effective_rank(matching.symmetric_eigvals(S))
    runs = []
    for seed in seeds:
        log.info("toy experiment seed %d", seed)
        runs.append(run_toy_seed(spec, models, seed, cfg, S=S, L=L, s_effective_rank=s_erank))
    report = {
        "degenerate_spec": spec.is_degenerate,
        "seeds": [int(s) for s in seeds],
        "s_effective_rank": s_erank,
        "models": [m.label for m in models],
        "per_seed": [{"seed": r.seed, "metrics": r.metrics} for r in runs],
        "summary": aggregate([r.metrics for r in runs]),
    }
    if keep:
        report["runs"] = runs
    return report
