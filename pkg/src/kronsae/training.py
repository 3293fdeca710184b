"""Objective terms, AdamW, the warmup + cosine schedule and the training loop."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import sae
from .errors import ContractError, MetricError, TrainingError
from .numerics import make_rng


@dataclass
class TrainConfig:
    """Optimiser and loop settings.

    Defaults are the desk-scale ones; the large-scale recipe uses
    ``batch_size=8192`` with the same learning-rate and aux settings.
    ``aux_k=None`` resolves to ``min(2k, F)``.
    """

    lr_init: float = 8e-4
    lr_min: float = 1e-6
    warmup_frac: float = 0.10
    batch_size: int = 256
    token_budget: int = 256 * 1000
    aux_coeff: float = 0.03125
    aux_k: int | None = None
    dead_threshold: int = 1_000_000
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_interval: int = 100
    raw_sum: bool = False

    def __post_init__(self):
        if not 0 < self.lr_min <= self.lr_init:
            raise ContractError(f"need 0 < lr_min <= lr_init, got {self.lr_min}, {self.lr_init}")
        if not 0 <= self.warmup_frac < 1:
            raise ContractError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.aux_coeff < 0:
            raise ContractError(f"aux_coeff must be >= 0, got {self.aux_coeff}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be positive")
        if self.eval_interval < 1:
            raise ContractError("eval_interval must be positive")

    @property
    def total_steps(self) -> int:
        return self.token_budget // self.batch_size


@dataclass(frozen=True)
class GroupSchedule:
    group_sizes: tuple[int, ...]

    @classmethod
    def single(cls, F: int) -> "GroupSchedule":
        return cls((F,))

    @classmethod
    def doubling(cls, F: int, first: int) -> "GroupSchedule":
        """``[s, s, 2s, 4s, ...]`` summing to ``F``; ``F/first`` must be a power of two."""
        sizes = [first, first]
        while sum(sizes) < F:
            sizes.append(sum(sizes))
        if sum(sizes) != F:
            raise ContractError(f"cannot split F={F} into doubling groups starting at {first}")
        return cls(tuple(sizes))

    def prefixes(self) -> tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum(self.group_sizes))

    def validate(self, F: int, head_size: int | None = None) -> "GroupSchedule":
        if any(s < 1 for s in self.group_sizes) or sum(self.group_sizes) != F:
            raise ContractError(f"group sizes {self.group_sizes} must be positive and sum to F={F}")
        if head_size is not None:
            bad = [p for p in self.prefixes() if p % head_size]
            if bad:
                raise ContractError(
                    f"prefix boundaries {bad} split a head (m*n={head_size}); "
                    "every boundary must be a multiple of m*n"
                )
        return self


@dataclass
class TrainMetrics:
    step: int
    tokens_seen: int
    lr: float
    loss: float
    ev: float
    dead_latent_count: int
    nonzero_latents_mean: float

    CSV_HEADER = ("step", "tokens", "lr", "loss", "ev", "dead", "active_mean")

    def csv_row(self) -> list:
        return [
            self.step,
            self.tokens_seen,
            repr(self.lr),
            repr(self.loss),
            repr(self.ev),
            self.dead_latent_count,
            repr(self.nonzero_latents_mean),
        ]

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "OptimizerState":
        tensors = params.tensors()
        return cls(
            m={k: np.zeros_like(a) for k, a in tensors.items()},
            v={k: np.zeros_like(a) for k, a in tensors.items()},
        )


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup to ``lr_init``, then cosine decay to ``lr_min`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    warmup = cfg.warmup_frac * total_steps
    if step < warmup:
        return cfg.lr_init * step / warmup
    if total_steps <= warmup:
        return cfg.lr_init
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


def adamw_step(params, grads, state: OptimizerState, lr: float, cfg: TrainConfig):
    """One AdamW update with bias correction and decoupled weight decay.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    g_all = grads.tensors()
    for name, g in g_all.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}", step=state.t)
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_m, new_v, updated = {}, {}, {}
    for name, p in params.tensors().items():
        g = g_all[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        p_new = p * (1.0 - lr * cfg.weight_decay) if cfg.weight_decay else p
        p_new = p_new - lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)
        new_m[name], new_v[name], updated[name] = m, v, p_new
    return params.with_tensors(**updated), OptimizerState(m=new_m, v=new_v, t=t)


def explained_variance(x, x_hat) -> float:
    """Mean over samples of ``1 - |x_b - x_hat_b|^2 / |x_b - mean(x)|^2``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape or x.ndim != 2:
        raise ContractError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    if x.shape[0] < 2:
        raise ContractError("explained variance needs at least two samples")
    err = np.sum((x - x_hat) ** 2, axis=1)
    var = np.sum((x - x.mean(axis=0)) ** 2, axis=1)
    if np.any(var <= 0):
        raise MetricError("a sample coincides with the batch mean; explained variance undefined")
    return float(np.mean(1.0 - err / var))


def aux_loss(residual, dead_latents, params, aux_k: int, scores) -> float:
    """MSE between ``residual`` and its reconstruction from the top ``aux_k`` dead latents.

    ``scores`` are the pre-TopK latent scores of the same batch.
    """
    if aux_k < 1:
        raise ContractError("aux_k must be >= 1")
    residual = np.asarray(residual, dtype=np.float64)
    mask = np.zeros(params.W_dec.shape[0], dtype=bool)
    mask[list(dead_latents)] = True
    sel = sae.aux_selection(np.asarray(scores), mask, aux_k)
    if sel is None:
        return 0.0
    vals, idx = sel
    e_hat = np.einsum("bk,bkd->bd", vals, params.W_dec[idx])
    return float(np.mean((e_hat - residual) ** 2))


def matryoshka_loss(x, f, params, schedule: GroupSchedule, raw_sum: bool = False) -> float:
    """Sum over nested prefixes of the prefix-decoder reconstruction error.

    Each term is the mean over all B*d elements, or the plain sum with
    ``raw_sum``.
    """
    x = np.asarray(x, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    total = 0.0
    for end in schedule.prefixes():
        r = f[:, :end] @ params.W_dec[:end] + params.b_dec - x
        total += float(np.sum(r * r)) if raw_sum else float(np.mean(r * r))
    return total


def check_schedule(params, dims: sae.SaeDims, schedule: GroupSchedule | None):
    if schedule is None:
        return None
    head = dims.head_size if isinstance(params, sae.KronSaeParams) else None
    schedule.validate(dims.F, head)
    return schedule.prefixes()


@dataclass
class TrainResult:
    params: object
    log: list[TrainMetrics] = field(default_factory=list)
    dead_mask: np.ndarray | None = None


def iterate_batches(data: np.ndarray, batch_size: int, rng):
    """Endless stream of batches; each pass is a fresh permutation of the rows."""
    n = data.shape[0]
    if n < batch_size:
        raise ContractError(f"dataset has {n} rows, fewer than batch_size={batch_size}")
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield data[order[start : start + batch_size]]


def train(
    params,
    dims: sae.SaeDims,
    kernel,
    data,
    cfg: TrainConfig,
    schedule: GroupSchedule | None = None,
    on_metrics=None,
) -> TrainResult:
    """Optimise ``params`` on rows of ``data`` for ``token_budget // batch_size`` steps.

    ``data`` is either an ``(N, d)`` array, sampled in seeded epochs, or an
    iterator of ``(B, d)`` batches. ``on_metrics`` is called with each
    :class:`TrainMetrics` record as it is produced.
    """
    prefixes = check_schedule(params, dims, schedule)
    kernel = sae.as_kernel(kernel)
    total = cfg.total_steps
    log: list[TrainMetrics] = []
    if total == 0:
        return TrainResult(params=params, log=log, dead_mask=np.zeros(dims.F, dtype=bool))

    rng = make_rng(cfg.seed)
    if isinstance(data, np.ndarray):
        if data.ndim != 2 or data.shape[1] != dims.d:
            raise ContractError(f"data must be (N, {dims.d}), got {data.shape}")
        batches = iterate_batches(data, cfg.batch_size, rng)
    else:
        batches = iter(data)

    loss_cfg = sae.LossConfig(
        aux_coeff=cfg.aux_coeff,
        aux_k=cfg.aux_k or min(2 * dims.k, dims.F),
        prefixes=prefixes,
        raw_sum=cfg.raw_sum,
    )
    state = OptimizerState.zeros_like(params)
    since_fired = np.zeros(dims.F, dtype=np.int64)
    tokens = 0
    for step in range(total):
        x = next(batches)
        dead = since_fired >= cfg.dead_threshold
        try:
            res = sae.forward_backward(params, dims, kernel, x, loss_cfg, dead_mask=dead)
        except TrainingError as err:
            raise TrainingError(str(err), step=step) from err
        lr = lr_at(cfg, step + 1, total)
        try:
            params, state = adamw_step(params, res.grads, state, lr, cfg)
        except TrainingError as err:
            raise TrainingError(str(err), step=step) from err
        tokens += x.shape[0]
        since_fired += x.shape[0]
        since_fired[res.metrics["fired"]] = 0
        if (step + 1) % cfg.eval_interval == 0 or step + 1 == total:
            rec = TrainMetrics(
                step=step + 1,
                tokens_seen=tokens,
                lr=lr,
                loss=res.loss,
                ev=explained_variance(x, res.x_hat),
                dead_latent_count=int(np.count_nonzero(since_fired >= cfg.dead_threshold)),
                nonzero_latents_mean=res.metrics["active_mean"],
            )
            log.append(rec)
            if on_metrics is not None:
                on_metrics(rec)
    return TrainResult(params=params, log=log, dead_mask=since_fired >= cfg.dead_threshold)


def evaluate(params, dims: sae.SaeDims, kernel, x, chunk: int = 4096) -> dict:
    """Explained variance and MSE of the reconstruction of ``x`` (evaluated in chunks)."""
    x = np.asarray(x, dtype=np.float64)
    parts = []
    for start in range(0, x.shape[0], chunk):
        trace = sae.encode(params, dims, kernel, x[start : start + chunk])
        parts.append(sae.decode_selected(params, trace.values, trace.idx))
    x_hat = np.vstack(parts)
    return {
        "ev": explained_variance(x, x_hat),
        "mse": float(np.mean((x - x_hat) ** 2)),
        "rows": int(x.shape[0]),
    }
