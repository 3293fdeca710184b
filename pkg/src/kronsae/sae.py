"""TopK SAE and KronSAE: parameters, initialisation, forward and backward passes.

Gradients are written out by hand. TopK and ReLU masks are treated as fixed
for the duration of a forward/backward call, so gradients reach only the
latents selected on that call.

KronSAE encodes each head ``k`` with a base map ``P[k]`` (m x d) and an
extension map ``Q[k]`` (n x d). Post-latent ``(k, i, j)`` combines base
``i`` and extension ``j`` and sits at flat index ``k*m*n + i*n + j``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ContractError, TrainingError
from .numerics import Rng, relu, topk_indices


class KernelKind(str, enum.Enum):
    MAND = "mand"
    RELU_PRODUCT = "relu_product"
    RAW_PRODUCT = "raw_product"


@dataclass(frozen=True)
class Kernel:
    """Interaction kernel plus its numerical options.

    ``mask_inactive=False`` reproduces the reference pseudocode literally:
    ``sqrt(p*q + eps)`` is evaluated on every pair, so inactive pairs score
    ``sqrt(eps)`` and can compete in TopK.
    """

    kind: KernelKind = KernelKind.MAND
    epsilon: float = 1e-5
    mask_inactive: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.epsilon < 0:
            raise ContractError(f"epsilon must be >= 0, got {self.epsilon}")


def as_kernel(kernel) -> Kernel:
    if isinstance(kernel, Kernel):
        return kernel
    if kernel is None:  # TopK SAEs carry no kernel
        return Kernel()
    return Kernel(KernelKind(kernel))


@dataclass(frozen=True)
class SaeDims:
    d: int
    F: int
    k: int
    h: int = 1
    m: int = 1
    n: int = 1

    @classmethod
    def kron(cls, d: int, h: int, m: int, n: int, k: int) -> "SaeDims":
        return cls(d=d, F=h * m * n, k=k, h=h, m=m, n=n)

    def validate(self, kron: bool = False) -> "SaeDims":
        for name in ("d", "F", "k", "h", "m", "n"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive, got {getattr(self, name)}")
        if self.k > self.F:
            raise ContractError(f"k={self.k} exceeds dictionary size F={self.F}")
        if kron and self.F != self.h * self.m * self.n:
            raise ContractError(
                f"KronSAE needs F = h*m*n, got F={self.F}, h*m*n={self.h * self.m * self.n}"
            )
        return self

    @property
    def head_size(self) -> int:
        return self.m * self.n


def flat_index(dims: SaeDims, head: int, i: int, j: int) -> int:
    return head * dims.m * dims.n + i * dims.n + j


def unflat_index(dims: SaeDims, idx: int) -> tuple[int, int, int]:
    head, rest = divmod(idx, dims.m * dims.n)
    i, j = divmod(rest, dims.n)
    return head, i, j


class _Params:
    """Shared tensor plumbing for the parameter dataclasses."""

    def tensors(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def with_tensors(self, **arrays):
        return replace(self, **arrays)

    def zeros_like(self):
        return replace(self, **{k: np.zeros_like(v) for k, v in self.tensors().items()})

    def copy(self):
        return replace(self, **{k: v.copy() for k, v in self.tensors().items()})

    def num_encoder_weights(self) -> int:
        raise NotImplementedError


@dataclass
class TopKSaeParams(_Params):
    W_enc: np.ndarray  # (F, d)
    b_enc: np.ndarray  # (F,)
    W_dec: np.ndarray  # (F, d), rows are dictionary directions
    b_dec: np.ndarray  # (d,)

    kind = "topk"

    def num_encoder_weights(self) -> int:
        return self.W_enc.size


@dataclass
class KronSaeParams(_Params):
    P: np.ndarray  # (h, m, d) base maps
    Q: np.ndarray  # (h, n, d) extension maps
    b_enc: np.ndarray  # (h*(m+n),), per head [base m | extension n]
    W_dec: np.ndarray  # (h*m*n, d)
    b_dec: np.ndarray  # (d,)

    kind = "kron"

    @property
    def h(self) -> int:
        return self.P.shape[0]

    @property
    def m(self) -> int:
        return self.P.shape[1]

    @property
    def n(self) -> int:
        return self.Q.shape[1]

    def split_bias(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.b_enc.reshape(self.h, self.m + self.n)
        return b[:, : self.m], b[:, self.m :]

    def num_encoder_weights(self) -> int:
        return self.P.size + self.Q.size


def _normalize_rows(w: np.ndarray) -> np.ndarray:
    return w / np.linalg.norm(w, axis=1, keepdims=True)


def init_topk(dims: SaeDims, rng: Rng) -> TopKSaeParams:
    dims.validate()
    w = rng.standard_normal((dims.F, dims.d)) / np.sqrt(2.0 * dims.F)
    return TopKSaeParams(
        W_enc=w,
        b_enc=np.zeros(dims.F),
        W_dec=_normalize_rows(w.copy()),
        b_dec=np.zeros(dims.d),
    )


def kron_decoder_from_factors(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Unit rows ``P[k, i] + Q[k, j]`` flattened in (k, i, j) row-major order."""
    h, m, d = P.shape
    n = Q.shape[1]
    rows = P[:, :, None, :] + Q[:, None, :, :]
    return _normalize_rows(rows.reshape(h * m * n, d))


def init_kron(dims: SaeDims, rng: Rng) -> KronSaeParams:
    dims.validate(kron=True)
    h, m, n, d = dims.h, dims.m, dims.n, dims.d
    w = rng.standard_normal((h, m + n, d)) / np.sqrt(2.0 * dims.F)
    P = w[:, :m].copy()
    Q = w[:, m:].copy()
    return KronSaeParams(
        P=P,
        Q=Q,
        b_enc=np.zeros(h * (m + n)),
        W_dec=kron_decoder_from_factors(P, Q),
        b_dec=np.zeros(d),
    )


def init_params(kind: str, dims: SaeDims, rng: Rng):
    if kind == "topk":
        return init_topk(dims, rng)
    if kind == "kron":
        return init_kron(dims, rng)
    raise ContractError(f"unknown architecture {kind!r}")


def kernel_eval(kind, u, v, epsilon: float = 0.0, mask_inactive: bool = True):
    """Elementwise interaction kernel; ``u`` and ``v`` broadcast against each other."""
    kind = KernelKind(kind)
    if epsilon < 0:
        raise ContractError(f"epsilon must be >= 0, got {epsilon}")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if kind is KernelKind.RAW_PRODUCT:
        out = u * v
    elif kind is KernelKind.RELU_PRODUCT:
        out = relu(u) * relu(v)
    else:
        out = np.sqrt(relu(u) * relu(v) + epsilon)
        if mask_inactive:
            out = np.where((u > 0) & (v > 0), out, 0.0)
    return out[()] if out.ndim == 0 else out


@dataclass
class EncoderTrace:
    """Intermediate values of one encoder pass over a batch.

    ``scores`` are the pre-TopK post-latents, ``f`` the dense sparse code and
    ``idx`` the selected columns per row. The pre-latent fields are ``None``
    for a plain TopK SAE.
    """

    scores: np.ndarray  # (B, F)
    f: np.ndarray  # (B, F)
    idx: np.ndarray  # (B, k)
    pre: np.ndarray | None = None  # TopK SAE: W_enc x + b_enc
    u: np.ndarray | None = None  # (B, h, m)
    v: np.ndarray | None = None  # (B, h, n)
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    z: np.ndarray | None = None  # (B, h, m, n)

    @property
    def values(self) -> np.ndarray:
        return np.take_along_axis(self.f, self.idx, axis=1)


def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != d:
        raise ContractError(f"input must have trailing dimension d={d}, got shape {x.shape}")
    return x, single


def _select(scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    idx = topk_indices(scores, k)
    f = np.zeros_like(scores)
    np.put_along_axis(f, idx, np.take_along_axis(scores, idx, axis=1), axis=1)
    return f, idx


def kron_scores(params: KronSaeParams, kernel, x: np.ndarray):
    """Pre-latents and flattened post-latent scores for a batch ``x`` (B x d)."""
    kernel = as_kernel(kernel)
    h, m, n = params.h, params.m, params.n
    B = x.shape[0]
    b_u, b_v = params.split_bias()
    u = (x @ params.P.reshape(h * m, -1).T).reshape(B, h, m) + b_u
    v = (x @ params.Q.reshape(h * n, -1).T).reshape(B, h, n) + b_v
    p, q = relu(u), relu(v)
    z = kernel_eval(
        kernel.kind, u[..., :, None], v[..., None, :], kernel.epsilon, kernel.mask_inactive
    )
    return u, v, p, q, z


def encode(params, dims: SaeDims, kernel, x) -> EncoderTrace:
    """Run the encoder on one vector or a ``(B, d)`` batch."""
    x, _ = _as_batch(x, dims.d)
    if isinstance(params, KronSaeParams):
        u, v, p, q, z = kron_scores(params, kernel, x)
        scores = z.reshape(x.shape[0], -1)
        f, idx = _select(scores, dims.k)
        return EncoderTrace(scores=scores, f=f, idx=idx, u=u, v=v, p=p, q=q, z=z)
    pre = x @ params.W_enc.T + params.b_enc
    scores = relu(pre)
    f, idx = _select(scores, dims.k)
    return EncoderTrace(scores=scores, f=f, idx=idx, pre=pre)


def decode(params, f) -> np.ndarray:
    """``f @ W_dec + b_dec``, touching only the rows of ``W_dec`` whose latent is nonzero."""
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    if single:
        f = f[None, :]
    if f.shape[1] != params.W_dec.shape[0]:
        raise ContractError(f"code has {f.shape[1]} latents, decoder has {params.W_dec.shape[0]}")
    out = np.tile(params.b_dec, (f.shape[0], 1))
    rows, cols = np.nonzero(f)
    if rows.size:
        np.add.at(out, rows, f[rows, cols, None] * params.W_dec[cols])
    return out[0] if single else out


def decode_selected(params, values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Decode from per-row ``(values, indices)`` pairs, each of shape (B, k)."""
    return np.einsum("bk,bkd->bd", values, params.W_dec[idx]) + params.b_dec


@dataclass
class LossConfig:
    """Which terms enter the training objective.

    ``prefixes`` are the cumulative Matryoshka boundaries; ``None`` means the
    single full-dictionary prefix, i.e. plain MSE. With ``raw_sum`` the
    prefix terms are summed squared errors instead of means over B*d.
    """

    aux_coeff: float = 0.0
    aux_k: int = 16
    prefixes: tuple[int, ...] | None = None
    raw_sum: bool = False


@dataclass
class StepResult:
    loss: float
    metrics: dict = field(default_factory=dict)
    grads: object = None
    trace: EncoderTrace | None = None
    x_hat: np.ndarray | None = None


def aux_selection(scores: np.ndarray, dead_mask: np.ndarray, aux_k: int):
    """Top ``aux_k`` scores per row among dead latents.

    Returns ``(values, idx)`` of shape (B, k'), with ``k' = min(aux_k, #dead)``,
    or ``None`` when no latent is dead.
    """
    dead = np.flatnonzero(dead_mask)
    if dead.size == 0 or aux_k < 1:
        return None
    kk = min(aux_k, dead.size)
    local = topk_indices(scores[:, dead], kk)
    idx = dead[local]
    return np.take_along_axis(scores, idx, axis=1), idx


def _check_prefixes(prefixes, F: int, head_size: int | None):
    if prefixes is None:
        return (F,)
    prefixes = tuple(int(p) for p in prefixes)
    if not prefixes or prefixes[-1] != F or any(b <= a for a, b in zip((0,) + prefixes, prefixes)):
        raise ContractError(f"prefix boundaries must increase strictly to F={F}, got {prefixes}")
    if head_size is not None and any(p % head_size for p in prefixes):
        raise ContractError(
            f"Kron Matryoshka prefixes must be multiples of m*n={head_size}, got {prefixes}"
        )
    return prefixes


def _kernel_backward(kernel: Kernel, trace: EncoderTrace, rows, cols, g):
    """Map gradients on selected post-latents back to pre-activations ``u`` and ``v``.

    ``rows``, ``cols`` and ``g`` list the (batch row, flat latent, gradient)
    triples that carry signal; every other post-latent has zero gradient, so
    the backward pass costs O(B*k) instead of O(B*F).
    """
    B, h, m = trace.u.shape
    n = trace.v.shape[2]
    head, rem = np.divmod(cols, m * n)
    i, j = np.divmod(rem, n)
    ui = trace.u[rows, head, i]
    vj = trace.v[rows, head, j]
    if kernel.kind is KernelKind.RAW_PRODUCT:
        gu, gv = g * vj, g * ui
    elif kernel.kind is KernelKind.RELU_PRODUCT:
        gu = g * relu(vj) * (ui > 0)
        gv = g * relu(ui) * (vj > 0)
    else:
        # d sqrt(pq + eps) / dp = q / (2 sqrt(pq + eps)), zero off the active set
        zz = trace.z[rows, head, i, j]
        active = (ui > 0) & (vj > 0) & (zz > 0)
        w = np.where(active, g / (2.0 * np.where(active, zz, 1.0)), 0.0)
        gu, gv = w * vj, w * ui
    g_u = np.bincount(rows * (h * m) + head * m + i, weights=gu, minlength=B * h * m)
    g_v = np.bincount(rows * (h * n) + head * n + j, weights=gv, minlength=B * h * n)
    return g_u.reshape(B, h, m), g_v.reshape(B, h, n)


def _gather_dot(W: np.ndarray, idx: np.ndarray, g: np.ndarray) -> np.ndarray:
    """``(g @ W.T)`` evaluated only at columns ``idx`` (B x k)."""
    return np.matmul(W[idx], g[:, :, None])[..., 0]


def forward_backward(
    params,
    dims: SaeDims,
    kernel,
    batch,
    loss_cfg: LossConfig | None = None,
    dead_mask: np.ndarray | None = None,
    aux_target: np.ndarray | None = None,
    need_grads: bool = True,
) -> StepResult:
    """Loss, metrics and exact gradients for one batch.

    The auxiliary term reconstructs the residual ``x - x_hat`` from the top
    ``aux_k`` dead latents; the residual is a constant target (no gradient
    flows through it). ``aux_target`` overrides that residual, which lets a
    finite-difference check hold it fixed.
    """
    loss_cfg = loss_cfg or LossConfig()
    kernel = as_kernel(kernel)
    x, _ = _as_batch(batch, dims.d)
    B, d = x.shape
    if B == 0:
        raise ContractError("batch is empty")
    if not np.all(np.isfinite(x)):
        raise TrainingError("input batch contains non-finite values")
    is_kron = isinstance(params, KronSaeParams)
    prefixes = _check_prefixes(loss_cfg.prefixes, dims.F, dims.head_size if is_kron else None)

    trace = encode(params, dims, kernel, x)
    idx = trace.idx
    W_dec = params.W_dec
    norm = 1.0 if loss_cfg.raw_sum else 1.0 / (B * d)

    f = trace.f
    g_sel = np.zeros(idx.shape) if need_grads else None
    g_Wdec = np.zeros_like(W_dec) if need_grads else None
    g_bdec = np.zeros(d) if need_grads else None

    # Matryoshka prefixes; the last one is the full reconstruction.
    loss = 0.0
    x_hat = None
    for end in prefixes:
        rec = f[:, :end] @ W_dec[:end] + params.b_dec
        r = rec - x
        loss += float(np.sum(r * r)) * norm
        if end == dims.F:
            x_hat = rec
        if need_grads:
            g_rec = (2.0 * norm) * r
            g_bdec += g_rec.sum(axis=0)
            g_Wdec[:end] += f[:, :end].T @ g_rec
            contrib = _gather_dot(W_dec, idx, g_rec)
            g_sel += contrib if end == dims.F else contrib * (idx < end)
    mse = float(np.mean((x_hat - x) ** 2))
    rows = np.repeat(np.arange(B), idx.shape[1])
    cols = idx.ravel()

    aux = 0.0
    if loss_cfg.aux_coeff > 0 and dead_mask is not None:
        sel = aux_selection(trace.scores, dead_mask, loss_cfg.aux_k)
        if sel is not None:
            a_vals, a_idx = sel
            f_aux = np.zeros_like(f)
            np.put_along_axis(f_aux, a_idx, a_vals, axis=1)
            target = (x - x_hat) if aux_target is None else np.asarray(aux_target)
            r_aux = f_aux @ W_dec - target
            aux = float(np.mean(r_aux**2))
            loss += loss_cfg.aux_coeff * aux
            if need_grads:
                g_e = (2.0 * loss_cfg.aux_coeff / (B * d)) * r_aux
                g_Wdec += f_aux.T @ g_e
                g_aux = _gather_dot(W_dec, a_idx, g_e)
                rows = np.concatenate([rows, np.repeat(np.arange(B), a_idx.shape[1])])
                cols = np.concatenate([cols, a_idx.ravel()])
                g_sel = np.concatenate([g_sel.ravel(), g_aux.ravel()])

    if not np.isfinite(loss):
        raise TrainingError("non-finite loss")

    fired = (trace.f > 0).any(axis=0)
    metrics = {
        "mse": mse,
        "aux": aux,
        "active_mean": float(np.count_nonzero(trace.f > 0) / B),
        "fired": fired,
    }
    result = StepResult(loss=loss, metrics=metrics, trace=trace, x_hat=x_hat)
    if not need_grads:
        return result

    g_sel = g_sel.ravel()
    if is_kron:
        g_u, g_v = _kernel_backward(kernel, trace, rows, cols, g_sel)
        h, m, n = params.h, params.m, params.n
        g_P = (g_u.reshape(B, h * m).T @ x).reshape(h, m, d)
        g_Q = (g_v.reshape(B, h * n).T @ x).reshape(h, n, d)
        g_b = np.concatenate([g_u.sum(axis=0), g_v.sum(axis=0)], axis=1).ravel()
        grads = KronSaeParams(P=g_P, Q=g_Q, b_enc=g_b, W_dec=g_Wdec, b_dec=g_bdec)
    else:
        g_pre = np.bincount(rows * dims.F + cols, weights=g_sel, minlength=B * dims.F)
        g_pre = g_pre.reshape(B, dims.F) * (trace.pre > 0)
        grads = TopKSaeParams(
            W_enc=g_pre.T @ x, b_enc=g_pre.sum(axis=0), W_dec=g_Wdec, b_dec=g_bdec
        )
    result.grads = grads
    return result
