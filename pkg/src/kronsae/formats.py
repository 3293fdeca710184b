"""On-disk formats: activation/matrix files and model checkpoints.

Activation file
    A JSON sidecar ``{"rows", "dim", "dtype", "layout", "payload"}`` next to a
    raw little-endian payload of exactly ``rows * dim`` values in row-major
    order. ``dtype`` is ``"f32le"`` or ``"f64le"``. Square matrices (S, L,
    C_dec) use the same format.

Checkpoint
    ``b"KSAE"``, a little-endian uint32 format version, a uint32 header
    length and a UTF-8 JSON header (model kind, dims, kernel, tensor names
    and shapes), followed by the tensors as little-endian float64 in header
    order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError
from .sae import Kernel, KernelKind, KronSaeParams, SaeDims, TopKSaeParams
from .synthetic import ToyAeParams

DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
MAGIC = b"KSAE"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path if path.suffix == ".json" else path.with_name(path.name + ".json")


def write_activations(path, x: np.ndarray, dtype: str = "f64le") -> Path:
    """Write ``x`` (rows x dim) as ``path`` plus a ``path.json`` sidecar; returns the sidecar."""
    if dtype not in DTYPES:
        raise ContractError(f"dtype must be one of {sorted(DTYPES)}, got {dtype!r}")
    x = np.asarray(x)
    if x.ndim != 2:
        raise ContractError(f"activation matrix must be 2-D, got shape {x.shape}")
    path = Path(path)
    if path.suffix == ".json":
        raise ContractError(f"payload path must not end in .json: {path}")
    side = sidecar_path(path)
    meta = {"rows": int(x.shape[0]), "dim": int(x.shape[1]), "dtype": dtype, "layout": "row-major", "payload": path.name}
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(x, dtype=DTYPES[dtype]).tofile(path)
        side.write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
    return side


def read_activations(path, dim: int | None = None) -> np.ndarray:
    """Load an activation file as float64; ``path`` may name the payload or the sidecar.

    ``dim`` is checked against the sidecar before the payload is read.
    """
    side = sidecar_path(path)
    try:
        meta = json.loads(side.read_text())
    except OSError as exc:
        raise FormatError(f"cannot read sidecar {side}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side}: sidecar is not valid JSON: {exc}") from exc
    try:
        rows, width, dtype, layout = int(meta["rows"]), int(meta["dim"]), meta["dtype"], meta["layout"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
    if dtype not in DTYPES:
        raise FormatError(f"{side}: unsupported dtype {dtype!r}")
    if layout != "row-major":
        raise FormatError(f"{side}: unsupported layout {layout!r}")
    if rows < 0 or width < 1:
        raise FormatError(f"{side}: invalid shape ({rows}, {width})")
    if dim is not None and width != dim:
        raise ContractError(f"{side}: data has dim {width}, model expects d={dim}")
    payload = side.with_name(meta.get("payload", side.name[: -len(".json")]))
    expected = rows * width * DTYPES[dtype].itemsize
    try:
        size = os.path.getsize(payload)
        if size != expected:
            raise FormatError(f"{payload}: payload has {size} bytes, sidecar implies {expected}")
        data = np.fromfile(payload, dtype=DTYPES[dtype])
    except OSError as exc:
        raise FormatError(f"cannot read payload {payload}: {exc}") from exc
    return data.reshape(rows, width).astype(np.float64)


# ---------------------------------------------------------------- checkpoints


def _dims_dict(dims: SaeDims) -> dict:
    return {"d": dims.d, "F": dims.F, "k": dims.k, "h": dims.h, "m": dims.m, "n": dims.n}


def save_checkpoint(path, params, dims: SaeDims, kernel: Kernel | None = None) -> None:
    tensors = params.tensors()
    header = {
        "kind": params.kind,
        "dims": _dims_dict(dims),
        "kernel": None
        if kernel is None
        else {"kind": kernel.kind.value, "epsilon": kernel.epsilon, "mask_inactive": kernel.mask_inactive},
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
            fh.write(blob)
            for v in tensors.values():
                fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    """Return ``(params, dims, kernel)``; ``kernel`` is ``None`` unless the model is a KronSAE.

    Magic and version are checked from the first 12 bytes before anything
    else is read.
    """
    try:
        with open(path, "rb") as fh:
            prefix = fh.read(_PREFIX.size)
            if len(prefix) != _PREFIX.size:
                raise FormatError(f"{path}: too short to be a checkpoint")
            magic, version, hlen = _PREFIX.unpack(prefix)
            if magic != MAGIC:
                raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
            if version != VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {version}, expected {VERSION}")
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: corrupt checkpoint header ({exc})") from exc
            tensors = {}
            for spec in header["tensors"]:
                shape = tuple(int(s) for s in spec["shape"])
                count = int(np.prod(shape, dtype=np.int64))
                raw = fh.read(8 * count)
                if len(raw) != 8 * count:
                    raise FormatError(f"{path}: truncated tensor {spec['name']}")
                tensors[spec["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            if fh.read(1):
                raise FormatError(f"{path}: trailing bytes after the last tensor")
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc

    dims = SaeDims(**header["dims"])
    kind = header["kind"]
    if kind == "kron":
        params = KronSaeParams(**tensors)
    elif kind == "topk":
        params = TopKSaeParams(**tensors)
    elif kind == ToyAeParams.kind:
        params = ToyAeParams(**tensors)
    else:
        raise FormatError(f"{path}: unknown model kind {kind!r}")
    k = header.get("kernel")
    kernel = None if k is None else Kernel(KernelKind(k["kind"]), float(k["epsilon"]), bool(k["mask_inactive"]))
    return params, dims, kernel


def write_csv(path, header, rows) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc


def write_json(path, obj) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise FormatError(f"cannot write {path}: {exc}") from exc
