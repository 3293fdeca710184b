"""Command-line entry point.

Every subcommand takes an optional ``--config`` JSON file. Values resolve in
the order defaults < config file < flags. Exit codes: 0 success, 2 invalid
configuration or arguments, 3 numeric failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import re
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import analysis, formats, matching, sae, synthetic, training
from .errors import ContractError, FormatError, KronSaeError
from .numerics import make_rng

log = logging.getLogger("kronsae")

MODEL_KINDS = ("topk", "kron", "matryoshka", "kron-matryoshka")


# ---------------------------------------------------------------- configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ContractError(f"{path}: config must be a JSON object")
    return cfg


def merge(defaults: dict, override: dict, where: str = "config") -> dict:
    """Recursive overlay; keys absent from ``defaults`` are rejected to catch typos.

    A default of ``None`` accepts any value, which is how optional sections
    (a covariance spec, a group schedule) are declared.
    """
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ContractError(f"unknown key {where}.{key}; expected one of {sorted(defaults)}")
        base = defaults[key]
        if isinstance(base, dict) and isinstance(value, dict):
            out[key] = merge(base, value, f"{where}.{key}")
        else:
            out[key] = value
    return out


def _dataclass_from(cls, values: dict, where: str):
    names = {f.name for f in fields(cls)}
    extra = set(values) - names
    if extra:
        raise ContractError(f"unknown key(s) in {where}: {sorted(extra)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ContractError(f"{where}: {exc}") from exc


def _dims(values: dict, kron: bool) -> sae.SaeDims:
    d = dict(values)
    if kron and "F" not in d and all(key in d for key in ("h", "m", "n")):
        d["F"] = d["h"] * d["m"] * d["n"]
    dims = _dataclass_from(sae.SaeDims, d, "dims")
    dims.validate(kron=kron)
    return dims


def _kernel(values: dict) -> sae.Kernel:
    try:
        kind = sae.KernelKind(values.get("kind", "mand"))
    except ValueError as exc:
        raise ContractError(f"kernel.kind: {exc}") from exc
    return sae.Kernel(kind, float(values.get("epsilon", 1e-5)), bool(values.get("mask_inactive", True)))


def _covariance(values) -> synthetic.CovarianceSpec:
    if values is None:
        return synthetic.default_covariance_spec()
    return synthetic.CovarianceSpec.from_dict(values)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", label).strip("_").lower()


# ---------------------------------------------------------------- gen-synthetic

GEN_DEFAULTS = {
    "covariance": None,
    "rows": 32_768,
    "d": 64,
    "k_gen": 8,
    "ae": asdict(synthetic.ToyAeConfig()),
    "seed": 0,
    "out_dir": "synthetic",
    "dtype": "f64le",
}


def _synthetic_data(cfg: dict):
    spec = _covariance(cfg["covariance"])
    ae_cfg = _dataclass_from(synthetic.ToyAeConfig, cfg["ae"], "ae")
    S, L = synthetic.build_covariance(spec)
    data_rng, ae_rng = synthetic._spawn(int(cfg["seed"]), 2)
    x_sparse = synthetic.generate_batch(L, data_rng, int(cfg["rows"]), int(cfg["k_gen"]))
    ae, _ = synthetic.train_toy_ae(x_sparse, int(cfg["d"]), spec.F, ae_cfg, ae_rng)
    return spec, S, L, ae, synthetic.hidden_states(ae, x_sparse)


def cmd_gen_synthetic(cfg: dict) -> dict:
    out = _out_dir(cfg)
    spec, S, L, ae, hidden = _synthetic_data(cfg)
    formats.write_activations(out / "S.bin", S)
    formats.write_activations(out / "L.bin", L)
    formats.write_activations(out / "hidden.bin", hidden, cfg["dtype"])
    ae_dims = sae.SaeDims(d=int(cfg["d"]), F=spec.F, k=int(cfg["k_gen"]))
    formats.save_checkpoint(out / "ae.ksae", ae, ae_dims)
    summary = {
        "rows": int(hidden.shape[0]),
        "dim": int(hidden.shape[1]),
        "F": spec.F,
        "seed": int(cfg["seed"]),
        "degenerate_spec": spec.is_degenerate,
        "files": ["S.bin", "L.bin", "hidden.bin", "ae.ksae"],
    }
    formats.write_json(out / "synthetic.json", summary)
    return summary


# ---------------------------------------------------------------- train / eval

TRAIN_DEFAULTS = {
    "model": "kron",
    "dims": {"d": 64, "F": None, "k": 8, "h": 16, "m": 4, "n": 4},
    "kernel": {"kind": "mand", "epsilon": 1e-5, "mask_inactive": True},
    "train": asdict(training.TrainConfig()),
    "groups": None,
    "data": None,
    "holdout_frac": 0.02,
    "seed": 0,
    "out_dir": "run",
}


def _model_setup(cfg: dict):
    model = cfg["model"]
    if model not in MODEL_KINDS:
        raise ContractError(f"model must be one of {MODEL_KINDS}, got {model!r}")
    kron = model.startswith("kron")
    dims_cfg = {k: v for k, v in cfg["dims"].items() if v is not None}
    if not kron:
        dims_cfg = {k: v for k, v in dims_cfg.items() if k in ("d", "F", "k")}
    dims = _dims(dims_cfg, kron)
    kernel = _kernel(cfg["kernel"]) if kron else None
    schedule = None
    groups = cfg["groups"]
    if model.endswith("matryoshka"):
        if not isinstance(groups, dict) or not ({"sizes", "doubling"} & set(groups)):
            raise ContractError(f"model {model!r} needs groups: {{'sizes': [...]}} or {{'doubling': first}}")
        if "sizes" in groups:
            schedule = training.GroupSchedule(tuple(int(s) for s in groups["sizes"]))
        else:
            schedule = training.GroupSchedule.doubling(dims.F, int(groups["doubling"]))
        schedule.validate(dims.F, dims.head_size if kron else None)
    elif groups is not None:
        raise ContractError(f"groups are only used by Matryoshka models, not {model!r}")
    return ("kron" if kron else "topk"), dims, kernel, schedule


def _training_data(cfg: dict, d: int) -> np.ndarray:
    source = cfg["data"]
    if source is None:
        raise ContractError("no data source: set data to a file path or {'synthetic': {...}}")
    if isinstance(source, str):
        return formats.read_activations(source, dim=d)
    if isinstance(source, dict) and set(source) == {"synthetic"}:
        gen = merge(GEN_DEFAULTS, {**source["synthetic"], "seed": source["synthetic"].get("seed", cfg["seed"])})
        if int(gen["d"]) != d:
            raise ContractError(f"synthetic data has d={gen['d']}, model expects d={d}")
        return _synthetic_data(gen)[-1]
    raise ContractError("data must be a file path or {'synthetic': {...}}")


def split_holdout(x: np.ndarray, frac: float) -> tuple[np.ndarray, np.ndarray]:
    """Train on the leading rows and hold out the last ``frac`` (at least two rows)."""
    if not 0 < frac < 1:
        raise ContractError(f"holdout_frac must lie in (0, 1), got {frac}")
    n_hold = max(2, math.ceil(frac * x.shape[0]))
    if x.shape[0] - n_hold < 1:
        raise ContractError(f"{x.shape[0]} rows are too few to hold out {n_hold}")
    return x[:-n_hold], x[-n_hold:]


def cmd_train(cfg: dict) -> dict:
    kind, dims, kernel, schedule = _model_setup(cfg)
    seed = int(cfg["seed"])
    tcfg = _dataclass_from(training.TrainConfig, {**cfg["train"], "seed": seed}, "train")
    data = _training_data(cfg, dims.d)
    train_x, hold_x = split_holdout(data, float(cfg["holdout_frac"]))
    out = _out_dir(cfg)

    params = sae.init_params(kind, dims, make_rng(seed))
    result = training.train(params, dims, kernel, train_x, tcfg, schedule=schedule)
    formats.save_checkpoint(out / "model.ksae", result.params, dims, kernel)
    formats.write_csv(out / "metrics.csv", training.TrainMetrics.CSV_HEADER, [m.csv_row() for m in result.log])
    held = training.evaluate(result.params, dims, kernel, hold_x)
    last = result.log[-1] if result.log else None
    summary = {
        "model": cfg["model"],
        "dims": formats._dims_dict(dims),
        "seed": seed,
        "steps": tcfg.total_steps,
        "tokens": tcfg.total_steps * tcfg.batch_size,
        "train_rows": int(train_x.shape[0]),
        "holdout_rows": int(hold_x.shape[0]),
        "ev_holdout": held["ev"],
        "mse_holdout": held["mse"],
        "final_loss": None if last is None else last.loss,
        "dead_latents": None if last is None else last.dead_latent_count,
    }
    formats.write_json(out / "summary.json", summary)
    return summary


def cmd_eval(args) -> dict:
    params, dims, kernel = formats.load_checkpoint(args.checkpoint)
    if params.kind not in ("topk", "kron"):
        raise ContractError(f"{args.checkpoint} holds a {params.kind!r} model, not an SAE")
    x = formats.read_activations(args.data, dim=dims.d)
    res = training.evaluate(params, dims, kernel, x)
    return {"ev": res["ev"], "mse": res["mse"], "rows": res["rows"]}


# ---------------------------------------------------------------- toy experiment

TOY_DEFAULTS = {
    "covariance": None,
    "seeds": [0, 1, 2, 3, 4],
    "d": 64,
    "F": 256,
    "k": 8,
    "k_gen": 8,
    "n_rows": synthetic.ToyExperimentConfig.n_rows,
    "ae": asdict(synthetic.ToyExperimentConfig().ae),
    "sae_train": asdict(synthetic.ToyExperimentConfig().sae_train),
    "match_iter": 30,
    "models": None,
    "dump_matrices": False,
    "out_dir": "toy",
}

PER_SEED_FIELDS = ("rv", "effective_rank", "mean_corr", "rank_delta", "ev", "rv_unmatched", "match_iterations")


def _toy_models(cfg: dict) -> list[synthetic.ModelSpec]:
    if cfg["models"] is None:
        return synthetic.default_models(int(cfg["F"]), int(cfg["d"]), int(cfg["k"]))
    models = []
    for i, m in enumerate(cfg["models"]):
        kind = m.get("kind")
        if kind not in ("topk", "kron"):
            raise ContractError(f"models[{i}].kind must be 'topk' or 'kron', got {kind!r}")
        dims = _dims(m.get("dims", {}), kind == "kron")
        kernel = _kernel(m.get("kernel", {}))
        models.append(synthetic.ModelSpec(m.get("label", f"{kind}-{i}"), kind, dims, kernel))
    return models


def cmd_toy_experiment(cfg: dict) -> dict:
    spec = _covariance(cfg["covariance"])
    exp = synthetic.ToyExperimentConfig(
        d=int(cfg["d"]),
        F=int(cfg["F"]),
        k_gen=int(cfg["k_gen"]),
        n_rows=int(cfg["n_rows"]),
        ae=_dataclass_from(synthetic.ToyAeConfig, cfg["ae"], "ae"),
        sae_train=_dataclass_from(training.TrainConfig, cfg["sae_train"], "sae_train"),
        match_iter=int(cfg["match_iter"]),
    )
    models = _toy_models(cfg)
    seeds = [int(s) for s in cfg["seeds"]]
    out = _out_dir(cfg)
    report = synthetic.run_toy_experiment(spec, models, seeds, exp, keep=bool(cfg["dump_matrices"]))
    runs = report.pop("runs", [])
    rows = []
    for entry in report["per_seed"]:
        for label, metrics in entry["metrics"].items():
            rows.append([entry["seed"], label] + [repr(metrics[f]) if f in metrics else "" for f in PER_SEED_FIELDS])
    formats.write_csv(out / "per_seed.csv", ("seed", "model") + PER_SEED_FIELDS, rows)
    formats.write_json(out / "report.json", report)
    if runs:
        formats.write_activations(out / "S.bin", runs[0].S)
        for run in runs:
            for label, params in run.sae_params.items():
                match = matching.faq_match(run.ae.W.T, params.W_dec, max_iter=exp.match_iter)
                aligned = match.aligned(params.W_dec)
                formats.write_activations(out / f"C_dec_{_slug(label)}_seed{run.seed}.bin", aligned @ aligned.T)
    return report


# ---------------------------------------------------------------- match / flops


def cmd_match(args, cfg: dict) -> dict:
    X = formats.read_activations(args.x)
    Y = formats.read_activations(args.y)
    if X.shape != Y.shape:
        raise ContractError(f"matrices differ in shape: {X.shape} vs {Y.shape}")
    return matching.faq_match(X, Y, max_iter=int(cfg["max_iter"])).to_json()


FLOPS_DEFAULTS = {"d": 1536, "F": None, "k": 50, "h": 8192, "m": 2, "n": 4, "tokens": None}


def cmd_flops(cfg: dict) -> dict:
    d, k, h, m, n = (cfg[key] for key in ("d", "k", "h", "m", "n"))
    F = cfg["F"] if cfg["F"] is not None else h * m * n
    report = analysis.flops_report((d, F, k), (d, m, n, h, k), cfg["tokens"])
    return report.to_json()


# ---------------------------------------------------------------- analyze


def _load_boundaries(path, rows: int):
    try:
        meta = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read boundaries file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: boundaries file is not valid JSON: {exc}") from exc
    try:
        offsets = np.asarray(meta["offsets"], dtype=np.int64)
        token_ids = np.asarray(meta["token_ids"], dtype=np.int64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"{path}: expected integer arrays 'offsets' and 'token_ids' ({exc})") from exc
    if token_ids.shape != (rows,):
        raise ContractError(f"{path}: {token_ids.size} token ids for {rows} data rows")
    return offsets, token_ids


def latent_activations(params, dims, kernel, x, chunk: int = 4096) -> np.ndarray:
    return np.vstack([sae.encode(params, dims, kernel, x[i : i + chunk]).f for i in range(0, x.shape[0], chunk)])


def cmd_analyze(args, cfg: dict) -> dict:
    params, dims, kernel = formats.load_checkpoint(args.checkpoint)
    if params.kind not in ("topk", "kron"):
        raise ContractError(f"{args.checkpoint} holds a {params.kind!r} model, not an SAE")
    if args.sequence_stats and args.boundaries is None:
        raise ContractError("--sequence-stats needs --boundaries (offsets and token ids)")
    x = formats.read_activations(args.data, dim=dims.d)
    bounds = _load_boundaries(args.boundaries, x.shape[0]) if args.boundaries else None
    out = _out_dir(cfg)
    acts = latent_activations(params, dims, kernel, x)

    report = {"checkpoint": str(args.checkpoint), "rows": int(x.shape[0]), "head_correlation": None}
    if params.kind == "kron":
        trained = analysis.head_correlation_report(acts, dims)
        rand_params = analysis.uniform_init_kron(dims, make_rng(int(cfg["seed"])))
        rand = analysis.head_correlation_report(latent_activations(rand_params, dims, kernel, x), dims)
        report["head_correlation"] = {"trained": trained.to_json(), "random_init": rand.to_json()}
        edges, wt, ot = trained.histogram()
        _, wr, orr = rand.histogram()
        formats.write_csv(
            out / "head_correlation_hist.csv",
            ("bin_lo", "bin_hi", "within_trained", "out_trained", "within_random", "out_random"),
            [[repr(edges[i]), repr(edges[i + 1]), wt[i], ot[i], wr[i], orr[i]] for i in range(wt.size)],
        )
    if bounds is not None:
        records = analysis.records_from_activations(acts, bounds[1], bounds[0])
        stats = []
        for rec in records:
            row = rec.to_json()
            fired = rec.total > 0
            row["token_entropy"] = analysis.token_entropy(rec) if fired else None
            row["multitoken_ratio"] = analysis.multitoken_ratio(rec) if fired else None
            stats.append(row)
        cols = ("feature_id", "activations", "frequency", "min", "max", "mean", "token_entropy", "multitoken_ratio")
        formats.write_csv(out / "feature_stats.csv", cols, [["" if r[c] is None else r[c] for c in cols] for r in stats])
        live = [r for r in stats if r["activations"] > 0]
        report["sequence_stats"] = {
            "features_active": len(live),
            "mean_token_entropy": float(np.mean([r["token_entropy"] for r in live])) if live else None,
            "mean_multitoken_ratio": float(np.mean([r["multitoken_ratio"] for r in live])) if live else None,
        }
    formats.write_json(out / "analysis.json", report)
    return report


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kronsae", description="Train and analyse TopK and Kronecker sparse autoencoders.", allow_abbrev=False)
    p.add_argument("--log-level", default="WARNING", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, allow_abbrev=False)
        sp.add_argument("--config", help="JSON config file")
        return sp

    g = add("gen-synthetic", "build the toy covariance, hidden states and toy autoencoder")
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir")
    g.add_argument("--rows", type=int)

    t = add("train", "train an SAE on an activation file")
    t.add_argument("--seed", type=int)
    t.add_argument("--out-dir")
    t.add_argument("--data", help="activation file (payload or sidecar path)")
    t.add_argument("--model", choices=MODEL_KINDS)

    e = add("eval", "explained variance of a checkpoint on an activation file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the JSON result here")

    x = add("toy-experiment", "run the correlated-features toy experiment over several seeds")
    x.add_argument("--seed", type=int, help="run this single seed")
    x.add_argument("--seeds", help="comma-separated seed list")
    x.add_argument("--out-dir")
    x.add_argument("--max-iter", type=int, help="FAQ iterations per match")
    x.add_argument("--dump-matrices", action="store_true", default=None)

    m = add("match", "FAQ-align the rows of Y to the rows of X")
    m.add_argument("--x", required=True)
    m.add_argument("--y", required=True)
    m.add_argument("--max-iter", type=int)
    m.add_argument("--out")

    f = add("flops", "FLOPs and parameter counts, with an iso-FLOPs token budget")
    for name in ("d", "F", "k", "h", "m", "n"):
        f.add_argument(f"--{name}", type=int)
    f.add_argument("--tokens", type=int, help="TopK token budget to convert")
    f.add_argument("--out")

    a = add("analyze", "head correlation and per-feature token statistics")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--boundaries", help="JSON with 'offsets' and 'token_ids'")
    a.add_argument("--sequence-stats", action="store_true")
    a.add_argument("--seed", type=int, help="seed of the random-init comparison model")
    a.add_argument("--out-dir")
    return p


def _overrides(args, names) -> dict:
    out = {}
    for name in names:
        value = getattr(args, name, None)
        if value is not None:
            out[name] = value
    return out


def run(args) -> dict:
    file_cfg = load_config(args.config)
    cmd = args.command
    if cmd == "gen-synthetic":
        cfg = merge(merge(GEN_DEFAULTS, file_cfg), _overrides(args, ("seed", "out_dir", "rows")))
        return cmd_gen_synthetic(cfg)
    if cmd == "train":
        cfg = merge(TRAIN_DEFAULTS, file_cfg)
        cfg = merge(cfg, _overrides(args, ("seed", "out_dir", "data", "model")))
        return cmd_train(cfg)
    if cmd == "eval":
        result = cmd_eval(args)
        if args.out:
            formats.write_json(args.out, result)
        return result
    if cmd == "toy-experiment":
        flags = _overrides(args, ("out_dir", "dump_matrices"))
        if args.max_iter is not None:
            flags["match_iter"] = args.max_iter
        if args.seeds is not None:
            try:
                flags["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError as exc:
                raise ContractError(f"--seeds must be comma-separated integers: {exc}") from exc
        if args.seed is not None:
            flags["seeds"] = [args.seed]
        return cmd_toy_experiment(merge(merge(TOY_DEFAULTS, file_cfg), flags))
    if cmd == "match":
        cfg = merge(merge({"max_iter": 30}, file_cfg), _overrides(args, ("max_iter",)))
        result = cmd_match(args, cfg)
        if args.out:
            formats.write_json(args.out, result)
        return result
    if cmd == "flops":
        cfg = merge(merge(FLOPS_DEFAULTS, file_cfg), _overrides(args, ("d", "F", "k", "h", "m", "n", "tokens")))
        result = cmd_flops(cfg)
        if args.out:
            formats.write_json(args.out, result)
        return result
    if cmd == "analyze":
        cfg = merge(merge({"seed": 0, "out_dir": "analysis"}, file_cfg), _overrides(args, ("seed", "out_dir")))
        return cmd_analyze(args, cfg)
    raise ContractError(f"unknown command {cmd!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except KronSaeError as err:
        print(f"error: {err}", file=sys.stderr)
        return err.exit_code
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
