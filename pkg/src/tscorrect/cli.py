"""Command-line entry points.

Subcommands: train, grid-search, diagnose, synth, eval. Experiments are
described by an INI-style config file (key = value sections); command-line
flags override it. Every output lands under <out>/<run-id>/ with a JSON
manifest, per-seed epoch CSVs, checkpoints, and mask dumps. Exit codes:
0 success, 2 configuration/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import configparser
import concurrent.futures
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__
from . import losses as LO
from .data import (
    RawSeries,
    SplitSpec,
    SplitWindows,
    SyntheticConfig,
    build_splits,
    flatten_channels,
    load_csv,
    make_synthetic,
)
from .errors import ConfigError, LoadError
from .models import (
    ModelConfig,
    build_predictor,
    build_recon,
    load_checkpoint,
    restore_models,
    save_checkpoint,
)
from .sharpness import channel_histograms, kl_alignment, lambda_max
from .training import (
    TrainConfig,
    evaluate,
    predictor_loss_context,
    train_co_objective,
    train_grid_search,
    train_scam,
    train_supervised,
    write_epochs_csv,
)
from .autodiff import Tape

_SCHEMA: dict[str, dict[str, tuple]] = {
    # section -> key -> (type tag, default)
    "experiment": {
        "mode": ("str", "scam"),
        "seeds": ("int_list", [0]),
        "out_dir": ("str", "runs"),
        "threads": ("int", 1),
        "mask_dump_samples": ("int", 8),
    },
    "data": {
        "source": ("str", "synthetic"),
        "has_date_column": ("bool", True),
        "train_ratio": ("float", 0.6),
        "val_ratio": ("float", 0.2),
        "test_ratio": ("float", 0.2),
        "lookback": ("int", 96),
        "horizon": ("int", 96),
        "stride": ("int", 1),
    },
    "synthetic": {
        "length": ("int", 4000),
        "amp1": ("float", 1.0),
        "amp2": ("float", 0.5),
        "omega1": ("float", float(2.0 * np.pi / 24.0)),
        "omega2": ("float", float(2.0 * np.pi / 96.0)),
        "sigma1": ("float", 0.5),
        "sigma2": ("float", 0.05),
        "window_period": ("int", 200),
        "seed": ("int", 0),
    },
    "model": {
        "backbone": ("str", "mlp"),
        "hidden": ("int", 512),
        "snr": ("str", "both"),
        "revin_affine": ("bool", False),
        "dim_multiplier": ("int", 4),
        "series_count": ("int", 8),
        "recon_hidden": ("int", 128),
    },
    "train": {
        "lr": ("float", 1e-3),
        "beta1": ("float", 0.9),
        "beta2": ("float", 0.999),
        "adam_eps": ("float", 1e-8),
        "batch_size": ("int", 32),
        "max_epochs": ("int", 100),
        "patience": ("int", 20),
        "eval_batch": ("int", 512),
        "grid_candidates": ("int", 8),
        "grid_inner_steps": ("int", 2000),
        "grid_grad_threshold": ("float", 1e-3),
        "grid_outer_lr": ("float", 0.02),
        "grid_inner_optimizer": ("str", "adam"),
        "log_sharpness": ("bool", False),
        "sharpness_batch": ("int", 512),
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(section: str, key: str, raw: str):
    tag, _ = _SCHEMA[section][key]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tag == "int_list":
            return [int(tok) for tok in raw.split()]
        return raw
    except ValueError as e:
        raise ConfigError(f"[{section}] {key}: {e}") from None


def default_config() -> dict:
    return {sec: {k: v for k, (_, v) in keys.items()} for sec, keys in _SCHEMA.items()}


def load_config(path: str) -> dict:
    """Parse and validate a config file; unknown sections or keys reject."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (configparser.Error, UnicodeDecodeError) as e:
        raise ConfigError(f"{path}: {e}") from None
    cfg = default_config()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"{path}: unknown key '{key}' in section [{section}]")
            cfg[section][key] = _parse_value(section, key, raw)
    # data paths are relative to the config file
    src = cfg["data"]["source"]
    if src != "synthetic" and not os.path.isabs(src):
        cfg["data"]["source"] = os.path.normpath(os.path.join(os.path.dirname(os.path.abspath(path)), src))
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def data_digest(cfg: dict) -> str:
    src = cfg["data"]["source"]
    if src == "synthetic":
        blob = json.dumps(cfg["synthetic"], sort_keys=True).encode()
        return "synthetic:" + hashlib.sha256(blob).hexdigest()
    h = hashlib.sha256()
    with open(src, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def load_series(cfg: dict) -> RawSeries:
    src = cfg["data"]["source"]
    if src == "synthetic":
        return make_synthetic(SyntheticConfig(**cfg["synthetic"]))
    return load_csv(src, has_date_column=cfg["data"]["has_date_column"])


def make_bundle(cfg: dict, series: RawSeries) -> SplitWindows:
    d = cfg["data"]
    spec = SplitSpec(d["train_ratio"], d["val_ratio"], d["test_ratio"])
    return build_splits(series, spec, d["lookback"], d["horizon"], d["stride"])


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        lookback=cfg["data"]["lookback"],
        horizon=cfg["data"]["horizon"],
        **cfg["model"],
    )


def train_config(cfg: dict, seed: int) -> TrainConfig:
    return TrainConfig(mode=cfg["experiment"]["mode"], seed=seed, **cfg["train"])


def _atomic_json(path: str, payload: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _dump_masks(out_dir: str, g, f, bundle: SplitWindows, n_samples: int) -> None:
    """Mask dumps for the first validation samples, one CSV per candidate."""
    os.makedirs(out_dir, exist_ok=True)
    ds = bundle.val
    take = min(n_samples, len(ds) * ds.n_channels)
    nwin = (take + ds.n_channels - 1) // ds.n_channels
    x = flatten_channels(ds.x[:nwin])[:take]
    y = flatten_channels(ds.y[:nwin])[:take]
    yhat = f.forward(Tape(), x).value
    cands = g.forward(Tape(), y).value
    lookback = ds.lookback
    for i in range(take):
        origin = int(ds.origins[i // ds.n_channels])
        t_index = origin + lookback + np.arange(ds.horizon)
        for s in range(cands.shape[1]):
            masks = LO.compute_masks(cands[i, s], yhat[i], y[i])
            LO.write_mask_dump(
                os.path.join(out_dir, f"sample{i}_cand{s}.csv"),
                t_index, y[i], yhat[i], cands[i, s], masks,
            )


def run_seed(cfg: dict, seed: int, seed_dir: str) -> dict:
    """Train one seed; returns the manifest summary for this seed."""
    os.makedirs(os.path.join(seed_dir, "checkpoints"), exist_ok=True)
    series = load_series(cfg)
    bundle = make_bundle(cfg, series)
    mcfg = model_config(cfg)
    tcfg = train_config(cfg, seed)
    mode = tcfg.mode
    f = build_predictor(mcfg, np.random.default_rng([seed, 10]))
    summary: dict = {"seed": seed, "mode": mode}
    ckpt = os.path.join(seed_dir, "checkpoints", "best.ckpt")
    if mode == "supervised":
        _, records = train_supervised(bundle, f, tcfg)
        save_checkpoint(ckpt, mode, mcfg, seed, len(records) - 1, {"predictor": f})
    elif mode in ("co_objective", "scam"):
        g = build_recon(mcfg, np.random.default_rng([seed, 11]))
        if mode == "co_objective":
            _, _, records = train_co_objective(bundle, g, f, tcfg)
        else:
            _, _, records = train_scam(bundle, g, f, tcfg)
        save_checkpoint(ckpt, mode, mcfg, seed, len(records) - 1, {"predictor": f, "recon": g})
        _dump_masks(os.path.join(seed_dir, "masks"), g, f, bundle,
                    cfg["experiment"]["mask_dump_samples"])
    elif mode == "grid_search":
        g = build_recon(mcfg, np.random.default_rng([seed, 11]))
        factory = lambda i: build_predictor(mcfg, np.random.default_rng([seed, 100 + i]))
        _, grecords = train_grid_search(bundle, g, factory, tcfg)
        save_checkpoint(ckpt, mode, mcfg, seed, len(grecords) - 1, {"recon": g})
        traj = os.path.join(seed_dir, "trajectory.csv")
        with open(traj, "w") as fh:
            fh.write("index,loss_rec,loss_pred,loss_target,inner_steps,grad_norm,test_mse,test_mae\n")
            for r in grecords:
                fh.write(f"{r.index},{float(r.loss_rec)!r},{float(r.loss_pred)!r},{float(r.loss_target)!r},"
                         f"{r.inner_steps},{float(r.grad_norm)!r},{float(r.test_mse)!r},{float(r.test_mae)!r}\n")
        best = min(grecords, key=lambda r: r.test_mse)
        summary.update({
            "candidates": len(grecords),
            "best_candidate": best.index,
            "best_test_mse": best.test_mse,
            "best_test_mae": best.test_mae,
            "trajectory_csv": "trajectory.csv",
            "checkpoint": "checkpoints/best.ckpt",
        })
        return summary
    else:  # pragma: no cover - TrainConfig already validates
        raise ConfigError(f"unhandled mode {mode}")
    write_epochs_csv(records, os.path.join(seed_dir, "epochs.csv"))
    best_epoch = min(records, key=lambda r: r.val_mse)
    summary.update({
        "epochs": len(records),
        "best_epoch": best_epoch.epoch,
        "val_mse": best_epoch.val_mse,
        "val_mae": best_epoch.val_mae,
        "test_mse": best_epoch.test_mse,
        "test_mae": best_epoch.test_mae,
        "epochs_csv": "epochs.csv",
        "checkpoint": "checkpoints/best.ckpt",
    })
    return summary


def _run_seed_worker(cfg: dict, seed: int, seed_dir: str) -> dict:
    return run_seed(cfg, seed, seed_dir)


def run_experiment(cfg: dict, out_override: str | None = None) -> str:
    """Run all configured seeds and write the run manifest. Returns run dir."""
    out_root = out_override or cfg["experiment"]["out_dir"]
    mode = cfg["experiment"]["mode"]
    run_id = f"{mode.replace('_', '-')}-{config_digest(cfg)[:10]}"
    run_dir = os.path.join(out_root, run_id)
    os.makedirs(run_dir, exist_ok=True)
    seeds = cfg["experiment"]["seeds"]
    threads = max(1, int(cfg["experiment"]["threads"]))
    results: dict[str, dict] = {}
    if threads == 1 or len(seeds) == 1:
        for seed in seeds:
            results[str(seed)] = run_seed(cfg, seed, os.path.join(run_dir, f"seed{seed}"))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=min(threads, len(seeds))) as pool:
            futs = {
                pool.submit(_run_seed_worker, cfg, seed, os.path.join(run_dir, f"seed{seed}")): seed
                for seed in seeds
            }
            for fut in concurrent.futures.as_completed(futs):
                results[str(futs[fut])] = fut.result()
    manifest = {
        "tool": "tscorrect",
        "version": __version__,
        "created_unix": time.time(),
        "mode": mode,
        "config": cfg,
        "config_sha256": config_digest(cfg),
        "data_sha256": data_digest(cfg),
        "seeds": {k: results[k] for k in sorted(results, key=int)},
    }
    _atomic_json(os.path.join(run_dir, "manifest.json"), manifest)
    return run_dir


# ---------------------------------------------------------------------------
# subcommands


def _apply_overrides(cfg: dict, args) -> dict:
    if getattr(args, "seed", None) is not None:
        cfg["experiment"]["seeds"] = [args.seed]
    if getattr(args, "mode_override", None):
        cfg["experiment"]["mode"] = args.mode_override
    if getattr(args, "snr", None):
        cfg["model"]["snr"] = args.snr
    if getattr(args, "threads", None) is not None:
        cfg["experiment"]["threads"] = args.threads
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    run_dir = run_experiment(cfg, args.out)
    print(run_dir)
    return 0


def cmd_grid_search(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg["experiment"]["mode"] = "grid_search"
    run_dir = run_experiment(cfg, args.out)
    print(run_dir)
    return 0


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    series = make_synthetic(SyntheticConfig(**cfg["synthetic"]))
    out = args.out or "synthetic.csv"
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write("date," + ",".join(series.channel_names) + "\n")
        for t in range(series.length):
            cells = ",".join(repr(float(v)) for v in series.values[t])
            fh.write(f"{t},{cells}\n")
    print(out)
    return 0


def _load_models(args, cfg: dict):
    header, blocks = load_checkpoint(args.checkpoint)
    _, models = restore_models(header, blocks)
    return header, models


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    header, models = _load_models(args, cfg)
    if "predictor" not in models:
        raise ConfigError(f"checkpoint {args.checkpoint} holds no predictor")
    series = load_series(cfg)
    bundle = make_bundle(cfg, series)
    ds = {"train": bundle.train, "val": bundle.val, "test": bundle.test}[args.split]
    scaler = bundle.scaler if args.raw_units else None
    mse, mae = evaluate(models["predictor"], ds, cfg["train"]["eval_batch"], scaler=scaler)
    print(json.dumps({
        "checkpoint": args.checkpoint,
        "split": args.split,
        "units": "raw" if args.raw_units else "standardized",
        "mse": mse,
        "mae": mae,
        "n_windows": len(ds),
    }, sort_keys=True))
    return 0


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config)
    header, models = _load_models(args, cfg)
    if "predictor" not in models or "recon" not in models:
        raise ConfigError("diagnose needs a checkpoint holding both predictor and recon")
    f, g = models["predictor"], models["recon"]
    series = load_series(cfg)
    bundle = make_bundle(cfg, series)
    ds = {"train": bundle.train, "val": bundle.val, "test": bundle.test}[args.split]
    out = args.out or "diagnosis"
    os.makedirs(out, exist_ok=True)

    _dump_masks(os.path.join(out, "masks"), g, f, bundle, args.samples)

    # loss breakdown over a capped number of windows of the chosen split
    take = min(len(ds), max(1, args.breakdown_windows))
    x = flatten_channels(ds.x[:take])
    y = flatten_channels(ds.y[:take])
    yhat = f.forward(Tape(), x).value
    cands = g.forward(Tape(), y).value
    n_cand = cands.shape[1]
    acc = np.zeros(7)
    mask_mean = np.zeros_like(y)
    for s in range(n_cand):
        masks = LO.compute_masks(cands[:, s], yhat, y)
        b = LO.loss_breakdown(cands[:, s], yhat, y, masks)
        acc += np.array([b.rec_corrected, b.pred_corrected, b.sup_in_mask, b.sup_out_mask,
                         b.loss_rec, b.loss_pred, b.loss_target])
        mask_mean += masks.mask
    acc /= n_cand
    mask_mean /= n_cand
    breakdown = {
        "split": args.split, "windows": int(take), "candidates": int(n_cand),
        "rec_corrected": acc[0], "pred_corrected": acc[1],
        "sup_in_mask": acc[2], "sup_out_mask": acc[3],
        "loss_rec": acc[4], "loss_pred": acc[5], "loss_target": acc[6],
        "components_total": float(acc[:4].sum()),
        "co_objective": acc[4] + acc[5],
        "mask_rate": float(mask_mean.mean()),
    }
    _atomic_json(os.path.join(out, "breakdown.json"), breakdown)

    if args.sharpness:
        report: dict = {"split": args.split, "loss": "l1"}
        ctx = predictor_loss_context(f, ds, cfg["train"]["sharpness_batch"])
        total = lambda_max(ctx)
        report["total"] = {"value": total.value, "iterations": total.iterations,
                           "converged": total.converged}
        for name in sorted(ctx.segments):
            r = lambda_max(ctx, segment=name)
            report[name] = {"value": r.value, "iterations": r.iterations, "converged": r.converged}
        # masked variants weight the same L1 loss by the candidate-mean mask
        take_s = min(cfg["train"]["sharpness_batch"], len(ds), take)
        w_in = mask_mean[: take_s * ds.n_channels]
        for label, weights in (("masked_in", w_in), ("masked_out", 1.0 - w_in)):
            ctx_m = predictor_loss_context(f, ds, take_s, point_weights=weights)
            r = lambda_max(ctx_m)
            report[label] = {"value": r.value, "iterations": r.iterations, "converged": r.converged}
        _atomic_json(os.path.join(out, "sharpness.json"), report)

    # channel alignment: symmetric KL between channel distributions
    nch = ds.n_channels
    rows = []
    if nch >= 2:
        raw_ch = [y[c::nch].ravel() for c in range(nch)]
        cand_mean = cands.mean(axis=1)
        cand_ch = [cand_mean[c::nch].ravel() for c in range(nch)]
        inter = g.intermediate(Tape(), y).value
        inter_ch = [inter[c::nch].ravel() for c in range(nch)]
        for i in range(nch):
            for j in range(i + 1, nch):
                kl_y = kl_alignment(*channel_histograms([raw_ch[i], raw_ch[j]]))
                kl_c = kl_alignment(*channel_histograms([cand_ch[i], cand_ch[j]]))
                kl_m = kl_alignment(*channel_histograms([inter_ch[i], inter_ch[j]]))
                rows.append((i, j, kl_y, kl_c, kl_m))
    with open(os.path.join(out, "kl_table.csv"), "w") as fh:
        fh.write("channel_a,channel_b,kl_raw,kl_candidates,kl_intermediate\n")
        for i, j, a, b, c in rows:
            fh.write(f"{i},{j},{float(a)!r},{float(b)!r},{float(c)!r}\n")
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="tscorrect",
        description="Train time-series forecasters with self-corrected labels.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--seed", type=int, default=None, help="run a single seed")
        sp.add_argument("--out", default=None, help="output root directory")
        sp.add_argument("--mode-override", dest="mode_override", default=None,
                        choices=["supervised", "grid_search", "co_objective", "scam"])
        sp.add_argument("--snr", default=None, choices=["none", "pre", "post", "both"])
        sp.add_argument("--threads", type=int, default=None, help="seed worker pool size")

    sp = sub.add_parser("train", help="train per the configured mode")
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("grid-search", help="candidate grid search over label sets")
    common(sp)
    sp.set_defaults(fn=cmd_grid_search)

    sp = sub.add_parser("synth", help="write the configured synthetic series as CSV")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out", default=None, help="output CSV path")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("eval", help="evaluate a checkpointed predictor")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--raw-units", dest="raw_units", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("diagnose", help="mask dumps, loss breakdown, curvature, KL tables")
    sp.add_argument("--config", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="val", choices=["train", "val", "test"])
    sp.add_argument("--out", default=None, help="output directory")
    sp.add_argument("--samples", type=int, default=8, help="samples to dump masks for")
    sp.add_argument("--breakdown-windows", type=int, default=256)
    sp.add_argument("--sharpness", action="store_true", help="include curvature report")
    sp.set_defaults(fn=cmd_diagnose)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (LoadError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # keep the CLI contract: 1 on runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
