"""Command-line entry point: synth, preprocess, train, eval, attn-export, ablate, ttest."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import (
    EvaluationError,
    ablation_sweep,
    evaluate_predictions,
    paired_ttest,
    rlda_baseline,
    summarize,
)
from .export import averaged_maps, write_maps_text, write_topomaps
from .model import STPAM, VARIANTS, CheckpointError, ConfigError, ModelConfig, load_checkpoint, save_checkpoint
from .objective import Adam
from .pipeline import (
    DatasetFormatError,
    PreprocessConfig,
    RawRecording,
    balance,
    load_arrays,
    preprocess,
    read_dataset,
    stratified_split,
    write_dataset,
)
from .synth import PRESETS, SynthConfigError, benchmark_split, preset, synth_dataset
from .training import TrainConfig, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
SEED_ENV = "STPAM_SEED"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration: defaults < config file < flags < STPAM_SEED


def _load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def resolve(args: argparse.Namespace) -> dict:
    """Merge config file values under explicitly given flags; the seed env var wins over both."""
    merged = dict(_load_config_file(getattr(args, "config", None)))
    for key, value in vars(args).items():
        if key in ("config", "func", "command"):
            continue
        if value is not None or key not in merged:
            merged[key] = value
    env = os.environ.get(SEED_ENV)
    if env is not None and "seed" in merged:
        try:
            merged["seed"] = int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return merged


def _model_config(opts: dict, n_channels: int, n_times: int) -> ModelConfig:
    known = {f.name for f in fields(ModelConfig)}
    values = {k: v for k, v in opts.get("model", {}).items() if k in known}
    values.update(n_channels=n_channels, n_times=n_times, seed=int(opts["seed"]))
    if opts.get("variant"):
        values["variant"] = opts["variant"]
    return ModelConfig(**values)


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]), lr=float(opts["lr"]),
                       seed=int(opts["seed"]), max_norm=opts.get("max_norm"))


def _echo(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(o: dict) -> int:
    cfg = preset(o["preset"], trials=int(o["trials"]), seed=int(o["seed"]))
    out = Path(o["out"])
    if o.get("raw_out"):
        from .synth import generate
        rec = generate(cfg)
        np.savez(o["raw_out"], data=rec.data, fs=rec.fs, channel_names=np.array(rec.channel_names),
                 onsets=rec.onsets, labels=rec.labels, subject=rec.subject)
        _echo(f"raw recording: {rec.data.shape[1]} samples, {len(rec.onsets)} events -> {o['raw_out']}")
    ds = synth_dataset(cfg, balanced=bool(o.get("balance")))
    write_dataset(ds, out)
    n_t = int(ds.y.sum())
    _echo(f"{len(ds)} samples ({n_t} target, {len(ds) - n_t} non-target, "
          f"{100 * n_t / max(len(ds), 1):.1f}% target) -> {out}")
    return EXIT_OK


def _read_raw(path: str) -> RawRecording:
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DatasetFormatError(f"cannot read raw recording {path}: {exc}") from None
    need = {"data", "fs", "channel_names", "onsets", "labels"}
    if not need <= set(z.files):
        raise DatasetFormatError(f"raw recording lacks {sorted(need - set(z.files))}")
    subject = str(z["subject"]) if "subject" in z.files else "S0"
    return RawRecording(z["data"], float(z["fs"]), tuple(str(c) for c in z["channel_names"]),
                        z["onsets"], z["labels"], subject)


def cmd_preprocess(o: dict) -> int:
    rec = _read_raw(o["raw"])
    ds, skipped = preprocess(rec, PreprocessConfig(zscore_scope=o["zscore"]))
    write_dataset(ds, o["out"])
    _echo(f"{len(ds)} samples at {ds.fs:g} Hz -> {o['out']}" + (f" ({skipped} events skipped)" if skipped else ""))
    return EXIT_OK


def _split(ds, holdout: float, seed: int):
    if holdout <= 0:
        return np.arange(len(ds)), np.arange(0)
    return stratified_split(ds.y, 1.0 - holdout, seed)


def cmd_train(o: dict) -> int:
    ds = read_dataset(o["data"])
    seed = int(o["seed"])
    tr_idx, te_idx = _split(ds, float(o["holdout"]), seed)
    if o.get("balance"):
        tr_idx = tr_idx[balance(ds.y[tr_idx], seed)]
    X, y = load_arrays(ds)
    mcfg = _model_config(o, X.shape[1], X.shape[2])
    model = STPAM(mcfg)
    tcfg = _train_config(o)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    opt = Adam(lr=tcfg.lr, max_norm=tcfg.max_norm)
    result = train(model, X[tr_idx], y[tr_idx], tcfg, X[te_idx], y[te_idx], log=out / "train_log.tsv",
                   optimizer=opt, on_epoch=lambda r: _echo(r.line()))
    save_checkpoint(model, out / "model.ckpt", opt)
    (out / "split.json").write_text(json.dumps({"data": str(Path(o["data"]).resolve()), "seed": seed,
                                                "train": tr_idx.tolist(), "test": te_idx.tolist()}) + "\n")
    metrics = {"epochs_run": len(result.history), "seconds": result.seconds,
               "train_config": tcfg.to_dict(), "model_config": mcfg.to_dict()}
    if len(te_idx):
        pred, _ = model.predict(X[te_idx])
        metrics["holdout"] = evaluate_predictions(y[te_idx], pred, mcfg.n_classes).to_dict()
        _echo(f"holdout accuracy {100 * metrics['holdout']['accuracy']:.2f}%")
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    _echo(f"checkpoint -> {out / 'model.ckpt'}")
    return EXIT_OK


def _subset(o: dict, ds, ckpt: Path) -> np.ndarray:
    if o["subset"] == "all":
        return np.arange(len(ds))
    split_file = ckpt.parent / "split.json"
    if not split_file.exists():
        raise UsageError(f"--subset {o['subset']} needs {split_file} written by the train command")
    split = json.loads(split_file.read_text())
    return np.asarray(split[o["subset"]], dtype=np.int64)


def cmd_eval(o: dict) -> int:
    ckpt = Path(o["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model = load_checkpoint(ckpt)
    ds = read_dataset(o["data"])
    X, y = load_arrays(ds)
    if X.shape[1:] != (model.config.n_channels, model.config.n_times):
        raise ConfigError(f"dataset samples are {X.shape[1:]}, model expects "
                          f"({model.config.n_channels}, {model.config.n_times})")
    idx = _subset(o, ds, ckpt)
    if len(idx) == 0:
        raise EvaluationError("selected subset is empty")
    pred, _ = model.predict(X[idx])
    rep = evaluate_predictions(y[idx], pred, model.config.n_classes)
    text = (f"samples\t{rep.n}\naccuracy\t{rep.accuracy:.6f}\nbalanced_accuracy\t{rep.balanced_accuracy:.6f}\n"
            + "".join(f"class{k}\tprecision {p:.6f}\trecall {r:.6f}\n"
                      for k, (p, r) in enumerate(zip(rep.precision, rep.recall)))
            + "confusion\t" + json.dumps([list(r) for r in rep.confusion]) + "\n")
    print(text, end="")
    if o.get("out"):
        out = Path(o["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(json.dumps(rep.to_dict(), indent=1) + "\n")
    return EXIT_OK


def cmd_attn_export(o: dict) -> int:
    ckpt = Path(o["checkpoint"])
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    model = load_checkpoint(ckpt)
    ds = read_dataset(o["data"])
    X, y = load_arrays(ds)
    idx = np.arange(len(ds))
    if o.get("targets_only"):
        idx = idx[y == 1]
    idx = idx[: int(o["n_samples"])]
    maps = averaged_maps(model, X[idx], fs=ds.fs)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_maps_text(maps, out / "attention.txt")
    if o.get("svg"):
        write_topomaps(maps, model.layout, out)
    for e in maps.spatial:
        _echo(f"spatial expert {e}: peak electrode {maps.spatial_peak(e)}")
    for e in maps.temporal:
        a, b = maps.temporal_peak(e)
        _echo(f"temporal expert {e}: peak window {a:.0f}-{b:.0f} ms")
    return EXIT_OK


def cmd_ablate(o: dict) -> int:
    seeds = [int(s) for s in str(o["seeds"]).split(",")]
    base = _train_config(o)
    out = Path(o["out"])
    out.mkdir(parents=True, exist_ok=True)

    data = {}

    def split_for(seed: int):
        if o.get("data"):
            if "ds" not in data:
                data["ds"] = read_dataset(o["data"])
            ds = data["ds"]
            tr, te = stratified_split(ds.y, 0.75, seed)
            return ds.take(tr), ds.take(te)
        if seed not in data:
            data.clear()
            data[seed] = benchmark_split(preset(o["preset"], seed=seed), int(o["n_train"]), int(o["n_test"]))
        return data[seed]

    def run(variant: str, seed: int) -> float:
        tr, te = split_for(seed)
        Xtr, ytr = load_arrays(tr)
        Xte, yte = load_arrays(te)
        mcfg = replace(_model_config(o, Xtr.shape[1], Xtr.shape[2]), variant=variant, seed=seed)
        model = STPAM(mcfg)
        train(model, Xtr, ytr, replace(base, seed=seed))
        pred, _ = model.predict(Xte)
        return float(np.mean(pred == yte))

    table = ablation_sweep(run, seeds, log=_echo)
    (out / "ablation.tsv").write_text(table.render())
    (out / "ablation.json").write_text(json.dumps(table.to_dict(), indent=1) + "\n")
    print(table.render(), end="")
    return EXIT_OK


def _read_scores(spec: str) -> list[float]:
    p = Path(spec)
    if p.exists():
        text = p.read_text()
        try:
            obj = json.loads(text)
            if isinstance(obj, list):
                return [float(v) for v in obj]
        except json.JSONDecodeError:
            pass
        return [float(tok) for tok in text.replace(",", " ").split()]
    try:
        return [float(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"{spec!r} is neither a file nor a comma-separated list of numbers") from None


def cmd_ttest(o: dict) -> int:
    a, b = _read_scores(o["a"]), _read_scores(o["b"])
    res = paired_ttest(a, b)
    sa, sb = summarize(a), summarize(b)
    _echo(f"a: {sa}\nb: {sb}")
    flag = f" [{res.degenerate}]" if res.degenerate else ""
    _echo(f"t = {res.t:.6g}, dof = {res.dof}, p = {res.p:.6g} {res.symbol}{flag}")
    _echo("# pairs are per-seed runs standing in for per-subject scores")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=None, help="maximum epochs (default 100)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default 32)")
    p.add_argument("--lr", type=float, default=None, help="Adam learning rate (default 0.003)")
    p.add_argument("--max-norm", type=float, default=None, help="clip gradients to this global norm")


TRAIN_DEFAULTS = {"epochs": 100, "batch_size": 32, "lr": 0.003}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stpam", description=__doc__)
    parser.add_argument("--config", help="JSON file with option values (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate and preprocess a synthetic RSVP dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--balance", action="store_true", default=None,
                   help="keep all targets and an equal random draw of non-targets")
    p.add_argument("--raw-out", default=None, help="also write the raw 1024 Hz recording (.npz)")
    p.set_defaults(func=cmd_synth, _defaults={"preset": "public-like", "trials": 40, "seed": 0})

    p = sub.add_parser("preprocess", help="turn a raw recording (.npz) into a dataset directory")
    p.add_argument("--raw", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--zscore", choices=["sample", "subject"], default=None)
    p.set_defaults(func=cmd_preprocess, _defaults={"zscore": "sample"})

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", default=None)
    p.add_argument("--variant", choices=sorted(VARIANTS), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--holdout", type=float, default=None, help="stratified test fraction (default 0.25)")
    p.add_argument("--balance", action="store_true", default=None, help="balance classes in the training part")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train, _defaults={"variant": "stpam", "seed": 0, "holdout": 0.25, **TRAIN_DEFAULTS})

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--subset", choices=["all", "train", "test"], default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval, _defaults={"subset": "all"})

    p = sub.add_parser("attn-export", help="export averaged attention maps")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--targets-only", action="store_true", default=None)
    p.add_argument("--svg", action="store_true", default=None, help="also write SVG scalp plots")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_attn_export, _defaults={"n_samples": 200})

    p = sub.add_parser("ablate", help="train STM, STAM and STPAM over several seeds")
    p.add_argument("--data", default=None, help="dataset directory (default: generate from --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default 0,1,2,3,4)")
    p.add_argument("--seed", type=int, default=None, help="offset added to every seed")
    p.add_argument("--out", default=None)
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate, _defaults={"preset": "ired-like", "n_train": 1000, "n_test": 400,
                                               "seeds": "0,1,2,3,4", "seed": 0, **TRAIN_DEFAULTS})

    p = sub.add_parser("ttest", help="paired t-test on two score lists")
    p.add_argument("--a", default=None, help="file or comma-separated scores")
    p.add_argument("--b", default=None, help="file or comma-separated scores")
    p.set_defaults(func=cmd_ttest, _defaults={})
    return parser


REQUIRED = {
    "synth": ["out"], "preprocess": ["raw", "out"], "train": ["data", "out"],
    "eval": ["checkpoint", "data"], "attn-export": ["checkpoint", "data", "out"],
    "ablate": ["out"], "ttest": ["a", "b"],
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        opts = resolve(args)
        for key, value in args._defaults.items():
            if opts.get(key) is None:
                opts[key] = value
        opts.pop("_defaults", None)
        missing = [k for k in REQUIRED[args.command] if not opts.get(k)]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        if args.command == "ablate" and opts.get("seed"):
            opts["seeds"] = ",".join(str(int(s) + int(opts["seed"])) for s in str(opts["seeds"]).split(","))
        return args.func(opts)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CheckpointError, DatasetFormatError, SynthConfigError, EvaluationError,
            ValueError, OSError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
