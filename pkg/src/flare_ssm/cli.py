"""``flare-ssm`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import metrics
from . import train as tr
from .config import RunConfig, load_config, make_config, parse_text
from .data.generator import class_histogram, generate_dataset
from .data.io import FlareDataset, write_dataset
from .errors import ConfigError, DataError, FlareSsmError

COMMANDS = ("generate", "pretrain", "train", "eval", "metrics", "inspect")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flare-ssm", description="Synthetic solar flare forecasting with deep SSMs.")
    p.add_argument("--version", action="version", version=f"flare-ssm {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="key = value config file (defaults to the desk profile)")
        s.add_argument("--seed", type=int)
        s.add_argument("--fold", choices=("1", "2", "3", "all"))
        s.add_argument("--out", help="run directory")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="extra config override, may repeat")
        if name == "train":
            s.add_argument("--no-pretrain", action="store_true",
                           help="use a randomly initialised MAE encoder for the long-term features")
        if name == "eval":
            s.add_argument("--split", choices=("test", "val"), default="test")
        if name == "metrics":
            s.add_argument("--predictions", required=True, help="prediction CSV to score")
            s.add_argument("--fallback-marginals", help="comma-separated X,M,C,O marginals")
    return p


def resolve_config(args) -> tuple[RunConfig, list[int]]:
    extra = parse_text("\n".join(args.set))
    for key, val in (("seed", args.seed), ("out", args.out)):
        if val is not None:
            extra[key] = val
    if args.fold not in (None, "all"):
        extra["fold"] = int(args.fold)
    cfg = load_config(args.config, **extra) if args.config else make_config(extra)
    folds = [1, 2, 3] if args.fold == "all" else [cfg.fold]
    return cfg, folds


def cmd_generate(cfg: RunConfig, folds) -> dict:
    out = tr.run_paths(cfg, cfg.fold)["data"]
    t0 = time.time()
    stream = generate_dataset(cfg.data, cfg.seed)
    tr.prepare_dir(out, cfg)
    manifest = write_dataset(stream, out, cfg.dumps())
    tr.event("generate_done", out=str(out), n_samples=manifest["n_samples"], excluded=len(stream.excluded),
             class_counts=manifest["class_counts"], seconds=round(time.time() - t0, 2))
    return {"n_samples": manifest["n_samples"], "class_counts": manifest["class_counts"],
            "folds": {k: v["counts"] for k, v in manifest["folds"].items()}}


def cmd_pretrain(cfg, folds) -> dict:
    out = {}
    for f in folds:
        fa = tr.load_fold(cfg, f)
        res = tr.pretrain(cfg, fa, tr.run_paths(cfg, f)["pretrain"])
        out[f] = {"checkpoint": str(res.path), "best_epoch": res.best_epoch, "best_val_masked_mse": res.best_val_mse}
    return out


def cmd_train(cfg, folds, no_pretrain=False) -> dict:
    out = {}
    for f in folds:
        paths = tr.run_paths(cfg, f)
        mae = None
        if not no_pretrain:
            mae = paths["pretrain"] / "mae.smae"
            if not mae.exists():
                raise DataError(f"no pretraining checkpoint at {mae}; run 'flare-ssm pretrain' or pass --no-pretrain")
        res = tr.train(cfg, tr.load_fold(cfg, f), paths["train"], mae)
        out[f] = {"checkpoint": str(res.path), **res.best}
    return out


def cmd_eval(cfg, folds, split="test") -> list[dict]:
    from . import plotting

    eval_dir = tr.prepare_dir(tr.run_paths(cfg, cfg.fold)["eval"], cfg)
    reports = []
    for f in folds:
        paths = tr.run_paths(cfg, f)
        model = paths["train"] / "model.dswm"
        if not model.exists():
            raise DataError(f"no trained model at {model}; run 'flare-ssm train' first")
        rep = tr.evaluate_fold(cfg, tr.load_fold(cfg, f), model, eval_dir, split)
        plotting.plot_confusion(rep, eval_dir / f"confusion_fold{f}.png")
        hist = json.loads((paths["train"] / "history.json").read_text(encoding="utf-8"))["history"]
        if hist:
            plotting.plot_history(hist, eval_dir / f"training_fold{f}.png")
        reports.append(rep)
    if len(reports) > 1:
        plotting.plot_fold_summary(reports, eval_dir / "folds.png")
    report = {"version": __version__, "seed": cfg.seed, "split": split,
              "folds": {str(r["fold"]): r for r in reports}, "summary": tr.summarize(reports)}
    (eval_dir / "report.json").write_text(json.dumps(report, indent=1, default=tr._jsonable), encoding="utf-8")
    return reports


def _fmt(v):
    return "NA" if v is None else f"{v:.6f}"


def print_table(reports, stream=None):
    stream = stream or sys.stdout
    stream.write("fold\tn\tgmgs\tbss_geq_m\ttss_geq_m\tgmgs_marginals\n")
    for r in reports:
        stream.write(f"{r['fold']}\t{r['n']}\t{_fmt(r['gmgs'])}\t{_fmt(r['bss_geq_m'])}\t"
                     f"{_fmt(r['tss_geq_m'])}\t{r['gmgs_marginals']}\n")
    if len(reports) > 1:
        s = tr.summarize(reports)
        stream.write("mean\t-\t" + "\t".join(_fmt(s[k]["mean"]) for k in tr.SUMMARY_KEYS) + "\t-\n")
        stream.write("std\t-\t" + "\t".join(_fmt(s[k]["std"]) for k in tr.SUMMARY_KEYS) + "\t-\n")


def cmd_inspect(cfg) -> dict:
    ds = FlareDataset(tr.run_paths(cfg, cfg.fold)["data"])
    m = ds.manifest
    _, labels, ts, _ = ds.arrays()
    return {"n_samples": m["n_samples"], "shape": m["shape"], "class_counts": class_histogram(labels),
            "span_hours": [int(ts[0]), int(ts[-1])], "excluded": len(m["excluded"]),
            "folds": {k: v["counts"] for k, v in m["folds"].items()}}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    tr.setup_logging()
    try:
        cfg, folds = resolve_config(args)
        if args.command != "metrics":
            log_dir = Path(cfg.out)
            tr.setup_logging(log_dir / "logs" / f"{args.command}.jsonl")
        tr.event("start", command=args.command, version=__version__, seed=cfg.seed, folds=folds, out=cfg.out)
        if args.command == "generate":
            result = cmd_generate(cfg, folds)
        elif args.command == "pretrain":
            result = cmd_pretrain(cfg, folds)
        elif args.command == "train":
            result = cmd_train(cfg, folds, args.no_pretrain)
        elif args.command == "eval":
            print_table(cmd_eval(cfg, folds, args.split))
            return 0
        elif args.command == "metrics":
            fb = None
            if args.fallback_marginals:
                try:
                    fb = np.array([float(v) for v in args.fallback_marginals.split(",")])
                except ValueError as exc:
                    raise ConfigError(f"--fallback-marginals: {exc}") from exc
            result = metrics.metrics_from_file(args.predictions, fb)
        else:
            result = cmd_inspect(cfg)
        print(json.dumps(result, indent=1, default=tr._jsonable))
        return 0
    except FlareSsmError as exc:
        tr.event("error", logging.ERROR, kind=type(exc).__name__, message=str(exc), exit_code=exc.exit_code)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
