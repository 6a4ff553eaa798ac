"""Command line entry point: ``cgmlstm <command> [options]``.

Commands: synth, preprocess, pretrain, finetune, eval, baseline, sweep.
Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 config/path error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .baselines import make_forecaster
from .checkpoint import file_hash, load_model, save_model
from .errors import CheckpointError, ConfigError, FitError, InputError, NumericError, UndefinedMetricError
from .metrics import MetricsReport, evaluate, mean_report, summarize_dataset, write_report_csv, write_summary_csv
from .network import predict
from .pipeline import (Pool, SubDataset, chrono_split, ingest_csv, ingest_pool_csv, partition_by_length,
                       repair_singletons, split_on_gaps, write_csv, write_pool_csv)
from .synth import gen_cohort
from .training import (TrainConfig, epoch_sweep, finetune, patient_windows, pretrain_workflow, select_epochs,
                       write_sweep_csv)

log = logging.getLogger("cgmlstm")

POOL_FILE = "pretrain_pool.csv"
METHODS = ("lstm", "arima", "svr", "naive")


class UsageError(Exception):
    """Bad flag values detected after argument parsing (exit 2)."""


def _positive(name):
    def check(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be an integer, got {text!r}")
        if v < 1:
            raise argparse.ArgumentTypeError(f"{name} must be >= 1, got {v}")
        return v
    return check


def _ph(text):
    v = _positive("--ph")(text)
    if v % 5:
        raise argparse.ArgumentTypeError(f"--ph must be a multiple of 5 minutes, got {v}")
    return v


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _write_run_config(out: Path, args: argparse.Namespace) -> None:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["version"] = __version__
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _csv_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise InputError(f"{path} does not exist")
    files = sorted(p for p in path.glob("*.csv") if p.name != POOL_FILE)
    if not files:
        raise InputError(f"no CSV files in {path}")
    return files


def _load_segments(path: Path) -> list[SubDataset]:
    """Gap-free pieces of every series under ``path`` (a pool file keeps its segments)."""
    out = []
    for f in _csv_files(path):
        if f.name == POOL_FILE or _has_segments(f):
            out.extend(ingest_pool_csv(f).segments)
        else:
            out.extend(split_on_gaps(repair_singletons(ingest_csv(f))))
    return out


def _has_segments(f: Path) -> bool:
    with open(f, encoding="utf-8") as fh:
        return "segment_id" in fh.readline()


def _load_pool(path: Optional[Path]) -> Optional[Pool]:
    if path is None:
        return None
    if path.is_file() and (path.name == POOL_FILE or _has_segments(path)):
        return ingest_pool_csv(path)
    return Pool(_load_segments(path))


def _load_datasets(path: Path) -> list[SubDataset]:
    subs = []
    for f in _csv_files(path):
        pieces = split_on_gaps(repair_singletons(ingest_csv(f)))
        if not pieces:
            raise InputError(f"{f}: no usable samples")
        longest = max(pieces, key=len)
        subs.append(SubDataset(longest.subject_id, longest.offset, longest.values, longest.start_time, f.stem))
    return subs


def _config(args, ph: int, **extra) -> TrainConfig:
    return TrainConfig(epochs=extra.pop("epochs", getattr(args, "epochs", 100)), batch_size=args.batch_size,
                       learning_rate=args.lr, seed=args.seed, ph=ph, L=args.window_len, **extra)


def cmd_synth(args) -> None:
    out = _out_dir(args.out)
    for s in gen_cohort(args.subjects, args.days, args.seed):
        write_csv(s, out / f"{s.subject_id}.csv")
    _write_run_config(out, args)


def cmd_preprocess(args) -> None:
    files = _csv_files(args.input)
    out = _out_dir(args.out)
    data_dir = _out_dir(out / "datasets")
    subs = []
    for f in files:
        subs.extend(split_on_gaps(repair_singletons(ingest_csv(f))))
    kept, pool = partition_by_length(subs, args.min_len)
    rows = []
    for s in kept:
        write_csv(s, data_dir / f"{s.name}.csv")
        rows.append((s.name, "train/test 67/33", summarize_dataset(s)))
    write_pool_csv(pool, out / POOL_FILE)
    if len(pool):
        rows.append(("pretrain_pool", "round-2 pre-train", summarize_dataset(pool)))
    write_summary_csv(rows, out / "summary.csv")
    _write_run_config(out, args)
    log.info("%d sub-datasets kept, %d pooled (%d samples)", len(kept), len(pool.segments), len(pool))


def cmd_pretrain(args) -> None:
    out = _out_dir(args.out)
    sim = _load_pool(args.sim)
    real = _load_pool(args.pool)
    for ph in args.ph:
        cfg = _config(args, ph, epochs=max(args.epochs_r1, 1), phase="pretrain1")
        path = pretrain_workflow(sim, real, args.epochs_r1, args.epochs_r2, cfg, out / f"ph{ph}")
        log.info("PH=%d global model %s", ph, path)
    _write_run_config(out, args)


def _global_checkpoint(args, ph: int) -> Path:
    p = args.checkpoint
    if p.is_dir():
        p = p / f"ph{ph}" / "pretrain2.json"
    if not p.exists():
        raise ConfigError(f"checkpoint {p} not found")
    return p


def cmd_finetune(args) -> None:
    out = _out_dir(args.out)
    data = _load_datasets(args.data)
    reports = []
    for ph in args.ph:
        ckpt = _global_checkpoint(args, ph)
        cfg = _config(args, ph)
        ph_dir = _out_dir(out / f"ph{ph}")
        for sub in data:
            model, hist, rep = finetune(ckpt, sub, cfg)
            save_model(model, ph_dir / f"{sub.name}.json", parent_hash=file_hash(ckpt))
            hist.write_csv(ph_dir / f"{sub.name}_history.csv")
            reports.append(rep)
    write_report_csv(reports, out / "report.csv")
    _write_run_config(out, args)


def _plot(path: Path, title: str, actual: np.ndarray, series: dict) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "cgmlstm"
    t = np.arange(len(actual)) * 5.0 / 60.0
    fig, ax = plt.subplots(figsize=(10, 3.5))
    ax.plot(t, actual, color="black", lw=1.2, label="actual")
    for name, pred in series.items():
        ax.plot(t, pred, lw=0.9, label=name)
    for level in (70, 180):
        ax.axhline(level, color="grey", lw=0.5, ls=":")
    ax.set_xlabel("time in test split (h)")
    ax.set_ylabel("glucose (mg/dl)")
    ax.set_title(title)
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def _forecaster(method, model_path, train, args):
    if method == "lstm":
        model = load_model(model_path)
        if model.window_len != train.L:
            raise ConfigError(f"{model_path} has L={model.window_len}, data uses L={train.L}")
        return model
    return make_forecaster(method, train, arima_order=(args.arima_p, 1), svr_epochs=args.svr_epochs,
                           seed=args.seed)


def _evaluate_methods(args, methods, out: Path) -> list[MetricsReport]:
    data = _load_datasets(args.data)
    reports = []
    plots = _out_dir(out / "plots") if args.plots else None
    for sub in data:
        for ph in args.ph:
            k = ph // 5
            ws = patient_windows(sub, args.window_len, k)
            train, test = chrono_split(ws)
            preds = {}
            for method in methods:
                model_path = None
                if method == "lstm":
                    model_path = args.models / f"ph{ph}" / f"{sub.name}.json"
                    if not model_path.exists():
                        raise ConfigError(f"no fine-tuned model {model_path}")
                f = _forecaster(method, model_path, train, args)
                rep = evaluate(f, test, method)
                reports.append(rep)
                raw = predict(f, test.inputs) if method == "lstm" else f(test.inputs)
                preds[method] = test.scaler.invert(raw)
            if plots is not None:
                _plot(plots / f"{sub.name}_ph{ph}.svg", f"{sub.name}, PH = {ph} min", test.raw_targets(), preds)
    return reports


def _with_means(reports: list[MetricsReport]) -> list[MetricsReport]:
    keys = sorted({(r.method, r.ph_min) for r in reports}, key=lambda x: (x[1], METHODS.index(x[0])))
    means = [mean_report([r for r in reports if (r.method, r.ph_min) == key], "mean") for key in keys]
    return reports + means


def cmd_eval(args) -> None:
    out = _out_dir(args.out)
    reports = _evaluate_methods(args, args.methods, out)
    write_report_csv(_with_means(reports), out / "report.csv")
    _write_run_config(out, args)


def cmd_baseline(args) -> None:
    out = _out_dir(args.out)
    if "lstm" in args.methods:
        raise UsageError("baseline runs classical methods only; use eval for lstm")
    reports = _evaluate_methods(args, args.methods, out)
    write_report_csv(_with_means(reports), out / "report.csv")
    _write_run_config(out, args)


def cmd_sweep(args) -> None:
    out = _out_dir(args.out)
    sim = _load_pool(args.sim)
    real = _load_pool(args.pool)
    data = _load_datasets(args.data)
    result = {}
    for ph in args.ph:
        cfg = _config(args, ph, epochs=100, phase="pretrain1")
        rows = epoch_sweep(sim, real, data, cfg, args.start, args.stop, args.step,
                           finetune_epochs=args.epochs)
        write_sweep_csv(rows, out / f"sweep_ph{ph}.csv")
        result[f"ph{ph}"] = select_epochs(rows)["epochs"]
    (out / "selection.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    _write_run_config(out, args)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="cgmlstm", description="Glucose forecasting with an LSTM/Bi-LSTM network.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train=True, ph_default=(30,)):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--ph", type=_ph, nargs="+", default=list(ph_default), help="prediction horizon(s), minutes")
        p.add_argument("--window-len", type=_positive("--window-len"), default=12, help="input window, samples")
        if train:
            p.add_argument("--epochs", type=_positive("--epochs"), default=100, help="fine-tune epochs")
            p.add_argument("--batch-size", type=_positive("--batch-size"), default=32, help="mini-batch size")
            p.add_argument("--lr", type=float, default=0.001, help="Adam learning rate")

    p = sub.add_parser("synth", help="generate synthetic CGM subjects", formatter_class=fmt)
    p.add_argument("--subjects", type=_positive("--subjects"), default=11, help="number of subjects")
    p.add_argument("--days", type=_positive("--days"), default=38, help="days per subject")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="repair, split and select sub-datasets", formatter_class=fmt)
    p.add_argument("--in", dest="input", type=Path, required=True, help="directory of raw CGM CSVs")
    p.add_argument("--min-len", type=_positive("--min-len"), default=1500, help="minimum sub-dataset length")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("pretrain", help="two-round pre-training of the global model", formatter_class=fmt)
    common(p)
    p.add_argument("--sim", type=Path, required=True, help="simulated data (directory of CSVs or pool CSV)")
    p.add_argument("--pool", type=Path, default=None, help="pool of short real sub-datasets (pretrain_pool.csv)")
    p.add_argument("--epochs-r1", type=_positive("--epochs-r1"), default=1300, help="round-1 epochs")
    p.add_argument("--epochs-r2", type=int, default=1300, help="round-2 epochs (0 skips the round)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune the global model per dataset", formatter_class=fmt)
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="global checkpoint file or pretrain output dir")
    p.add_argument("--data", type=Path, required=True, help="directory of sub-dataset CSVs")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_finetune)

    def evaluation(p, methods):
        p.add_argument("--data", type=Path, required=True, help="directory of sub-dataset CSVs")
        p.add_argument("--methods", nargs="+", choices=METHODS, default=list(methods), help="methods to score")
        p.add_argument("--arima-p", type=int, default=3, help="AR order of the ARI(p,1) baseline")
        p.add_argument("--svr-epochs", type=_positive("--svr-epochs"), default=100, help="SVR subgradient epochs")
        p.add_argument("--plots", action=argparse.BooleanOptionalAction, default=True,
                       help="write actual-vs-predicted SVG per dataset and horizon")
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("eval", help="score fine-tuned models and baselines", formatter_class=fmt)
    common(p, train=False)
    p.add_argument("--models", type=Path, required=True, help="finetune output dir (ph<PH>/<dataset>.json)")
    evaluation(p, METHODS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="score classical baselines only", formatter_class=fmt)
    common(p, train=False)
    evaluation(p, ("arima", "svr", "naive"))
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", help="score a grid of pre-train epoch counts", formatter_class=fmt)
    common(p)
    p.add_argument("--sim", type=Path, required=True, help="simulated data (directory of CSVs or pool CSV)")
    p.add_argument("--pool", type=Path, default=None, help="pool of short real sub-datasets")
    p.add_argument("--data", type=Path, required=True, help="directory of evaluation sub-dataset CSVs")
    p.add_argument("--from", dest="start", type=_positive("--from"), default=100, help="first epoch count")
    p.add_argument("--to", dest="stop", type=_positive("--to"), default=2000, help="last epoch count")
    p.add_argument("--step", type=_positive("--step"), default=100, help="epoch increment")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "epochs_r2", 0) < 0:
        parser.error("--epochs-r2 must be >= 0")
    try:
        args.func(args)
    except (UsageError, InputError, FitError, UndefinedMetricError) as exc:
        print(f"cgmlstm {args.command}: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"cgmlstm {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"cgmlstm {args.command}: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
