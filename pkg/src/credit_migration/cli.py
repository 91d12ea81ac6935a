"""Command-line entry point.

Subcommands: generate, stats, train, backtest, gap-study, evaluate, ablate.
Options may come from a line-based key=value config file (--config);
explicit flags override the file, which overrides built-in defaults. The
built-in model size is the desk-scale setup; pass --model-dim 256
--common-dim 64 --epochs 3000 for the full-scale configuration.

Exit codes: 0 success, 1 usage error, 2 input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from datetime import date
from pathlib import Path

from . import backtest as bt
from . import metrics as mx
from .data import (
    InputError,
    ingest_csv,
    preprocess,
    stats_report,
    write_panel_csv,
    write_reject_report,
)
from .model import ModelConfig, save_checkpoint
from .synthetic import generate_synthetic
from .training import LossWeights, TrainConfig, train, write_loss_history

USAGE_EXIT, INPUT_EXIT, RUNTIME_EXIT = 1, 2, 3

DEFAULTS = {
    "seed": 7,
    "gap": 12,
    "loss_mode": "literal",
    "alpha": 1.0,
    "beta": 1.0,
    "epochs": 300,
    "batch_size": 1024,
    "learning_rate": 1e-4,
    "clip_norm": None,
    "seq_len": 4,
    "model_dim": 32,
    "num_heads": 4,
    "common_dim": 16,
    "companies": 400,
    "quarters": 40,
    "train_start": "1997-01-01",
    "test_start": "2005-01-01",
    "test_end": "2006-01-01",
    "gaps": "3,6,12",
    "seeds": "7,8,9",
    "mode": "multi_task",
    "jobs": None,
    "pseudo_no_gap": False,
    "warm_start": False,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parse_config_file(path: str) -> dict:
    values: dict[str, str] = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise InputError(f"{path}:{line_no}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                values[key.strip().replace("-", "_")] = value.strip()
        return values
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc


_BOOL_TRUE = ("1", "true", "yes", "on")


class Settings:
    """Flag > config file > default resolution for one invocation."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.config = _parse_config_file(args.config) if getattr(args, "config", None) else {}

    def get(self, key: str, cast=None):
        value = getattr(self.args, key, None)
        if value is None:
            value = self.config.get(key, DEFAULTS.get(key))
        if value is None:
            return None
        if cast is bool and isinstance(value, str):
            return value.lower() in _BOOL_TRUE
        if cast is not None and isinstance(value, str):
            return cast(value)
        return value

    def date(self, key: str) -> date:
        raw = self.get(key)
        try:
            return date.fromisoformat(str(raw))
        except ValueError:
            raise InputError(f"{key}: expected YYYY-MM-DD, got {raw!r}") from None

    def int_list(self, key: str) -> list[int]:
        raw = str(self.get(key))
        try:
            return [int(part) for part in raw.split(",") if part != ""]
        except ValueError:
            raise InputError(f"{key}: expected comma-separated integers, got {raw!r}") from None


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--gap", type=int, choices=(3, 6, 12))
    parser.add_argument("--loss-mode", dest="loss_mode", choices=("literal", "nll"))
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--pseudo-no-gap", dest="pseudo_no_gap", action="store_const", const=True)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seq-len", dest="seq_len", type=int)
    parser.add_argument("--model-dim", dest="model_dim", type=int)
    parser.add_argument("--num-heads", dest="num_heads", type=int)
    parser.add_argument("--common-dim", dest="common_dim", type=int)
    parser.add_argument("--batch-size", dest="batch_size", type=int)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float)
    parser.add_argument("--clip-norm", dest="clip_norm", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="credit-migration", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic panel CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--companies", type=int)
    p.add_argument("--quarters", type=int)
    _add_common(p)

    p = sub.add_parser("stats", help="descriptive tables for a panel CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seq-len", dest="seq_len", type=int)
    _add_common(p)

    p = sub.add_parser("train", help="single fit: checkpoint plus loss history")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("backtest", help="expanding-window backtest predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--train-start", dest="train_start")
    p.add_argument("--test-start", dest="test_start")
    p.add_argument("--test-end", dest="test_end")
    p.add_argument("--mode", choices=bt.TASK_MODES)
    p.add_argument("--jobs", type=int)
    p.add_argument("--warm-start", dest="warm_start", action="store_const", const=True)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("gap-study", help="repeat the backtest for several gaps")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--train-start", dest="train_start")
    p.add_argument("--test-start", dest="test_start")
    p.add_argument("--test-end", dest="test_end")
    p.add_argument("--gaps")
    p.add_argument("--jobs", type=int)
    _add_model_flags(p)
    _add_common(p)

    p = sub.add_parser("evaluate", help="metrics JSON and breakdowns from predictions")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--mode")
    _add_common(p)

    p = sub.add_parser("ablate", help="task-ablation table over several seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--train-start", dest="train_start")
    p.add_argument("--test-start", dest="test_start")
    p.add_argument("--test-end", dest="test_end")
    p.add_argument("--seeds")
    p.add_argument("--jobs", type=int)
    _add_model_flags(p)
    _add_common(p)

    return parser


def _load_rows(path: str, out_dir: Path | None = None):
    if not Path(path).exists():
        raise InputError(f"input file not found: {path}")
    result = ingest_csv(path)
    if result.rejects:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            write_reject_report(result.rejects, out_dir / "rejects.csv")
        print(f"warning: {len(result.rejects)} rejected rows", file=sys.stderr)
    if not result.rows:
        raise InputError(f"{path}: no usable rows")
    return result.rows


def _model_config(settings: Settings, input_dim: int) -> ModelConfig:
    return ModelConfig(
        seq_len=settings.get("seq_len", int),
        input_dim=input_dim,
        model_dim=settings.get("model_dim", int),
        num_heads=settings.get("num_heads", int),
        common_dim=settings.get("common_dim", int),
    )


def _train_config(settings: Settings) -> TrainConfig:
    clip = settings.get("clip_norm", float)
    return TrainConfig(
        learning_rate=settings.get("learning_rate", float),
        batch_size=settings.get("batch_size", int),
        epochs=settings.get("epochs", int),
        seed=settings.get("seed", int),
        loss_mode=settings.get("loss_mode"),
        clip_norm=clip,
    )


def _weights(settings: Settings) -> LossWeights:
    return LossWeights(alpha=settings.get("alpha", float), beta=settings.get("beta", float))


def _out_dir(settings: Settings) -> Path:
    out = Path(settings.args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_generate(settings: Settings) -> int:
    rows = generate_synthetic(
        n_companies=settings.get("companies", int),
        n_quarters=settings.get("quarters", int),
        seed=settings.get("seed", int),
    )
    write_panel_csv(rows, settings.args.out)
    print(f"wrote {len(rows)} rows to {settings.args.out}")
    return 0


def _cmd_stats(settings: Settings) -> int:
    out = _out_dir(settings)
    rows = _load_rows(settings.args.data, out)
    prep = preprocess(rows, gap_months=settings.get("gap", int),
                      seq_len=settings.get("seq_len", int))
    written = stats_report(prep.samples).save(out)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_train(settings: Settings) -> int:
    out = _out_dir(settings)
    rows = _load_rows(settings.args.data, out)
    gap = settings.get("gap", int)
    prep = preprocess(rows, gap_months=gap, seq_len=settings.get("seq_len", int))
    model_config = _model_config(settings, input_dim=len(rows[0].features))
    result = train(prep.samples, model_config, _train_config(settings), _weights(settings))
    save_checkpoint(result.params, model_config, out / "checkpoint.txt")
    write_loss_history(result.history, out / "loss_history.csv")
    print(
        f"trained {len(prep.samples)} samples for {len(result.history)} epochs; "
        f"final objective {result.final_objective:.6f}"
    )
    print(f"wrote {out / 'checkpoint.txt'} and {out / 'loss_history.csv'}")
    return 0


def _write_window_stats(stats, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["window_id", "labeled_train", "lagged_train", "train_total",
             "test_records", "skipped", "warning"]
        )
        for s in stats:
            writer.writerow(
                [s.window_id, s.labeled_train, s.lagged_train, s.train_total,
                 s.test_records, int(s.skipped), s.warning]
            )


def _cmd_backtest(settings: Settings) -> int:
    out = _out_dir(settings)
    rows = _load_rows(settings.args.data, out)
    schedule = bt.build_schedule(
        settings.date("test_start"),
        settings.date("test_end"),
        settings.date("train_start"),
        settings.get("gap", int),
        pseudo_no_gap=settings.get("pseudo_no_gap", bool) or False,
    )
    result = bt.run_backtest(
        rows,
        schedule,
        _model_config(settings, input_dim=len(rows[0].features)),
        _train_config(settings),
        _weights(settings),
        task_mode=settings.get("mode"),
        warm_start=settings.get("warm_start", bool) or False,
        jobs=settings.get("jobs", int),
    )
    bt.write_schedule(schedule, out / "schedule.csv")
    bt.write_predictions(result.records, out / "predictions.csv")
    _write_window_stats(result.window_stats, out / "windows.csv")
    for s in result.window_stats:
        if s.warning:
            print(f"warning: {s.warning}", file=sys.stderr)
    print(f"wrote {len(result.records)} predictions to {out / 'predictions.csv'}")
    return 0


def _cmd_gap_study(settings: Settings) -> int:
    out = _out_dir(settings)
    rows = _load_rows(settings.args.data, out)
    gaps = settings.int_list("gaps")
    for gap in gaps:
        if gap not in (3, 6, 12):
            raise InputError(f"gap {gap} not supported; choose from 3, 6, 12")
    results = bt.gap_study(
        rows,
        settings.date("test_start"),
        settings.date("test_end"),
        settings.date("train_start"),
        _model_config(settings, input_dim=len(rows[0].features)),
        _train_config(settings),
        gaps=gaps,
        weights=_weights(settings),
        jobs=settings.get("jobs", int),
    )
    import csv

    with open(out / "gap_summary.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["gap_months", "n_records", "f1_up", "f1_down", "accuracy", "labeled_train_total"]
        )
        for gap in gaps:
            result = results[gap]
            gap_dir = out / f"gap_{gap:02d}"
            gap_dir.mkdir(exist_ok=True)
            bt.write_schedule(result.schedule, gap_dir / "schedule.csv")
            bt.write_predictions(result.records, gap_dir / "predictions.csv")
            _write_window_stats(result.window_stats, gap_dir / "windows.csv")
            direct = [r for r in result.records if r.mode.endswith("/direct")]
            labeled_total = sum(s.labeled_train for s in result.window_stats)
            if direct:
                report = mx.build_report(direct, mode=f"gap_{gap}")
                writer.writerow(
                    [gap, report.n_records, repr(report.f1_up), repr(report.f1_down),
                     repr(report.accuracy), labeled_total]
                )
            else:
                writer.writerow([gap, 0, repr(0.0), repr(0.0), repr(0.0), labeled_total])
    print(f"wrote {out / 'gap_summary.csv'}")
    return 0


def _cmd_evaluate(settings: Settings) -> int:
    out = _out_dir(settings)
    path = settings.args.predictions
    if not Path(path).exists():
        raise InputError(f"input file not found: {path}")
    records = bt.read_predictions(path)
    if not records:
        raise InputError(f"{path}: no records")
    modes = sorted({r.mode for r in records})
    wanted = settings.args.mode
    if wanted is not None:
        if wanted not in modes:
            raise InputError(f"mode {wanted!r} not present; file has {modes}")
        modes = [wanted]
    for mode in modes:
        subset = [r for r in records if r.mode == mode]
        tag = mode.replace("/", "_")
        report = mx.build_report(subset, mode)
        mx.write_metrics_json(report, out / f"metrics_{tag}.json")
        mx.write_breakdown_csv(mx.breakdown(subset, "year", mode), out / f"by_year_{tag}.csv", "year")
        mx.write_breakdown_csv(
            mx.breakdown(subset, "rating_group", mode), out / f"by_rating_{tag}.csv", "rating_group"
        )
        print(
            f"{mode}: n={report.n_records} f1_up={report.f1_up:.4f} "
            f"f1_down={report.f1_down:.4f} accuracy={report.accuracy:.4f}"
        )
    return 0


def _cmd_ablate(settings: Settings) -> int:
    out = _out_dir(settings)
    rows = _load_rows(settings.args.data, out)
    seeds = settings.int_list("seeds")
    model_config = _model_config(settings, input_dim=len(rows[0].features))
    base_train = _train_config(settings)
    schedule = bt.build_schedule(
        settings.date("test_start"),
        settings.date("test_end"),
        settings.date("train_start"),
        settings.get("gap", int),
    )
    pooled: dict[str, list] = {mode: [] for mode in bt.ABLATION_MODES}
    per_seed_rows = []
    for seed in seeds:
        train_config = replace(base_train, seed=seed)
        for task_mode in bt.TASK_MODES:
            result = bt.run_backtest(
                rows, schedule, model_config, train_config, _weights(settings),
                task_mode=task_mode, jobs=settings.get("jobs", int),
            )
            by_mode: dict[str, list] = {}
            for record in result.records:
                by_mode.setdefault(record.mode, []).append(record)
            for mode, records in by_mode.items():
                pooled[mode].extend(records)
                report = mx.build_report(records, mode)
                per_seed_rows.append(
                    {"seed": seed, "mode": mode, "f1_up": report.f1_up,
                     "f1_down": report.f1_down, "accuracy": report.accuracy,
                     "n_records": report.n_records}
                )
    table = mx.compare_modes({mode: pooled[mode] for mode in bt.ABLATION_MODES})
    mx.write_ablation_csv(table, out / "ablation_table.csv")
    import csv

    with open(out / "ablation_by_seed.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "mode", "f1_up", "f1_down", "accuracy", "n_records"])
        for row in per_seed_rows:
            writer.writerow(
                [row["seed"], row["mode"], repr(row["f1_up"]), repr(row["f1_down"]),
                 repr(row["accuracy"]), row["n_records"]]
            )
    for row in table:
        print(
            f"{row['mode']}: f1_up={row['f1_up']:.4f} f1_down={row['f1_down']:.4f} "
            f"accuracy={row['accuracy']:.4f}"
        )
    print(f"wrote {out / 'ablation_table.csv'}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "stats": _cmd_stats,
    "train": _cmd_train,
    "backtest": _cmd_backtest,
    "gap-study": _cmd_gap_study,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        settings = Settings(args)
        return _COMMANDS[args.command](settings)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return INPUT_EXIT
    except Exception as exc:  # pragma: no cover - defensive
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
