"""Expanding-window backtest with quarterly recalibration.

Each window trains a fresh model on rows dated inside the training range
and predicts every labeled sample whose as-of date falls in the following
quarter. Labels used for training are only those decided on or before the
training end: the label cutoff sits one gap before the training end, so no
gradient ever sees a label from the test period.

The pseudo no-gap mode moves the label cutoff up to the training end and
labels training samples from the full rating timeline, the counterfactual
where all past migrations are known immediately.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from typing import Optional, Sequence

import numpy as np

from . import ratings
from .data import (
    CompanySample,
    InputError,
    PanelRow,
    add_months,
    migration_label_name,
    preprocess,
)
from .model import ModelConfig, class_prediction, forward, migration_from_rating
from .ratings import KEPT_SCALE, MIGRATION_LABELS
from .tensor import Tensor
from .training import LossWeights, TrainConfig, train

TASK_MODES = ("multi_task", "migration_only", "rating_only")
ABLATION_MODES = (
    "rating_only/rating_to_migration",
    "migration_only/direct",
    "multi_task/rating_to_migration",
    "multi_task/direct",
)

PREDICTION_COLUMNS = (
    "window_id", "company_id", "as_of_date", "pred_migration", "pred_rating",
    "true_migration", "true_rating", "mode", "as_of_rating",
)


@dataclass(frozen=True)
class BacktestWindow:
    """One recalibration step of the expanding-window protocol."""

    window_id: int
    train_start: date
    train_end: date
    label_cutoff: date
    test_start: date
    test_end: date
    gap_months: int

    def __post_init__(self):
        if not (self.train_start < self.train_end < self.test_start <= self.test_end):
            raise InputError(f"window {self.window_id}: dates out of order")
        if self.label_cutoff > self.train_end:
            raise InputError(f"window {self.window_id}: label cutoff after training end")


@dataclass(frozen=True)
class PredictionRecord:
    window_id: int
    company_id: str
    as_of_date: date
    pred_migration: str
    pred_rating: str
    true_migration: str
    true_rating: str
    mode: str
    as_of_rating: str


@dataclass
class WindowStats:
    window_id: int
    labeled_train: int
    lagged_train: int
    train_total: int
    test_records: int
    skipped: bool = False
    warning: str = ""


@dataclass
class BacktestResult:
    schedule: list[BacktestWindow]
    records: list[PredictionRecord]
    window_stats: list[WindowStats] = field(default_factory=list)


def label_cutoff_for(train_end: date, gap_months: int) -> date:
    """Latest date whose gap-shifted label is decided by `train_end`.

    Month-end clamping makes the naive back-shift a day short when the
    source month is longer than the target month, so nudge forward while
    the shifted date still lands inside the training range.
    """
    cutoff = add_months(train_end, -gap_months)
    while add_months(cutoff + timedelta(days=1), gap_months) <= train_end:
        cutoff += timedelta(days=1)
    return cutoff


def build_schedule(
    test_period_start: date,
    test_period_end: date,
    train_start: date = date(1997, 1, 1),
    gap_months: int = 12,
    pseudo_no_gap: bool = False,
) -> list[BacktestWindow]:
    """Quarterly windows tiling [test_period_start, test_period_end).

    Every window trains from the fixed `train_start` through the day before
    its test quarter, with labels available through the gap-shifted cutoff.
    """
    if train_start >= test_period_start:
        raise InputError("train_start must precede the test period")
    if test_period_start >= test_period_end:
        raise InputError("test period start must precede its end")
    windows: list[BacktestWindow] = []
    cursor = test_period_start
    wid = 0
    while cursor < test_period_end:
        train_end = cursor - timedelta(days=1)
        windows.append(
            BacktestWindow(
                window_id=wid,
                train_start=train_start,
                train_end=train_end,
                label_cutoff=train_end if pseudo_no_gap else label_cutoff_for(train_end, gap_months),
                test_start=cursor,
                test_end=add_months(cursor, 3),
                gap_months=gap_months,
            )
        )
        cursor = add_months(cursor, 3)
        wid += 1
    return windows


def pseudo_no_gap_mode(schedule: Sequence[BacktestWindow], enabled: bool = True) -> list[BacktestWindow]:
    """Move every label cutoff up to the training end (or restore the gap)."""
    out = []
    for w in schedule:
        cutoff = w.train_end if enabled else label_cutoff_for(w.train_end, w.gap_months)
        out.append(replace(w, label_cutoff=cutoff))
    return out


def _is_pseudo(window: BacktestWindow) -> bool:
    return window.label_cutoff == window.train_end


def _strip_late_labels(samples: list[CompanySample], cutoff: date) -> list[CompanySample]:
    """Drop labels decided after the cutoff; purely defensive, the window's
    row slice already cannot produce them."""
    for s in samples:
        if s.as_of_date > cutoff:
            s.migration_label = None
            s.rating_label = None
    return samples


def _routes(task_mode: str) -> tuple[str, ...]:
    if task_mode == "multi_task":
        return ("direct", "rating_to_migration")
    if task_mode == "migration_only":
        return ("direct",)
    if task_mode == "rating_only":
        return ("rating_to_migration",)
    raise InputError(f"unknown task mode {task_mode!r}; expected one of {TASK_MODES}")


def _mode_weights(task_mode: str, base: LossWeights) -> LossWeights:
    if task_mode == "multi_task":
        return base
    if task_mode == "migration_only":
        return LossWeights(alpha=base.alpha, beta=0.0)
    return LossWeights(alpha=0.0, beta=base.beta)


def training_samples_for_window(
    window: BacktestWindow, rows: Sequence[PanelRow], seq_len: int
):
    """Build the window's training set: samples with a shifted window or a
    label decided by the cutoff, normalized on the training range only.

    Returns (samples, feature_stats). In pseudo no-gap windows the labels
    come from the full rating timeline; otherwise any label decided after
    the cutoff is stripped (by construction there are none, this is the
    guard the leakage tests lean on).
    """
    pseudo = _is_pseudo(window)
    train_rows = [
        r for r in rows if window.train_start <= r.as_of_date <= window.train_end
    ]
    if not train_rows:
        return [], None
    prep = preprocess(
        train_rows,
        gap_months=window.gap_months,
        seq_len=seq_len,
        norm_start=window.train_start,
        norm_end=window.train_end,
        label_rows=list(rows) if pseudo else None,
    )
    samples = [s for s in prep.samples if s.has_lag or s.has_label]
    if not pseudo:
        _strip_late_labels(samples, window.label_cutoff)
        samples = [s for s in samples if s.has_lag or s.has_label]
    return samples, prep.stats


def run_window(
    window: BacktestWindow,
    rows: Sequence[PanelRow],
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights = LossWeights(),
    task_mode: str = "multi_task",
    initial_params=None,
):
    """Train on one window and predict its test quarter.

    Returns (records, stats, params); `params` feeds the next window when
    warm starting.
    """
    routes = _routes(task_mode)
    mode_weights = _mode_weights(task_mode, weights)
    stats = WindowStats(window.window_id, 0, 0, 0, 0)
    train_samples, feature_stats = training_samples_for_window(
        window, rows, model_config.seq_len
    )
    if feature_stats is None:
        stats.skipped = True
        stats.warning = f"window {window.window_id}: no training rows"
        return [], stats, initial_params
    stats.train_total = len(train_samples)
    stats.labeled_train = sum(1 for s in train_samples if s.has_label)
    stats.lagged_train = sum(1 for s in train_samples if s.has_lag)
    if stats.labeled_train == 0:
        stats.skipped = True
        stats.warning = f"window {window.window_id}: no labeled training samples, skipped"
        return [], stats, initial_params

    window_train_config = replace(train_config, seed=train_config.seed + window.window_id)
    result = train(
        train_samples,
        model_config,
        window_train_config,
        mode_weights,
        initial_params=initial_params,
    )

    test_prep = preprocess(
        rows,
        gap_months=window.gap_months,
        seq_len=model_config.seq_len,
        feature_stats=feature_stats,
    )
    test_samples = [
        s
        for s in test_prep.samples
        if s.has_label and window.test_start <= s.as_of_date < window.test_end
    ]
    records: list[PredictionRecord] = []
    batch = max(train_config.batch_size, 256)
    for start in range(0, len(test_samples), batch):
        chunk = test_samples[start: start + batch]
        x = Tensor(np.stack([s.x for s in chunk]))
        out = forward(x, result.params, model_config, with_reconstruction=False)
        mig_probs = out.migration_probs.data
        rat_probs = out.rating_probs.data
        for i, s in enumerate(chunk):
            pred_rating_idx = class_prediction(rat_probs[i], model_config)
            direct_idx = class_prediction(mig_probs[i], model_config)
            for route in routes:
                if route == "direct":
                    pred_mig = direct_idx
                else:
                    pred_mig = migration_from_rating(pred_rating_idx, s.rating_at_as_of)
                records.append(
                    PredictionRecord(
                        window_id=window.window_id,
                        company_id=s.company_id,
                        as_of_date=s.as_of_date,
                        pred_migration=MIGRATION_LABELS[pred_mig],
                        pred_rating=KEPT_SCALE[pred_rating_idx],
                        true_migration=migration_label_name(s.migration_label),
                        true_rating=KEPT_SCALE[s.rating_label],
                        mode=f"{task_mode}/{route}",
                        as_of_rating=KEPT_SCALE[s.rating_at_as_of],
                    )
                )
    stats.test_records = len(records)
    return records, stats, result.params


def _window_job(args):
    window, rows, model_config, train_config, weights, task_mode = args
    records, stats, _ = run_window(window, rows, model_config, train_config, weights, task_mode)
    return records, stats


def run_backtest(
    rows: Sequence[PanelRow],
    schedule: Sequence[BacktestWindow],
    model_config: ModelConfig,
    train_config: TrainConfig,
    weights: LossWeights = LossWeights(),
    task_mode: str = "multi_task",
    warm_start: bool = False,
    jobs: Optional[int] = None,
) -> BacktestResult:
    """Run every window; windows execute in parallel unless warm starting.

    Each window retrains from a fresh seeded initialization by default
    (seed offset by the window id), so results do not depend on the number
    of workers and merge deterministically in window order.
    """
    if not schedule:
        raise InputError("run_backtest: empty schedule")
    _routes(task_mode)
    rows = list(rows)
    all_records: list[PredictionRecord] = []
    all_stats: list[WindowStats] = []
    if warm_start:
        params = None
        for window in schedule:
            records, stats, params = run_window(
                window, rows, model_config, train_config, weights, task_mode,
                initial_params=params,
            )
            all_records.extend(records)
            all_stats.append(stats)
        return BacktestResult(list(schedule), all_records, all_stats)

    import os

    n_jobs = jobs if jobs is not None else min(len(schedule), os.cpu_count() or 1)
    if n_jobs <= 1 or len(schedule) == 1:
        results = [
            _window_job((w, rows, model_config, train_config, weights, task_mode))
            for w in schedule
        ]
    else:
        args = [(w, rows, model_config, train_config, weights, task_mode) for w in schedule]
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_window_job, args))
    for records, stats in results:
        all_records.extend(records)
        all_stats.append(stats)
    return BacktestResult(list(schedule), all_records, all_stats)


def gap_study(
    rows: Sequence[PanelRow],
    test_period_start: date,
    test_period_end: date,
    train_start: date,
    model_config: ModelConfig,
    train_config: TrainConfig,
    gaps: Sequence[int] = (3, 6, 12),
    weights: LossWeights = LossWeights(),
    task_mode: str = "multi_task",
    jobs: Optional[int] = None,
) -> dict[int, BacktestResult]:
    """Repeat the full backtest for each gap, rebuilding labels and shifted
    windows per gap."""
    out: dict[int, BacktestResult] = {}
    for gap in gaps:
        schedule = build_schedule(test_period_start, test_period_end, train_start, gap)
        out[gap] = run_backtest(
            rows, schedule, model_config, train_config, weights, task_mode, jobs=jobs
        )
    return out


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def write_predictions(records: Sequence[PredictionRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.window_id, r.company_id, r.as_of_date.isoformat(),
                    r.pred_migration, r.pred_rating, r.true_migration,
                    r.true_rating, r.mode, r.as_of_rating,
                ]
            )


def read_predictions(path) -> list[PredictionRecord]:
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            lines = list(reader)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not lines or tuple(lines[0]) != PREDICTION_COLUMNS:
        raise InputError(f"{path}: not a predictions file")
    records = []
    for rec in lines[1:]:
        if len(rec) != len(PREDICTION_COLUMNS):
            raise InputError(f"{path}: malformed record {rec!r}")
        records.append(
            PredictionRecord(
                window_id=int(rec[0]),
                company_id=rec[1],
                as_of_date=date.fromisoformat(rec[2]),
                pred_migration=rec[3],
                pred_rating=rec[4],
                true_migration=rec[5],
                true_rating=rec[6],
                mode=rec[7],
                as_of_rating=rec[8],
            )
        )
    return records


def write_schedule(schedule: Sequence[BacktestWindow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["window_id", "train_start", "train_end", "label_cutoff",
             "test_start", "test_end", "gap_months"]
        )
        for w in schedule:
            writer.writerow(
                [
                    w.window_id, w.train_start.isoformat(), w.train_end.isoformat(),
                    w.label_cutoff.isoformat(), w.test_start.isoformat(),
                    w.test_end.isoformat(), w.gap_months,
                ]
            )
