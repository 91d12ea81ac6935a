"""Evaluation metrics for migration predictions.

Upgrades and downgrades are rare, so a constant "unchanged" predictor gets
high accuracy while being useless; the headline numbers are therefore the
F1 scores with upgrade and downgrade as the positive class, with 3-class
accuracy reported alongside. Zero-denominator precision/recall/F1 report 0
and raise a named flag rather than erroring.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

METRICS_SCHEMA_VERSION = 1
RATING_GROUPS = ("A+", "A", "A-", "BBB+", "BBB", "BBB-")
OTHER_GROUP = "other"


class AlignmentError(ValueError):
    """Mode record sets do not cover the same evaluation samples."""


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    counts: ConfusionCounts
    undefined: tuple[str, ...] = ()


def confusion_counts(records, positive_class: str) -> ConfusionCounts:
    tp = fp = fn = tn = 0
    for r in records:
        predicted = r.pred_migration == positive_class
        actual = r.true_migration == positive_class
        if predicted and actual:
            tp += 1
        elif predicted:
            fp += 1
        elif actual:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def f1_for_class(records, positive_class: str) -> ClassMetrics:
    """Precision, recall and F1 treating one migration class as positive."""
    if not records:
        raise AlignmentError("f1_for_class: no records")
    c = confusion_counts(records, positive_class)
    undefined: list[str] = []
    if c.tp + c.fp == 0:
        precision = 0.0
        undefined.append(f"precision_{positive_class}")
    else:
        precision = c.tp / (c.tp + c.fp)
    if c.tp + c.fn == 0:
        recall = 0.0
        undefined.append(f"recall_{positive_class}")
    else:
        recall = c.tp / (c.tp + c.fn)
    if precision + recall == 0:
        f1 = 0.0
        undefined.append(f"f1_{positive_class}")
    else:
        f1 = 2.0 * precision * recall / (precision + recall)
    return ClassMetrics(precision, recall, f1, c, tuple(undefined))


def accuracy(records) -> float:
    """Share of records whose predicted migration equals the truth."""
    if not records:
        raise AlignmentError("accuracy: no records")
    correct = sum(1 for r in records if r.pred_migration == r.true_migration)
    return correct / len(records)


@dataclass
class MetricsReport:
    mode: str
    n_records: int
    f1_up: float
    f1_down: float
    accuracy: float
    precision_up: float
    recall_up: float
    precision_down: float
    recall_down: float
    undefined_flags: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        out = {"schema_version": METRICS_SCHEMA_VERSION}
        out.update(asdict(self))
        return out


def build_report(records, mode: str = "") -> MetricsReport:
    up = f1_for_class(records, "upgrade")
    down = f1_for_class(records, "downgrade")
    return MetricsReport(
        mode=mode,
        n_records=len(records),
        f1_up=up.f1,
        f1_down=down.f1,
        accuracy=accuracy(records),
        precision_up=up.precision,
        recall_up=up.recall,
        precision_down=down.precision,
        recall_down=down.recall,
        undefined_flags=list(up.undefined) + list(down.undefined),
    )


def rating_group(as_of_rating: str) -> str:
    return as_of_rating if as_of_rating in RATING_GROUPS else OTHER_GROUP


def breakdown(records, by: str, mode: str = "") -> dict:
    """Per-bucket reports keyed by calendar year or by as-of rating group."""
    if by not in ("year", "rating_group"):
        raise ValueError(f"breakdown: unknown axis {by!r}")
    buckets: dict = {}
    for r in records:
        key = r.as_of_date.year if by == "year" else rating_group(r.as_of_rating)
        buckets.setdefault(key, []).append(r)
    return {key: build_report(buckets[key], mode) for key in sorted(buckets, key=str)}


def compare_modes(record_sets: Mapping[str, Sequence]) -> list[dict]:
    """Ablation table: one row of headline metrics per evaluation mode.

    All record sets must cover the same (window, company, as-of) keys.
    """
    if not record_sets:
        raise AlignmentError("compare_modes: no record sets")
    reference = None
    for mode, records in record_sets.items():
        keys = {(r.window_id, r.company_id, r.as_of_date) for r in records}
        if reference is None:
            reference = keys
        elif keys != reference:
            raise AlignmentError(
                f"compare_modes: mode {mode!r} covers different samples than the first mode"
            )
    rows = []
    for mode, records in record_sets.items():
        report = build_report(records, mode)
        rows.append(
            {
                "mode": mode,
                "f1_up": report.f1_up,
                "f1_down": report.f1_down,
                "accuracy": report.accuracy,
                "n_records": report.n_records,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_breakdown_csv(buckets: Mapping, path, axis_name: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [axis_name, "n_records", "f1_up", "f1_down", "accuracy",
             "precision_up", "recall_up", "precision_down", "recall_down"]
        )
        for key, report in buckets.items():
            writer.writerow(
                [
                    key, report.n_records, repr(report.f1_up), repr(report.f1_down),
                    repr(report.accuracy), repr(report.precision_up), repr(report.recall_up),
                    repr(report.precision_down), repr(report.recall_down),
                ]
            )


def write_ablation_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "f1_up", "f1_down", "accuracy", "n_records"])
        for row in rows:
            writer.writerow(
                [row["mode"], repr(row["f1_up"]), repr(row["f1_down"]),
                 repr(row["accuracy"]), row["n_records"]]
            )
