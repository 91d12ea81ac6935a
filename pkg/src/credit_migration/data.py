"""Panel ingestion and sample assembly.

The input is a long-format CSV of quarterly-ish company observations:

    company_id,as_of_date,rating,f01,...,f70

Dates are ISO-8601, an empty feature cell means missing, and ratings come
from the full 18-level scale. Preprocessing turns rows into fixed-size
training windows:

1. z-score each feature with statistics from the normalization date range
   only (the training range during a backtest, to keep test-period values
   out of the scaler);
2. fill missing values with 0 after normalization, so the fill equals the
   training mean;
3. drop rows rated B, B-, D or NR;
4. resample each company onto a 3-calendar-month grid anchored at its first
   kept row, mapping each grid point to the closest row in time (ties go to
   the earlier row);
5. pad windows that start before the company's history with the earliest
   available point;
6. label each window with the migration/rating in force at the gap-shifted
   date, leaving windows whose gap date runs past the company's coverage
   unlabeled.

The gap-shifted window used as the envisioning target is the same grid
shifted forward by the gap, present only when the grid extends that far.
"""

from __future__ import annotations

import calendar
import csv
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date
from typing import Optional, Sequence

import numpy as np

from . import ratings
from .ratings import KEPT_SCALE, MIGRATION_LABELS, rating_index

VALID_GAPS = (3, 6, 12)
FIXED_COLUMNS = ("company_id", "as_of_date", "rating")


class InputError(ValueError):
    """Unusable input: missing file, empty file, malformed structure."""


def add_months(d: date, months: int) -> date:
    """Calendar-month shift, clamping the day to the target month's end."""
    total = d.year * 12 + (d.month - 1) + months
    year, month = divmod(total, 12)
    day = min(d.day, calendar.monthrange(year, month + 1)[1])
    return date(year, month + 1, day)


# ---------------------------------------------------------------------------
# Rows and ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PanelRow:
    company_id: str
    as_of_date: date
    rating: str
    features: tuple[Optional[float], ...]


@dataclass
class IngestResult:
    rows: list[PanelRow]
    rejects: list[tuple[int, str]] = field(default_factory=list)


def feature_columns(count: int) -> list[str]:
    return [f"f{i:02d}" for i in range(1, count + 1)]


def ingest_csv(path) -> IngestResult:
    """Parse a panel CSV; malformed rows land in the reject report."""
    try:
        with open(path, "r", newline="", encoding="utf-8") as fh:
            lines = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise InputError(f"{path}: empty file")
    header = lines[0]
    n_features = len(header) - len(FIXED_COLUMNS)
    expected = list(FIXED_COLUMNS) + feature_columns(max(n_features, 0))
    if n_features < 1 or header != expected:
        return IngestResult(rows=[], rejects=[(1, "missing or malformed header")])

    rows: list[PanelRow] = []
    rejects: list[tuple[int, str]] = []
    for line_no, record in enumerate(lines[1:], start=2):
        if not record:
            continue
        if len(record) != len(header):
            rejects.append((line_no, f"expected {len(header)} fields, got {len(record)}"))
            continue
        company_id, raw_date, rating = record[0], record[1], record[2]
        try:
            as_of = date.fromisoformat(raw_date)
        except ValueError:
            rejects.append((line_no, f"unparseable date {raw_date!r}"))
            continue
        if rating not in ratings.FULL_SCALE:
            rejects.append((line_no, f"unknown rating symbol {rating!r}"))
            continue
        features: list[Optional[float]] = []
        bad = None
        for col, cell in zip(expected[3:], record[3:]):
            if cell == "":
                features.append(None)
                continue
            try:
                features.append(float(cell))
            except ValueError:
                bad = f"non-numeric value {cell!r} in {col}"
                break
        if bad:
            rejects.append((line_no, bad))
            continue
        rows.append(PanelRow(company_id, as_of, rating, tuple(features)))
    return IngestResult(rows=rows, rejects=rejects)


def write_panel_csv(rows: Sequence[PanelRow], path) -> None:
    """Serialize rows back to the input schema."""
    if not rows:
        raise InputError("write_panel_csv: no rows")
    n_features = len(rows[0].features)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(FIXED_COLUMNS) + feature_columns(n_features))
        for row in rows:
            cells = ["" if v is None else repr(v) for v in row.features]
            writer.writerow([row.company_id, row.as_of_date.isoformat(), row.rating] + cells)


def write_reject_report(rejects: Sequence[tuple[int, str]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["line_number", "reason"])
        writer.writerows(rejects)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------


@dataclass
class CompanySample:
    """One prediction instance: a feature window plus optional targets."""

    company_id: str
    as_of_date: date
    x: np.ndarray
    x_hat: Optional[np.ndarray]
    migration_label: Optional[int]
    rating_label: Optional[int]
    rating_at_as_of: int
    gap_months: int

    @property
    def has_lag(self) -> bool:
        return self.x_hat is not None

    @property
    def has_label(self) -> bool:
        return self.migration_label is not None


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class PreprocessResult:
    samples: list[CompanySample]
    stats: FeatureStats
    notes: list[str] = field(default_factory=list)


def compute_feature_stats(
    rows: Sequence[PanelRow],
    norm_start: Optional[date] = None,
    norm_end: Optional[date] = None,
) -> FeatureStats:
    """Per-feature mean/std over non-missing values in the date range.

    Features that are constant or entirely missing inside the range get
    std 1 (and mean 0 when entirely missing), so they normalize to zeros
    rather than dividing by zero.
    """
    in_range = [
        r for r in rows
        if (norm_start is None or r.as_of_date >= norm_start)
        and (norm_end is None or r.as_of_date <= norm_end)
    ]
    if not in_range:
        raise InputError("no rows inside the normalization date range")
    mat = np.array(
        [[np.nan if v is None else v for v in r.features] for r in in_range], dtype=np.float64
    )
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(mat, axis=0)
        std = np.nanstd(mat, axis=0)
    mean = np.where(np.isnan(mean), 0.0, mean)
    std = np.where(np.isnan(std) | (std < 1e-12), 1.0, std)
    return FeatureStats(mean=mean, std=std)


def _normalize(features: Sequence[Optional[float]], stats: FeatureStats) -> np.ndarray:
    raw = np.array([np.nan if v is None else v for v in features], dtype=np.float64)
    z = (raw - stats.mean) / stats.std
    return np.where(np.isnan(z), 0.0, z)


def _rating_in_force(timeline: list[tuple[date, str]], when: date) -> Optional[str]:
    """Most recent rating at or before `when`; None before the first entry."""
    dates = [t[0] for t in timeline]
    pos = bisect_right(dates, when)
    if pos == 0:
        return None
    return timeline[pos - 1][1]


def _closest_row_index(dates: list[date], target: date) -> int:
    """Index of the date closest to target; ties resolve to the earlier one."""
    pos = bisect_right(dates, target)
    if pos == 0:
        return 0
    if pos == len(dates):
        return len(dates) - 1
    before, after = dates[pos - 1], dates[pos]
    if (target - before) <= (after - target):
        return pos - 1
    return pos


def _dedupe_sorted(rows: list[PanelRow], notes: list[str]) -> list[PanelRow]:
    out: list[PanelRow] = []
    for row in rows:
        if out and out[-1].as_of_date == row.as_of_date:
            notes.append(f"{row.company_id}: duplicate date {row.as_of_date}, kept first row")
            continue
        out.append(row)
    return out


def preprocess(
    rows: Sequence[PanelRow],
    gap_months: int = 12,
    seq_len: int = 4,
    norm_start: Optional[date] = None,
    norm_end: Optional[date] = None,
    feature_stats: Optional[FeatureStats] = None,
    label_rows: Optional[Sequence[PanelRow]] = None,
) -> PreprocessResult:
    """Turn panel rows into windowed samples; see the module docstring.

    `feature_stats` reuses a previously fitted scaler (test-time path in a
    backtest). `label_rows`, when given, supplies the rating timeline used
    for labeling instead of `rows` (the pseudo no-gap counterfactual feeds
    the full timeline here while features stay truncated).
    """
    if gap_months not in VALID_GAPS:
        raise InputError(f"gap_months must be one of {VALID_GAPS}, got {gap_months}")
    if seq_len < 1:
        raise InputError("seq_len must be >= 1")
    if not rows:
        raise InputError("preprocess: no rows")
    widths = {len(r.features) for r in rows}
    if len(widths) != 1:
        raise InputError(f"inconsistent feature counts in input: {sorted(widths)}")

    stats = feature_stats if feature_stats is not None else compute_feature_stats(
        rows, norm_start, norm_end
    )
    notes: list[str] = []

    by_company: dict[str, list[PanelRow]] = {}
    for row in rows:
        by_company.setdefault(row.company_id, []).append(row)
    label_source: dict[str, list[PanelRow]] = {}
    for row in (label_rows if label_rows is not None else rows):
        label_source.setdefault(row.company_id, []).append(row)

    grid_step = gap_months // 3
    samples: list[CompanySample] = []
    for company in sorted(by_company):
        company_rows = _dedupe_sorted(sorted(by_company[company], key=lambda r: r.as_of_date), notes)
        kept = [r for r in company_rows if ratings.is_kept(r.rating)]
        if not kept:
            notes.append(f"{company}: no rows remain after rating filter, skipped")
            continue
        lab_rows = _dedupe_sorted(
            sorted(label_source.get(company, company_rows), key=lambda r: r.as_of_date), []
        )
        timeline = [(r.as_of_date, r.rating) for r in lab_rows if r.rating != "NR"]
        coverage_end = lab_rows[-1].as_of_date

        kept_dates = [r.as_of_date for r in kept]
        grid_dates: list[date] = []
        cursor = kept_dates[0]
        while cursor <= kept_dates[-1]:
            grid_dates.append(cursor)
            cursor = add_months(cursor, 3)
        grid_rows = [kept[_closest_row_index(kept_dates, d)] for d in grid_dates]
        grid_feats = [_normalize(r.features, stats) for r in grid_rows]
        last = len(grid_dates) - 1

        for g, as_of in enumerate(grid_dates):
            window_idx = [max(0, i) for i in range(g - seq_len + 1, g + 1)]
            x = np.stack([grid_feats[i] for i in window_idx])
            current = _rating_in_force(timeline, as_of)
            if current is None or not ratings.is_kept(current):
                notes.append(f"{company}: rating in force at {as_of} outside kept scale, skipped")
                continue
            x_hat = None
            if g + grid_step <= last:
                x_hat = np.stack([grid_feats[i + grid_step] for i in window_idx])
            migration_label = rating_label = None
            label_date = add_months(as_of, gap_months)
            if label_date <= coverage_end:
                future = _rating_in_force(timeline, label_date)
                if future is not None and ratings.is_kept(future):
                    migration_label = ratings.migration_between(current, future)
                    rating_label = rating_index(future)
            samples.append(
                CompanySample(
                    company_id=company,
                    as_of_date=as_of,
                    x=x,
                    x_hat=x_hat,
                    migration_label=migration_label,
                    rating_label=rating_label,
                    rating_at_as_of=rating_index(current),
                    gap_months=gap_months,
                )
            )
    return PreprocessResult(samples=samples, stats=stats, notes=notes)


# ---------------------------------------------------------------------------
# Statistics tables
# ---------------------------------------------------------------------------


@dataclass
class StatsReport:
    """The three descriptive tables emitted by the `stats` command."""

    ratings_by_year: list[dict]
    migration_rates: list[dict]
    migration_matrix: list[dict]

    def save(self, out_dir) -> list[str]:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for name, table in (
            ("ratings_by_year.csv", self.ratings_by_year),
            ("migration_rates.csv", self.migration_rates),
            ("migration_matrix.csv", self.migration_matrix),
        ):
            path = out / name
            with open(path, "w", newline="", encoding="utf-8") as fh:
                if table:
                    writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
                    writer.writeheader()
                    writer.writerows(table)
            written.append(str(path))
        return written


def stats_report(samples: Sequence[CompanySample]) -> StatsReport:
    """Descriptive tables: yearly rating mix, yearly migration shares, and
    the row-normalized current-to-future rating migration matrix."""
    if not samples:
        raise InputError("stats_report: no samples")

    # Yearly rating mix: each company counted once per year, at its rating
    # in force on its last as-of date that year.
    last_by_company_year: dict[tuple[str, int], CompanySample] = {}
    for s in samples:
        key = (s.company_id, s.as_of_date.year)
        held = last_by_company_year.get(key)
        if held is None or s.as_of_date > held.as_of_date:
            last_by_company_year[key] = s
    year_rating_counts: dict[int, dict[str, int]] = {}
    for (company, year), s in last_by_company_year.items():
        sym = KEPT_SCALE[s.rating_at_as_of]
        year_rating_counts.setdefault(year, {})
        year_rating_counts[year][sym] = year_rating_counts[year].get(sym, 0) + 1
    ratings_by_year = []
    for year in sorted(year_rating_counts):
        total = sum(year_rating_counts[year].values())
        for sym in KEPT_SCALE:
            count = year_rating_counts[year].get(sym, 0)
            ratings_by_year.append(
                {"year": year, "rating": sym, "companies": count,
                 "pct": repr(count / total if total else 0.0)}
            )

    # Yearly migration shares over labeled samples.
    migration_rates = []
    by_year: dict[int, list[CompanySample]] = {}
    for s in samples:
        by_year.setdefault(s.as_of_date.year, []).append(s)
    for year in sorted(by_year):
        group = by_year[year]
        labeled = [s for s in group if s.has_label]
        n_lab = len(labeled)
        ups = sum(1 for s in labeled if s.migration_label == ratings.UPGRADE)
        downs = sum(1 for s in labeled if s.migration_label == ratings.DOWNGRADE)
        migration_rates.append(
            {
                "year": year,
                "companies": len({s.company_id for s in group}),
                "labeled_samples": n_lab,
                "pct_upgrade": repr(ups / n_lab if n_lab else 0.0),
                "pct_downgrade": repr(downs / n_lab if n_lab else 0.0),
            }
        )

    # Migration matrix: current rating (rows) against rating at the gap date.
    counts = np.zeros((len(KEPT_SCALE), len(KEPT_SCALE)), dtype=np.int64)
    for s in samples:
        if s.has_label:
            counts[s.rating_at_as_of, s.rating_label] += 1
    migration_matrix = []
    for i, sym in enumerate(KEPT_SCALE):
        row_total = int(counts[i].sum())
        entry: dict = {"rating": sym, "n_obs": row_total}
        for j, col in enumerate(KEPT_SCALE):
            share = counts[i, j] / row_total if row_total else 0.0
            entry[col] = repr(float(share))
        migration_matrix.append(entry)

    return StatsReport(
        ratings_by_year=ratings_by_year,
        migration_rates=migration_rates,
        migration_matrix=migration_matrix,
    )


def migration_label_name(label: int) -> str:
    return MIGRATION_LABELS[label]
