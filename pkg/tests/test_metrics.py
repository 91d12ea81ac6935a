"""Metric formulas against brute-force confusion counting."""

import json
from datetime import date

import numpy as np
import pytest

from credit_migration.backtest import PredictionRecord
from credit_migration.metrics import (
    AlignmentError,
    accuracy,
    breakdown,
    build_report,
    compare_modes,
    confusion_counts,
    f1_for_class,
    rating_group,
    write_ablation_csv,
    write_breakdown_csv,
    write_metrics_json,
)

LABELS = ("upgrade", "unchanged", "downgrade")


def make_record(pred, true, year=2005, rating="A", window=0, company="C1", mode="multi_task/direct"):
    return PredictionRecord(
        window_id=window,
        company_id=company,
        as_of_date=date(year, 3, 1),
        pred_migration=pred,
        pred_rating="A",
        true_migration=true,
        true_rating="A",
        mode=mode,
        as_of_rating=rating,
    )


def random_records(rng, n):
    return [
        make_record(LABELS[rng.integers(0, 3)], LABELS[rng.integers(0, 3)], company=f"C{i}")
        for i in range(n)
    ]


def brute_force_counts(records, positive):
    tp = sum(1 for r in records if r.true_migration == positive and r.pred_migration == positive)
    fp = sum(1 for r in records if r.true_migration != positive and r.pred_migration == positive)
    fn = sum(1 for r in records if r.true_migration == positive and r.pred_migration != positive)
    tn = len(records) - tp - fp - fn
    return tp, fp, fn, tn


def brute_force_f1(records, positive):
    tp, fp, fn, _ = brute_force_counts(records, positive)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


class TestF1:
    def test_perfect_classifier(self):
        records = [make_record(label, label) for label in LABELS for _ in range(3)]
        assert f1_for_class(records, "upgrade").f1 == 1.0
        assert f1_for_class(records, "downgrade").f1 == 1.0

    def test_direct_formula(self):
        records = (
            [make_record("downgrade", "downgrade")] * 2
            + [make_record("downgrade", "unchanged")] * 1
            + [make_record("unchanged", "downgrade")] * 1
            + [make_record("unchanged", "unchanged")] * 4
        )
        m = f1_for_class(records, "downgrade")
        assert m.precision == pytest.approx(2 / 3)
        assert m.recall == pytest.approx(2 / 3)
        assert m.f1 == pytest.approx(2 / 3)
        assert m.undefined == ()

    def test_vacuous_class_flags_undefined(self):
        records = [make_record("unchanged", "unchanged")] * 5
        m = f1_for_class(records, "upgrade")
        assert m.precision == 0.0 and m.recall == 0.0 and m.f1 == 0.0
        assert set(m.undefined) == {"precision_upgrade", "recall_upgrade", "f1_upgrade"}

    def test_counts_partition_total(self):
        rng = np.random.default_rng(0)
        records = random_records(rng, 83)
        counts = confusion_counts(records, "downgrade")
        assert counts.total == 83


class TestAccuracy:
    def test_extremes(self):
        right = [make_record(label, label) for label in LABELS]
        wrong = [make_record("upgrade", "downgrade"), make_record("downgrade", "unchanged")]
        assert accuracy(right) == 1.0
        assert accuracy(wrong) == 0.0

    def test_counting_oracle_on_fixture(self):
        rng = np.random.default_rng(1)
        records = random_records(rng, 50)
        expected = sum(1 for r in records if r.pred_migration == r.true_migration) / 50
        assert accuracy(records) == expected

    def test_constant_unchanged_predictor_scores_base_rate(self):
        rng = np.random.default_rng(2)
        truths = [LABELS[rng.integers(0, 3)] for _ in range(200)]
        records = [make_record("unchanged", t, company=f"C{i}") for i, t in enumerate(truths)]
        base_rate = truths.count("unchanged") / len(truths)
        assert accuracy(records) == pytest.approx(base_rate)
        assert f1_for_class(records, "downgrade").f1 == 0.0


class TestOracleEquivalence:
    def test_thousand_random_record_sets(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            records = random_records(rng, int(rng.integers(1, 40)))
            for positive in ("upgrade", "downgrade"):
                got = f1_for_class(records, positive)
                tp, fp, fn, tn = brute_force_counts(records, positive)
                assert (got.counts.tp, got.counts.fp, got.counts.fn, got.counts.tn) == (
                    tp, fp, fn, tn,
                )
                assert got.f1 == brute_force_f1(records, positive)
            correct = sum(1 for r in records if r.pred_migration == r.true_migration)
            assert accuracy(records) == correct / len(records)

    def test_up_down_symmetry(self):
        swap = {"upgrade": "downgrade", "downgrade": "upgrade", "unchanged": "unchanged"}
        rng = np.random.default_rng(4)
        records = random_records(rng, 300)
        swapped = [
            make_record(swap[r.pred_migration], swap[r.true_migration], company=r.company_id)
            for r in records
        ]
        original = build_report(records)
        mirrored = build_report(swapped)
        assert mirrored.f1_up == original.f1_down
        assert mirrored.f1_down == original.f1_up
        assert mirrored.accuracy == original.accuracy


class TestBreakdown:
    def test_single_year_equals_global(self):
        rng = np.random.default_rng(5)
        records = random_records(rng, 40)
        buckets = breakdown(records, "year")
        assert list(buckets) == [2005]
        assert buckets[2005].f1_down == build_report(records).f1_down

    def test_buckets_partition_records(self):
        rng = np.random.default_rng(6)
        records = [
            make_record(
                LABELS[rng.integers(0, 3)], LABELS[rng.integers(0, 3)],
                year=int(rng.choice([2004, 2005, 2006])), company=f"C{i}",
            )
            for i in range(60)
        ]
        buckets = breakdown(records, "year")
        assert sum(b.n_records for b in buckets.values()) == 60

    def test_two_year_hand_fixture(self):
        records = (
            [make_record("downgrade", "downgrade", year=2004)] * 2
            + [make_record("unchanged", "downgrade", year=2004)] * 2
            + [make_record("downgrade", "downgrade", year=2005)] * 3
            + [make_record("downgrade", "unchanged", year=2005)] * 1
        )
        buckets = breakdown(records, "year")
        # 2004: p=1, r=1/2 -> f1 = 2/3; 2005: p=3/4, r=1 -> f1 = 6/7
        assert buckets[2004].f1_down == pytest.approx(2 / 3)
        assert buckets[2005].f1_down == pytest.approx(6 / 7)

    def test_rating_groups(self):
        assert rating_group("BBB-") == "BBB-"
        assert rating_group("AAA") == "other"
        records = [
            make_record("unchanged", "unchanged", rating="A+"),
            make_record("unchanged", "unchanged", rating="AA"),
        ]
        buckets = breakdown(records, "rating_group")
        assert set(buckets) == {"A+", "other"}

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            breakdown([make_record("unchanged", "unchanged")], "sector")


class TestCompareModes:
    def _sets(self):
        rng = np.random.default_rng(7)
        base = random_records(rng, 30)
        modes = {}
        for mode in (
            "rating_only/rating_to_migration",
            "migration_only/direct",
            "multi_task/rating_to_migration",
            "multi_task/direct",
        ):
            modes[mode] = [
                make_record(r.pred_migration, r.true_migration, company=r.company_id, mode=mode)
                for r in base
            ]
        return modes

    def test_four_rows_in_mode_order(self):
        table = compare_modes(self._sets())
        assert len(table) == 4
        assert all(set(row) == {"mode", "f1_up", "f1_down", "accuracy", "n_records"} for row in table)

    def test_identical_sets_identical_rows(self):
        table = compare_modes(self._sets())
        first = {k: v for k, v in table[0].items() if k != "mode"}
        for row in table[1:]:
            assert {k: v for k, v in row.items() if k != "mode"} == first

    def test_key_mismatch_raises(self):
        sets = self._sets()
        sets["multi_task/direct"] = sets["multi_task/direct"][:-1]
        with pytest.raises(AlignmentError):
            compare_modes(sets)


class TestWriters:
    def test_metrics_json_schema(self, tmp_path):
        rng = np.random.default_rng(8)
        report = build_report(random_records(rng, 25), mode="multi_task/direct")
        path = tmp_path / "metrics.json"
        write_metrics_json(report, path)
        payload = json.loads(path.read_text())
        for key in ("schema_version", "mode", "f1_up", "f1_down", "accuracy",
                    "n_records", "undefined_flags"):
            assert key in payload
        assert payload["schema_version"] == 1
        assert 0.0 <= payload["f1_down"] <= 1.0

    def test_breakdown_csv(self, tmp_path):
        rng = np.random.default_rng(9)
        records = random_records(rng, 30)
        path = tmp_path / "by_year.csv"
        write_breakdown_csv(breakdown(records, "year"), path, "year")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("year,n_records,f1_up,f1_down,accuracy")
        assert len(lines) == 2

    def test_ablation_csv(self, tmp_path):
        table = compare_modes(TestCompareModes()._sets())
        path = tmp_path / "ablation.csv"
        write_ablation_csv(table, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "mode,f1_up,f1_down,accuracy,n_records"
        assert len(lines) == 5
