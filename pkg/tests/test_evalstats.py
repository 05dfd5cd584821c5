import csv
import math

import numpy as np
import pytest

from burnsight.evalstats import (
    MetricsReport,
    RunMetrics,
    confusion_and_metrics,
    load_reports_json,
    report_from_dict,
    report_to_dict,
    save_reports_json,
    selection_name,
    studentized_range_cdf,
    tukey_hsd,
    write_table1_csv,
    write_tukey_csv,
)


def naive_metrics(preds, labels, k):
    """Per-class counting with explicit loops."""
    precision, recall, f1 = [], [], []
    for c in range(k):
        tp = sum(1 for p, t in zip(preds, labels) if p == c and t == c)
        fp = sum(1 for p, t in zip(preds, labels) if p == c and t != c)
        fn = sum(1 for p, t in zip(preds, labels) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        precision.append(prec)
        recall.append(rec)
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    acc = sum(1 for p, t in zip(preds, labels) if p == t) / len(preds)
    return acc, np.mean(precision), np.mean(recall), np.mean(f1)


def make_run(seed, accuracy, value=0.8):
    return RunMetrics(
        seed=seed, accuracy=accuracy, precision=value, recall=value, f1=value,
        per_class_precision=(value,) * 3, per_class_recall=(value,) * 3,
        per_class_f1=(value,) * 3,
    )


def make_report(group, accuracies):
    return MetricsReport(
        group=group, runs=tuple(make_run(i, a) for i, a in enumerate(accuracies))
    )


class TestConfusionAndMetrics:
    def test_perfect_predictions(self):
        m = confusion_and_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m["accuracy"] == 1.0
        assert m["precision"] == 1.0 and m["recall"] == 1.0 and m["f1"] == 1.0

    def test_all_one_class_on_balanced_data(self):
        labels = [0, 1, 2] * 4
        preds = [0] * 12
        m = confusion_and_metrics(preds, labels, 3)
        assert m["accuracy"] == pytest.approx(1 / 3)
        assert m["precision"] == pytest.approx(1 / 9)
        assert m["recall"] == pytest.approx(1 / 3)

    def test_matches_naive_counting_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            labels = rng.integers(0, 3, 40)
            preds = rng.integers(0, 3, 40)
            m = confusion_and_metrics(preds, labels, 3)
            acc, prec, rec, f1 = naive_metrics(preds, labels, 3)
            np.testing.assert_allclose(
                [m["accuracy"], m["precision"], m["recall"], m["f1"]],
                [acc, prec, rec, f1],
                atol=1e-12,
            )

    def test_macro_f1_is_mean_of_per_class(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 3, 30)
        preds = rng.integers(0, 3, 30)
        m = confusion_and_metrics(preds, labels, 3)
        assert m["f1"] == pytest.approx(np.mean(m["per_class_f1"]), abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            confusion_and_metrics([], [], 3)


class TestAggregation:
    def test_two_point_mean_and_std(self):
        report = make_report("g", [0.9, 1.0])
        agg = report.aggregate()
        assert agg["accuracy"]["mean"] == pytest.approx(0.95)
        assert agg["accuracy"]["std"] == pytest.approx(0.070711, abs=1e-6)

    def test_identical_runs_zero_std(self):
        report = make_report("g", [0.8, 0.8, 0.8])
        assert report.aggregate()["accuracy"]["std"] == 0.0

    def test_aggregate_recomputable_from_rows(self):
        report = make_report("g", [0.7, 0.8, 0.9])
        vals = report.values("accuracy")
        agg = report.aggregate()["accuracy"]
        assert agg["mean"] == pytest.approx(vals.mean())
        assert agg["std"] == pytest.approx(np.std(vals, ddof=1))


class TestStudentizedRange:
    def test_zero_is_zero(self):
        assert studentized_range_cdf(0.0, 3, 10) == 0.0

    def test_published_critical_value(self):
        v = studentized_range_cdf(3.877, 3, 10)
        assert 0.945 <= v <= 0.955

    def test_closed_form_two_groups_one_df(self):
        for q in (0.3, 1.0, 2.5, 6.0):
            exact = 2.0 * math.atan(q / math.sqrt(2.0)) / math.pi
            assert studentized_range_cdf(q, 2, 1) == pytest.approx(exact, abs=1e-6)

    def test_closed_form_two_groups_two_df(self):
        for q in (0.3, 1.0, 2.5, 6.0):
            exact = q / math.sqrt(4.0 + q * q)
            assert studentized_range_cdf(q, 2, 2) == pytest.approx(exact, abs=1e-6)

    def test_monotone_in_q(self):
        grid = np.linspace(0.0, 10.0, 100)
        values = [studentized_range_cdf(float(q), 4, 12) for q in grid]
        assert all(b >= a for a, b in zip(values, values[1:]))

    def test_limit_is_one(self):
        assert studentized_range_cdf(100.0, 3, 10) > 1 - 1e-6

    def test_domain_validation(self):
        with pytest.raises(ValueError):
            studentized_range_cdf(1.0, 1, 10)
        with pytest.raises(ValueError):
            studentized_range_cdf(1.0, 3, 0)


# Group means in the fixed comparison order, and the expected mean differences
# MD = mean(J) - mean(I) for each pair.
GROUP_MEANS = {
    "All": 0.9256,
    "ASM": 0.8854,
    "Contr": 0.9362,
    "Dissim": 0.8956,
    "Energy": 0.8854,
    "Homog": 0.8875,
    "None": 0.8753,
}
EXPECTED_MDS = {
    ("All", "ASM"): -0.0402,
    ("All", "Contr"): 0.0106,
    ("All", "Dissim"): -0.03,
    ("All", "Energy"): -0.0402,
    ("All", "Homog"): -0.0381,
    ("All", "None"): -0.0503,
    ("ASM", "Contr"): 0.0508,
    ("ASM", "Dissim"): 0.0102,
    ("ASM", "Energy"): 0.0,
    ("ASM", "Homog"): 0.0021,
    ("ASM", "None"): -0.0101,
    ("Contr", "Dissim"): -0.0406,
    ("Contr", "Energy"): -0.0508,
    ("Contr", "Homog"): -0.0487,
    ("Contr", "None"): -0.0609,
    ("Dissim", "Energy"): -0.0102,
    ("Dissim", "Homog"): -0.0081,
    ("Dissim", "None"): -0.0203,
    ("Energy", "Homog"): 0.0021,
    ("Energy", "None"): -0.0101,
    ("Homog", "None"): -0.0122,
}


def groups_with_means(means, jitter=0.002, n=6):
    offsets = np.array([-1, 1, -1, 1, -1, 1]) * jitter
    return {name: mean + offsets for name, mean in means.items()}


class TestTukeyHsd:
    def test_mean_difference_column(self):
        results = tukey_hsd(groups_with_means(GROUP_MEANS))
        assert len(results) == 21
        for r in results:
            expected = EXPECTED_MDS[(r.group_i, r.group_j)]
            assert r.mean_difference == pytest.approx(expected, abs=1e-4), (
                r.group_i, r.group_j,
            )

    def test_identical_groups(self):
        groups = {"a": [0.9, 1.0, 0.8], "b": [0.9, 1.0, 0.8]}
        (r,) = tukey_hsd(groups)
        assert r.q_statistic == 0.0
        assert r.p_adjusted == 1.0
        assert not r.reject

    def test_md_antisymmetric_p_symmetric(self):
        fwd = tukey_hsd({"a": [0.1, 0.2, 0.3], "b": [0.4, 0.5, 0.6]})[0]
        rev = tukey_hsd({"b": [0.4, 0.5, 0.6], "a": [0.1, 0.2, 0.3]})[0]
        assert fwd.mean_difference == pytest.approx(-rev.mean_difference)
        assert fwd.p_adjusted == pytest.approx(rev.p_adjusted)

    def test_larger_gap_never_raises_p(self):
        base = np.array([0.0, 0.01, -0.01, 0.005])
        previous = 1.0
        for gap in (0.01, 0.05, 0.1, 0.5):
            (r,) = tukey_hsd({"a": base, "b": base + gap})
            assert r.p_adjusted <= previous + 1e-12
            previous = r.p_adjusted

    def test_unequal_sizes_rejected(self):
        with pytest.raises(ValueError, match="equal"):
            tukey_hsd({"a": [1, 2, 3], "b": [1, 2]})

    def test_clear_separation_rejects(self):
        groups = {"lo": [0.50, 0.51, 0.49, 0.50], "hi": [0.90, 0.91, 0.89, 0.90]}
        (r,) = tukey_hsd(groups)
        assert r.reject and r.p_adjusted < 0.001


class TestReportIo:
    def test_json_roundtrip(self, tmp_path):
        reports = [make_report("all", [0.9, 0.95]), make_report("none", [0.7, 0.75])]
        path = str(tmp_path / "report.json")
        save_reports_json(reports, path)
        again = load_reports_json(path)
        assert again == reports

    def test_dict_roundtrip(self):
        report = make_report("contrast", [0.88, 0.91, 0.9])
        assert report_from_dict(report_to_dict(report)) == report

    def test_table1_layout(self, tmp_path):
        path = str(tmp_path / "table1.csv")
        write_table1_csv([make_report("all", [0.9, 1.0])], path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == [
            "Features", "Mean Acc", "Acc Std", "Mean Prec", "Prec Std",
            "Mean Rec", "Rec Std", "Mean F1", "F1 Std",
        ]
        assert rows[1][0] == "all"
        assert float(rows[1][1]) == pytest.approx(0.95)
        assert float(rows[1][2]) == pytest.approx(0.070711, abs=1e-6)

    def test_tukey_csv_pair_count_and_flags(self, tmp_path):
        groups = groups_with_means(GROUP_MEANS)
        results = tukey_hsd(groups)
        path = str(tmp_path / "tukey.csv")
        write_tukey_csv(results, path)
        with open(path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["I", "J", "MD", "P-adj", "Reject"]
        assert len(rows) == 22  # header + C(7,2)
        assert {r[4] for r in rows[1:]} <= {"true", "false"}

    def test_selection_name(self):
        assert selection_name(()) == "none"
        assert selection_name(("contrast", "homogeneity", "asm", "energy", "dissimilarity")) == "all"
        assert selection_name(("contrast", "energy")) == "contrast,energy"
