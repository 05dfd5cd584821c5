"""Repeated-run evaluation metrics and all-pairs mean comparison.

Accuracy, macro precision/recall/F1 are collected over seeded training runs
and aggregated with sample standard deviations. Group differences are tested
with Tukey's honestly-significant-difference procedure; the underlying
studentized-range CDF is evaluated by nested Gauss-Legendre quadrature.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import TrainingError
from .imaging import DatasetManifest
from .model import (
    BackboneSource,
    MlpCore,
    TrainConfig,
    compute_feature_matrices,
    slice_selection,
    softmax,
    train_on_arrays,
)
from .texture import FEATURE_NAMES

METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


def confusion_and_metrics(predictions, labels, num_classes: int):
    """Confusion counts plus accuracy and macro precision/recall/F1.

    Per-class ratios with an empty denominator are defined as 0.
    """
    preds = np.asarray(predictions, dtype=np.intp)
    truth = np.asarray(labels, dtype=np.intp)
    if preds.size == 0 or preds.shape != truth.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    if preds.max() >= num_classes or truth.max() >= num_classes:
        raise ValueError("class index out of range")
    confusion = np.zeros((num_classes, num_classes), dtype=np.intp)
    np.add.at(confusion, (truth, preds), 1)
    tp = np.diag(confusion).astype(np.float64)
    pred_totals = confusion.sum(axis=0).astype(np.float64)
    true_totals = confusion.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_totals, out=np.zeros(num_classes), where=pred_totals > 0)
    recall = np.divide(tp, true_totals, out=np.zeros(num_classes), where=true_totals > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(num_classes), where=pr > 0)
    return {
        "confusion": confusion,
        "accuracy": float(tp.sum() / len(preds)),
        "precision": float(precision.mean()),
        "recall": float(recall.mean()),
        "f1": float(f1.mean()),
        "per_class_precision": tuple(float(v) for v in precision),
        "per_class_recall": tuple(float(v) for v in recall),
        "per_class_f1": tuple(float(v) for v in f1),
    }


@dataclass(frozen=True)
class RunMetrics:
    seed: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class_precision: tuple
    per_class_recall: tuple
    per_class_f1: tuple

    def value(self, metric: str) -> float:
        if metric not in METRIC_NAMES:
            raise ValueError(f"unknown metric {metric!r}")
        return getattr(self, metric)


@dataclass(frozen=True)
class MetricsReport:
    group: str
    runs: tuple

    def values(self, metric: str) -> np.ndarray:
        return np.array([r.value(metric) for r in self.runs])

    def aggregate(self) -> dict:
        out = {}
        for metric in METRIC_NAMES:
            vals = self.values(metric)
            if len(vals) < 2:
                std = float("nan")
            elif (vals == vals[0]).all():
                std = 0.0
            else:
                std = float(np.std(vals, ddof=1))
            out[metric] = {"mean": float(vals.mean()), "std": std}
        return out


def selection_name(selection) -> str:
    selection = tuple(selection)
    if not selection:
        return "none"
    if selection == FEATURE_NAMES:
        return "all"
    return ",".join(selection)


@dataclass(frozen=True)
class TrainEvalSpec:
    """Everything one seeded train-and-test run needs, minus the seed."""

    manifest: DatasetManifest
    backbone: BackboneSource
    selection: tuple = FEATURE_NAMES
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-5
    eval_split: str = "test"
    train_per_class: int | None = None
    group: str | None = None

    def group_label(self) -> str:
        return self.group if self.group is not None else selection_name(self.selection)


def multi_seed_run(spec: TrainEvalSpec, seeds=(0, 1, 2, 3, 4, 5), workers: int = 1) -> MetricsReport:
    """Train and evaluate once per seed, aggregating with sample (n-1) deviation."""
    matrices = compute_feature_matrices(spec.manifest, spec.backbone, workers=workers)
    return _multi_seed_on_matrices(spec, seeds, matrices)


def run_grid(spec: TrainEvalSpec, selections, seeds, workers: int = 1):
    """One report per feature selection, sharing a single feature precomputation."""
    matrices = compute_feature_matrices(spec.manifest, spec.backbone, workers=workers)
    reports = []
    for selection in selections:
        sub = replace(spec, selection=tuple(selection), group=None)
        reports.append(_multi_seed_on_matrices(sub, seeds, matrices))
    return reports


def _multi_seed_on_matrices(spec: TrainEvalSpec, seeds, matrices) -> MetricsReport:
    seeds = list(seeds)
    if len(seeds) < 2:
        raise TrainingError("at least 2 seeds are required for a standard deviation")
    raw_all, tex_all, labels_all = matrices
    aux_all = slice_selection(tex_all, spec.selection)
    train_idx = np.array(spec.manifest.split_indices("train"), dtype=np.intp)
    eval_idx = np.array(spec.manifest.split_indices(spec.eval_split), dtype=np.intp)
    if eval_idx.size == 0:
        raise TrainingError(f"manifest has no rows in split {spec.eval_split!r}")
    runs = []
    for seed in sorted(seeds):
        rows = _subsample_per_class(train_idx, labels_all, spec.train_per_class, seed)
        cfg = TrainConfig(
            epochs=spec.epochs,
            batch_size=spec.batch_size,
            learning_rate=spec.learning_rate,
            seed=seed,
            selection=tuple(spec.selection),
        )
        core, _ = train_on_arrays(
            raw_all[rows], aux_all[rows], labels_all[rows], raw_all.shape[1], cfg
        )
        preds = np.argmax(core.logits(raw_all[eval_idx], aux_all[eval_idx]), axis=1)
        m = confusion_and_metrics(preds, labels_all[eval_idx], core.out_dim)
        runs.append(
            RunMetrics(
                seed=seed,
                accuracy=m["accuracy"],
                precision=m["precision"],
                recall=m["recall"],
                f1=m["f1"],
                per_class_precision=m["per_class_precision"],
                per_class_recall=m["per_class_recall"],
                per_class_f1=m["per_class_f1"],
            )
        )
    return MetricsReport(group=spec.group_label(), runs=tuple(runs))


def _subsample_per_class(train_idx, labels_all, per_class, seed):
    if per_class is None:
        return train_idx
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    chosen = []
    for cls in np.unique(labels_all[train_idx]):
        rows = train_idx[labels_all[train_idx] == cls]
        if len(rows) > per_class:
            rows = rng.choice(rows, size=per_class, replace=False)
        chosen.append(np.sort(rows))
    return np.concatenate(chosen)


def evaluate_model(core: MlpCore, raw, aux, labels):
    probs = softmax(core.logits(raw, aux))
    preds = np.argmax(probs, axis=1)
    return confusion_and_metrics(preds, labels, core.out_dim)


# ---------------------------------------------------------------------------
# Studentized range distribution and Tukey's HSD

_GL_NODES = 64
_INNER_RANGE = 9.0


def _leggauss(a: float, b: float, n: int = _GL_NODES):
    nodes, weights = np.polynomial.legendre.leggauss(n)
    half = 0.5 * (b - a)
    return a + half * (nodes + 1.0), half * weights


def _norm_pdf(z):
    return np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _norm_cdf(z):
    flat = np.asarray(z, dtype=np.float64).ravel()
    out = np.array([0.5 * math.erfc(-v / math.sqrt(2.0)) for v in flat])
    return out.reshape(np.shape(z))


def _range_cdf_standard(u: float, k: int, z, z_weights, phi_z, cdf_z) -> float:
    """P(range of k standard normals <= u) by quadrature over the minimum."""
    if u <= 0:
        return 0.0
    inner = phi_z * (cdf_z - _norm_cdf(z - u)) ** (k - 1)
    return float(k * np.dot(z_weights, inner))


def studentized_range_cdf(q: float, k: int, df: int) -> float:
    """CDF of the studentized range statistic with k groups and df error dof.

    Integrates the conditional range probability over the distribution of the
    scale factor sqrt(chi2_df / df), both by fixed 64-node Gauss-Legendre
    rules on truncated domains.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if df < 1:
        raise ValueError("df must be >= 1")
    if q <= 0:
        return 0.0
    z, z_weights = _leggauss(-_INNER_RANGE, _INNER_RANGE)
    phi_z = _norm_pdf(z)
    cdf_z = _norm_cdf(z)
    spread = 12.0 / math.sqrt(2.0 * df)
    s_lo = max(0.0, 1.0 - spread)
    s_hi = 1.0 + spread
    s, s_weights = _leggauss(s_lo, s_hi)
    log_norm = (
        (1.0 - df / 2.0) * math.log(2.0)
        + (df / 2.0) * math.log(df)
        - math.lgamma(df / 2.0)
    )
    log_pdf = log_norm + (df - 1.0) * np.log(s) - df * s * s / 2.0
    pdf_s = np.exp(log_pdf)
    total = 0.0
    for sj, wj, fj in zip(s, s_weights, pdf_s):
        total += wj * fj * _range_cdf_standard(q * sj, k, z, z_weights, phi_z, cdf_z)
    return min(max(total, 0.0), 1.0)


@dataclass(frozen=True)
class TukeyPair:
    group_i: str
    group_j: str
    mean_difference: float  # mean(J) - mean(I)
    q_statistic: float
    p_adjusted: float
    reject: bool


def tukey_hsd(groups, alpha: float = 0.05):
    """All unordered pairs of equal-size groups, with range-adjusted p-values.

    ``groups`` is an ordered mapping of label -> samples. The pooled
    within-group variance uses N - k degrees of freedom.
    """
    labels = list(groups)
    samples = [np.asarray(groups[label], dtype=np.float64) for label in labels]
    k = len(labels)
    if k < 2:
        raise ValueError("at least 2 groups are required")
    n = len(samples[0])
    if n < 2:
        raise ValueError("each group needs at least 2 samples")
    if any(len(s) != n for s in samples):
        raise ValueError("groups must have equal sizes")
    means = np.array([s.mean() for s in samples])
    sse = sum(float(((s - s.mean()) ** 2).sum()) for s in samples)
    df = k * n - k
    mse = sse / df
    se = math.sqrt(mse / n)
    results = []
    for i in range(k):
        for j in range(i + 1, k):
            diff = abs(means[i] - means[j])
            if diff == 0.0:
                q = 0.0
            elif se == 0.0:
                q = math.inf
            else:
                q = diff / se
            p = 1.0 if q == 0.0 else (0.0 if q == math.inf else 1.0 - studentized_range_cdf(q, k, df))
            p = min(max(p, 0.0), 1.0)
            results.append(
                TukeyPair(
                    group_i=labels[i],
                    group_j=labels[j],
                    mean_difference=float(means[j] - means[i]),
                    q_statistic=float(q),
                    p_adjusted=p,
                    reject=p < alpha,
                )
            )
    return results


# ---------------------------------------------------------------------------
# Report serialization

TABLE1_HEADER = [
    "Features", "Mean Acc", "Acc Std", "Mean Prec", "Prec Std",
    "Mean Rec", "Rec Std", "Mean F1", "F1 Std",
]


def report_to_dict(report: MetricsReport) -> dict:
    aggregate = {}
    for metric, stats in report.aggregate().items():
        std = stats["std"]
        aggregate[metric] = {
            "mean": stats["mean"],
            "std": None if math.isnan(std) else std,
        }
    return {
        "group": report.group,
        "runs": [
            {
                "seed": r.seed,
                "accuracy": r.accuracy,
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
                "per_class_precision": list(r.per_class_precision),
                "per_class_recall": list(r.per_class_recall),
                "per_class_f1": list(r.per_class_f1),
            }
            for r in report.runs
        ],
        "aggregate": aggregate,
    }


def report_from_dict(doc: dict) -> MetricsReport:
    runs = tuple(
        RunMetrics(
            seed=int(r["seed"]),
            accuracy=float(r["accuracy"]),
            precision=float(r["precision"]),
            recall=float(r["recall"]),
            f1=float(r["f1"]),
            per_class_precision=tuple(r["per_class_precision"]),
            per_class_recall=tuple(r["per_class_recall"]),
            per_class_f1=tuple(r["per_class_f1"]),
        )
        for r in doc["runs"]
    )
    return MetricsReport(group=doc["group"], runs=runs)


def save_reports_json(reports, path: str) -> None:
    doc = {"groups": [report_to_dict(r) for r in reports]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_reports_json(path: str):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if "groups" not in doc:
        raise ValueError(f"{path}: not a metrics report file")
    return [report_from_dict(g) for g in doc["groups"]]


def write_table1_csv(reports, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE1_HEADER)
        for report in reports:
            agg = report.aggregate()
            row = [report.group]
            for metric in METRIC_NAMES:
                row.append(f"{agg[metric]['mean']:.6f}")
                row.append(f"{agg[metric]['std']:.6f}")
            writer.writerow(row)


def write_tukey_csv(results, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["I", "J", "MD", "P-adj", "Reject"])
        for r in results:
            writer.writerow(
                [
                    r.group_i,
                    r.group_j,
                    f"{r.mean_difference:.6f}",
                    f"{r.p_adjusted:.6f}",
                    "true" if r.reject else "false",
                ]
            )
