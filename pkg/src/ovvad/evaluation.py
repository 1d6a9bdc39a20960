"""Frame-level ROC-AUC and average precision, video-level Top-1 accuracy
with base/novel breakdowns, confusion matrices, and curve export.

Both rank metrics are computed from integer tie-group counts so they agree
exactly (bit-for-bit) with their brute-force oracles: ROC as the
P(pos > neg) + 0.5 P(tie) statistic, AP as the step-wise sum over descending
unique thresholds.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, read_features
from .errors import DataError, UsageError
from .model import ClassCatalog, ModelConfig, ModelParams, run_inference
from .numkernel import sigmoid


def worker_count() -> int:
    """Resolve the OVVAD_THREADS cap; 0 (or unset=1) means auto."""
    raw = os.environ.get("OVVAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"OVVAD_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("OVVAD_THREADS must be >= 0")
    return (os.cpu_count() or 1) if n == 0 else n


class UndefinedMetric(DataError):
    """Raised when labels cannot support the requested metric."""


def _check_binary(labels: np.ndarray) -> None:
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0/1")


def roc_auc(scores, labels) -> float:
    """Rank statistic P(score_pos > score_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    pos = int(labels.sum())
    neg = labels.size - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetric("ROC-AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    wins = 0.0
    neg_below = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        p_g = int(y[i:j].sum())
        n_g = (j - i) - p_g
        wins += p_g * neg_below + 0.5 * p_g * n_g
        neg_below += n_g
        i = j
    return wins / (pos * neg)


def pr_auc(scores, labels) -> float:
    """Step-wise average precision over descending thresholds, ties grouped."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    _check_binary(labels)
    pos = int(labels.sum())
    if pos == 0:
        raise UndefinedMetric("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        recall = tp / pos
        precision = tp / (tp + fp)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return ap


def roc_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, fpr, tpr) per descending tie group, starting at (inf, 0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int(labels.sum())
    neg = labels.size - pos
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        points.append((float(s[i]), fp / max(1, neg), tp / max(1, pos)))
        i = j
    return points


def pr_curve(scores, labels) -> list[tuple[float, float, float]]:
    """(threshold, recall, precision) per descending tie group."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = int(labels.sum())
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    points = []
    tp = fp = 0
    i = 0
    while i < s.size:
        j = i
        while j < s.size and s[j] == s[i]:
            j += 1
        tp += int(y[i:j].sum())
        fp += (j - i) - int(y[i:j].sum())
        points.append((float(s[i]), tp / max(1, pos), tp / (tp + fp)))
        i = j
    return points


def expand_scores(scores, stride: int, original_frame_count: int) -> np.ndarray:
    """Repeat each sampled score stride times, truncated to the original count."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if original_frame_count < scores.size:
        raise ValueError(
            f"original_frame_count {original_frame_count} shorter than {scores.size} sampled scores"
        )
    if original_frame_count > scores.size * stride:
        raise ValueError(
            f"{scores.size} scores at stride {stride} cannot cover {original_frame_count} frames"
        )
    return np.repeat(scores, stride)[:original_frame_count]


@dataclass
class EvalReport:
    auc: float | None = None
    auc_base: float | None = None
    auc_novel: float | None = None
    ap: float | None = None
    ap_base: float | None = None
    ap_novel: float | None = None
    acc: float | None = None
    acc_base: float | None = None
    acc_novel: float | None = None
    confusion: np.ndarray | None = None  # (k, k) true x predicted counts
    class_names: list[str] = field(default_factory=list)
    roc_points: list[tuple[float, float, float]] = field(default_factory=list)
    pr_points: list[tuple[float, float, float]] = field(default_factory=list)
    excluded: list[str] = field(default_factory=list)

    def scalars(self) -> dict[str, float | None]:
        return {
            "auc": self.auc,
            "auc_base": self.auc_base,
            "auc_novel": self.auc_novel,
            "ap": self.ap,
            "ap_base": self.ap_base,
            "ap_novel": self.ap_novel,
            "acc": self.acc,
            "acc_base": self.acc_base,
            "acc_novel": self.acc_novel,
        }


def _try_metric(fn, scores, labels) -> float | None:
    if len(scores) == 0:
        return None
    try:
        return fn(np.concatenate(scores), np.concatenate(labels))
    except UndefinedMetric:
        return None


def evaluate(
    params: ModelParams,
    manifest: Manifest,
    catalog: ClassCatalog,
    mcfg: ModelConfig,
) -> EvalReport:
    """Score the test split: frame AUC/AP overall and per base/novel subset
    (normal videos count as negatives in both subsets), Top-1 accuracy over
    abnormal test videos, and the confusion matrix."""
    test = manifest.split("test")
    if not test:
        raise DataError("manifest has no test videos")
    report = EvalReport(class_names=list(catalog.class_names))
    k = catalog.k
    confusion = np.zeros((k, k), dtype=int)

    all_scores, all_gt = [], []
    base_scores, base_gt = [], []
    novel_scores, novel_gt = [], []
    correct: list[bool] = []
    correct_base: list[bool] = []
    correct_novel: list[bool] = []

    def score(rec):
        seq = read_features(manifest.resolve(rec.feature_path))
        frame_logits, class_logits = run_inference(seq, params, catalog, mcfg)
        return sigmoid(frame_logits), class_logits

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            scored = list(pool.map(score, test))
    else:
        scored = [score(rec) for rec in test]

    for rec, (scores, class_logits) in zip(test, scored):
        if rec.frame_gt is None:
            report.excluded.append(rec.id)
        else:
            gt = np.asarray(rec.frame_gt, dtype=int)
            if gt.size != scores.size:
                raise DataError(f"video {rec.id!r}: {gt.size} labels for {scores.size} frames")
            all_scores.append(scores)
            all_gt.append(gt)
            if rec.is_abnormal:
                y = catalog.class_index(rec.label)
                (base_scores if catalog.is_base[y] else novel_scores).append(scores)
                (base_gt if catalog.is_base[y] else novel_gt).append(gt)
            else:
                base_scores.append(scores)
                base_gt.append(gt)
                novel_scores.append(scores)
                novel_gt.append(gt)
        if rec.is_abnormal:
            y = catalog.class_index(rec.label)
            pred = int(np.argmax(class_logits))
            confusion[y, pred] += 1
            hit = pred == y
            correct.append(hit)
            (correct_base if catalog.is_base[y] else correct_novel).append(hit)

    report.auc = _try_metric(roc_auc, all_scores, all_gt)
    report.ap = _try_metric(pr_auc, all_scores, all_gt)
    report.auc_base = _try_metric(roc_auc, base_scores, base_gt)
    report.ap_base = _try_metric(pr_auc, base_scores, base_gt)
    report.auc_novel = _try_metric(roc_auc, novel_scores, novel_gt) if novel_scores else None
    report.ap_novel = _try_metric(pr_auc, novel_scores, novel_gt) if novel_scores else None
    report.acc = float(np.mean(correct)) if correct else None
    report.acc_base = float(np.mean(correct_base)) if correct_base else None
    report.acc_novel = float(np.mean(correct_novel)) if correct_novel else None
    report.confusion = confusion
    if all_scores:
        flat_scores = np.concatenate(all_scores)
        flat_gt = np.concatenate(all_gt)
        report.roc_points = roc_curve(flat_scores, flat_gt)
        report.pr_points = pr_curve(flat_scores, flat_gt)
    return report


def write_report(report: EvalReport, out_dir) -> None:
    """report.json for the scalars, CSVs for the curves and confusion matrix."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.scalars()
    payload["excluded"] = report.excluded
    payload["class_names"] = report.class_names
    payload["confusion"] = report.confusion.tolist() if report.confusion is not None else None
    (out / "report.json").write_text(json.dumps(payload, indent=1))

    with open(out / "roc_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        writer.writerows(report.roc_points)
    with open(out / "pr_curve.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "recall", "precision"])
        writer.writerows(report.pr_points)
    if report.confusion is not None:
        with open(out / "confusion.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + report.class_names)
            for name, row in zip(report.class_names, report.confusion):
                writer.writerow([name] + [int(x) for x in row])
