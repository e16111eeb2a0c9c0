"""Classification metrics, thresholding, ensembles and prediction tables."""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence
import csv
import os
import pathlib

import numpy as np

from .data import ImageSource, SampleRecord, batches
from .errors import MetricsError
from .model import LightTBNet
from .tensor import Tensor, no_grad
from .utils import fmt_float, format_table, logger, write_csv

DEFAULT_THRESHOLD = 0.5
TPP_MIN_SENSITIVITY = 0.90
TPP_MIN_SPECIFICITY = 0.70
N_ENSEMBLE = 5
F1_AVERAGE = "positive-class"

METRIC_NAMES = ("acc", "f1", "auc", "sensitivity", "specificity")


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise MetricsError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise MetricsError("no samples to evaluate")
    if not np.isin(y, (0, 1)).all():
        raise MetricsError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def auc(scores, labels) -> float:
    """
    ROC AUC as the Mann-Whitney statistic: the probability that a random
    positive outscores a random negative, tied pairs counting one half.
    Computed from average ranks, so it is exact for any ties.
    """
    s, y = _as_arrays(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC is undefined when only one class is present",
                           {"positives": n_pos, "negatives": n_neg})
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # average 1-based rank of each distinct value
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    """Thresholded metrics; auc is None when one class is missing."""
    acc: float
    f1: float
    auc: Optional[float]
    sensitivity: float
    specificity: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = DEFAULT_THRESHOLD
    f1_average: str = F1_AVERAGE

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def classify_and_report(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Predict positive when score >= threshold and fill every report field."""
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    tn = int(np.sum(~pred & (y == 0)))
    fn = int(np.sum(~pred & (y == 1)))
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    area = auc(s, y) if 0 < y.sum() < y.size else None
    return MetricsReport(acc=(tp + tn) / y.size, f1=f1, auc=area, sensitivity=recall,
                         specificity=_ratio(tn, tn + fp), tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold)


def report_from_counts(tp: int, fp: int, tn: int, fn: int, threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Report for known confusion counts (auc left empty)."""
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
    total = tp + fp + tn + fn
    if total == 0:
        raise MetricsError("empty confusion matrix")
    return MetricsReport((tp + tn) / total, f1, None, recall, _ratio(tn, tn + fp), tp, fp, tn, fn, threshold)


@dataclass(frozen=True)
class TppResult:
    """Triage target check: SN >= 0.90 and SP >= 0.70, boundaries inclusive."""
    passed: bool
    sensitivity_margin: float
    specificity_margin: float
    failed_on: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def tpp_check(report: MetricsReport, min_sensitivity: float = TPP_MIN_SENSITIVITY,
              min_specificity: float = TPP_MIN_SPECIFICITY) -> TppResult:
    sn_margin = report.sensitivity - min_sensitivity
    sp_margin = report.specificity - min_specificity
    failed = []
    if report.sensitivity < min_sensitivity:
        failed.append("sensitivity")
    if report.specificity < min_specificity:
        failed.append("specificity")
    return TppResult(not failed, sn_margin, sp_margin, failed)


def ensemble_scores(per_fold_scores: Sequence[Sequence[float]], n_models: int = N_ENSEMBLE) -> np.ndarray:
    """Arithmetic mean of exactly `n_models` aligned score vectors."""
    if len(per_fold_scores) != n_models:
        raise MetricsError(f"ensemble needs {n_models} score vectors, got {len(per_fold_scores)}")
    stacked = [np.asarray(s, dtype=np.float64).reshape(-1) for s in per_fold_scores]
    lengths = {s.size for s in stacked}
    if len(lengths) != 1:
        raise MetricsError(f"score vectors have different lengths {sorted(lengths)}")
    return np.mean(np.stack(stacked), axis=0)


class PredictionSet:
    """Per-sample labels, per-fold TB scores and their ensemble mean."""

    def __init__(self, sample_ids: Sequence[str], labels: Sequence[int], fold_scores: Sequence[Sequence[float]],
                 cohorts: Optional[Sequence[str]] = None):
        self.sample_ids = list(sample_ids)
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise MetricsError("sample ids must be unique")
        self.labels = np.asarray(labels, dtype=np.int64)
        self.fold_scores = [np.asarray(s, dtype=np.float64) for s in fold_scores]
        self.cohorts = list(cohorts) if cohorts is not None else None
        for s in self.fold_scores:
            if s.shape != (len(self.sample_ids),):
                raise MetricsError(f"fold scores have {s.size} entries for {len(self.sample_ids)} samples")
            if np.any((s < 0) | (s > 1)):
                raise MetricsError("scores must lie in [0,1]")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def ensemble(self) -> np.ndarray:
        if len(self.fold_scores) == 1:
            return self.fold_scores[0]
        return ensemble_scores(self.fold_scores, len(self.fold_scores))

    def subset(self, cohort: str) -> "PredictionSet":
        if self.cohorts is None:
            raise MetricsError("prediction set carries no cohort information")
        keep = [i for i, c in enumerate(self.cohorts) if c == cohort]
        return PredictionSet([self.sample_ids[i] for i in keep], self.labels[keep],
                             [s[keep] for s in self.fold_scores], [cohort] * len(keep))

    def to_csv(self, path: os.PathLike) -> pathlib.Path:
        header = ["sample_id", "label"] + [f"score_fold{k}" for k in range(len(self.fold_scores))] + ["score_ensemble"]
        ens = self.ensemble
        rows = []
        for i, sid in enumerate(self.sample_ids):
            rows.append([sid, int(self.labels[i])] + [repr(float(s[i])) for s in self.fold_scores]
                        + [repr(float(ens[i]))])
        return write_csv(path, header, rows)

    @classmethod
    def from_csv(cls, path: os.PathLike) -> "PredictionSet":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            fold_cols = sorted((c for c in (reader.fieldnames or []) if c.startswith("score_fold")),
                               key=lambda c: int(c[len("score_fold"):]))
            ids, labels, cols = [], [], [[] for _ in fold_cols]
            for row in reader:
                ids.append(row["sample_id"])
                labels.append(int(row["label"]))
                for j, c in enumerate(fold_cols):
                    cols[j].append(float(row[c]))
        return cls(ids, labels, cols)


def model_scores(model: LightTBNet, records: Sequence[SampleRecord], source: ImageSource,
                 batch_size: int = 16) -> np.ndarray:
    """TB scores of one model for records, in order, without augmentation."""
    was_training = model.training
    model.eval()
    dtype = model.fc2.weight.dtype
    out: List[np.ndarray] = []
    try:
        with no_grad():
            for batch in batches(records, "test", source, batch_size=batch_size):
                out.append(model.tb_scores(Tensor(batch.images, dtype=dtype)))
    finally:
        model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0)


def predict_records(models: Sequence[LightTBNet], records: Sequence[SampleRecord], source: ImageSource,
                    batch_size: int = 16) -> PredictionSet:
    """Score records with every model and collect a PredictionSet."""
    fold_scores = [model_scores(m, records, source, batch_size) for m in models]
    return PredictionSet([r.sample_id for r in records], [r.label for r in records], fold_scores,
                         [r.cohort for r in records])


def cohort_breakdown(predictions: PredictionSet, threshold: float = DEFAULT_THRESHOLD) -> Dict[str, MetricsReport]:
    """Ensemble metrics per cohort (sorted) followed by all cohorts combined."""
    reports: Dict[str, MetricsReport] = {}
    if predictions.cohorts is not None:
        for cohort in sorted(set(predictions.cohorts)):
            part = predictions.subset(cohort)
            reports[cohort] = classify_and_report(part.ensemble, part.labels, threshold)
    reports["combined"] = classify_and_report(predictions.ensemble, predictions.labels, threshold)
    return reports


def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, float]]:
    """Mean and population std of each metric across folds."""
    if not reports:
        raise MetricsError("no reports to aggregate")
    summary: Dict[str, Dict[str, float]] = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=np.float64)
        if values.size:
            summary[name] = {"mean": float(values.mean()), "std": float(values.std())}
    return summary


REPORT_HEADER = ("subset", "n", "acc", "f1", "auc", "sensitivity", "specificity", "tp", "fp", "tn", "fn", "threshold")


def report_rows(reports: Dict[str, MetricsReport]) -> List[List[str]]:
    return [[name, r.total, fmt_float(r.acc), fmt_float(r.f1), fmt_float(r.auc), fmt_float(r.sensitivity),
             fmt_float(r.specificity), r.tp, r.fp, r.tn, r.fn, r.threshold] for name, r in reports.items()]


def write_report(reports: Dict[str, MetricsReport], path: os.PathLike) -> pathlib.Path:
    return write_csv(path, REPORT_HEADER, report_rows(reports))


def format_report(reports: Dict[str, MetricsReport]) -> str:
    text = format_table(REPORT_HEADER, report_rows(reports))
    return f"{text}\nF1 is {F1_AVERAGE}; score >= threshold counts as TB."


def log_report(name: str, report: MetricsReport) -> None:
    tpp = tpp_check(report)
    logger.info(f"{name}: acc={report.acc:.3f} f1={report.f1:.3f} auc={fmt_float(report.auc)} "
                f"sn={report.sensitivity:.3f} sp={report.specificity:.3f} tpp={'pass' if tpp.passed else 'fail'}")
