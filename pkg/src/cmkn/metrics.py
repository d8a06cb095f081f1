"""Binary classification metrics and cross-validation aggregation."""

from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

METRIC_NAMES = ("accuracy", "f1", "mcc", "auroc", "auprc")


@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    mcc: float
    auroc: float | None
    auprc: float | None
    tp: int
    fp: int
    tn: int
    fn: int
    n_samples: int
    auc_defined: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def csv_header(cls):
        return ",".join(cls.__dataclass_fields__)

    def csv_row(self):
        return ",".join(_fmt(getattr(self, f)) for f in self.__dataclass_fields__)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def matthews_corrcoef(tp, fp, tn, fn):
    """MCC from confusion counts; 0 when any marginal is empty."""
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def roc_auc(labels, scores):
    """Mann-Whitney rank statistic with average ranks for ties."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(labels, scores):
    """Area under the precision-recall curve by step-wise summation over thresholds."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=float)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        return None
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    # keep the last index of every run of tied scores
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    precision = tps[last] / (tps[last] + fps[last])
    # integer recall increments keep a perfect ranking at exactly 1
    gained = np.diff(np.r_[0, tps[last]])
    return float(np.sum(gained * precision) / n_pos)


def compute_metrics(labels, scores, threshold=0.5):
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=float)
    if labels.shape != scores.shape or labels.size == 0:
        raise ValueError("labels and scores must be non-empty and equally long")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    pred = scores >= threshold
    truth = labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    tn = int(np.sum(~pred & ~truth))
    fn = int(np.sum(~pred & truth))
    n = labels.size
    f1_denom = 2 * tp + fp + fn
    auroc = roc_auc(labels, scores)
    return MetricsReport(
        accuracy=(tp + tn) / n,
        f1=(2 * tp / f1_denom) if f1_denom else 0.0,
        mcc=matthews_corrcoef(tp, fp, tn, fn),
        auroc=auroc,
        auprc=average_precision(labels, scores),
        tp=tp, fp=fp, tn=tn, fn=fn, n_samples=n,
        auc_defined=auroc is not None,
    )


def aggregate_folds(reports):
    """Mean and sample standard deviation (ddof=1) of every metric across folds.

    A single report yields a standard deviation of 0. Undefined AUC values are
    left out of their metric's statistics.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    out = {}
    for name in METRIC_NAMES:
        values = np.array([getattr(r, name) for r in reports if getattr(r, name) is not None], dtype=float)
        if values.size == 0:
            out[name] = (None, None)
            continue
        # identical folds: exact zero instead of rounding noise
        std = float(np.std(values, ddof=1)) if np.ptp(values) > 0 else 0.0
        out[name] = (float(np.mean(values)), std)
    return out


def format_reports_csv(reports, extra=None):
    """CSV with one row per report; ``extra`` adds leading columns (list of dicts)."""
    out = io.StringIO()
    extra = extra or [{} for _ in reports]
    keys = list(extra[0]) if extra else []
    out.write(",".join(keys + [MetricsReport.csv_header()]) + "\n")
    for e, r in zip(extra, reports):
        out.write(",".join([_fmt(e[k]) for k in keys] + [r.csv_row()]) + "\n")
    return out.getvalue()
