"""Evaluation statistics and significance testing."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from clincon.data import STUDIED_BIOMARKERS
from clincon.errors import DataError


def _binary(labels) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be a flat 0/1 vector")
    return y.astype(np.int64)


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC: ordered pairs plus half credit for ties, over n+ * n-."""
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise DataError("scores and labels differ in length")
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise DataError("auroc needs both classes present")
    below = np.searchsorted(neg, pos, side="left")
    at_or_below = np.searchsorted(neg, pos, side="right")
    # twice the statistic, kept integral so the result is exact
    doubled = int(np.sum(below + at_or_below))
    return doubled / (2 * pos.size * neg.size)


def confusion_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> dict[str, float]:
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    pred = (s >= threshold).astype(np.int64)
    tp = int(np.sum((pred == 1) & (y == 1)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    n = tp + fp + fn + tn

    def ratio(a, b):
        return a / b if b else 0.0

    precision = ratio(tp, tp + fp)
    sensitivity = ratio(tp, tp + fn)
    f1 = 2 * precision * sensitivity / (precision + sensitivity) if precision + sensitivity > 0 else 0.0
    return {
        "accuracy": ratio(tp + tn, n),
        "f1": f1,
        "precision": precision,
        "sensitivity": sensitivity,
        "specificity": ratio(tn, tn + fp),
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
    }


def average_over_biomarkers(values: Mapping[str, float]) -> float:
    missing = [b for b in STUDIED_BIOMARKERS if b not in values]
    extra = [b for b in values if b not in STUDIED_BIOMARKERS]
    if missing or extra:
        raise DataError(f"need exactly the studied biomarkers; missing {missing}, unexpected {extra}")
    return float(np.mean([values[b] for b in STUDIED_BIOMARKERS]))


def multilabel_auroc(score_matrix, target_matrix, names: Sequence[str] | None = None) -> float:
    s = np.asarray(score_matrix, dtype=np.float64)
    t = np.asarray(target_matrix)
    if s.shape != t.shape or s.ndim != 2:
        raise DataError("score and target matrices must have the same 2-D shape")
    names = list(names) if names is not None else [str(i) for i in range(s.shape[1])]
    per = []
    for j in range(s.shape[1]):
        col = t[:, j]
        if np.all(col == col[0]):
            raise DataError(f"column {names[j]!r} has a single class; AUROC undefined")
        per.append(auroc(s[:, j], col))
    return float(np.mean(per))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    method: str = "welch"


def paired_t_test(runs_a: Sequence[float], runs_b: Sequence[float], alpha: float = 0.05) -> TTestResult:
    """Welch two-sample t-test (two-sided) between two populations of run results.

    Despite the name this does not pair runs by seed; both populations may
    differ in size.
    """
    a = np.asarray(runs_a, dtype=np.float64)
    b = np.asarray(runs_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("each population needs at least 2 runs")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    na, nb = a.size, b.size
    se2 = va / na + vb / nb
    if se2 == 0.0:
        if ma == mb:
            return TTestResult(0.0, 1.0, False)
        return TTestResult(math.copysign(math.inf, ma - mb), 0.0, True)
    t = (ma - mb) / math.sqrt(se2)
    dof = se2**2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = float(2.0 * stats.t.sf(abs(t), dof))
    return TTestResult(float(t), p, p < alpha)


@dataclass
class MetricReport:
    per_biomarker: dict[str, dict[str, float]] = field(default_factory=dict)
    averaged: dict[str, float] = field(default_factory=dict)
    multilabel_auroc: float | None = None
    seed: int | None = None
    notes: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "MetricReport":
        return cls(**json.loads(Path(path).read_text()))


SUMMARY_KEYS = ("accuracy", "f1", "auroc", "precision", "sensitivity", "specificity")


def biomarker_metrics(scores, labels, threshold: float = 0.5) -> dict[str, float]:
    m = confusion_metrics(scores, labels, threshold)
    out = {k: float(m[k]) for k in SUMMARY_KEYS if k != "auroc"}
    out["auroc"] = auroc(scores, labels)
    return out


def build_report(per_biomarker: Mapping[str, Mapping[str, float]], seed: int | None = None,
                 multilabel: float | None = None) -> MetricReport:
    """Assemble a report; averaged metrics appear once all five studied biomarkers are present."""
    averaged = {}
    if all(b in per_biomarker for b in STUDIED_BIOMARKERS):
        for key in SUMMARY_KEYS:
            averaged[key] = average_over_biomarkers({b: per_biomarker[b][key] for b in STUDIED_BIOMARKERS})
    return MetricReport(
        {k: dict(v) for k, v in per_biomarker.items()},
        averaged,
        multilabel,
        seed,
        {"threshold": "0.5", "significance_test": "welch-unpaired"},
    )
