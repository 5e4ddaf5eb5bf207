"""Detection metrics: AUC, EER, F1 and FRR at a fixed FAR, all as percentages.

Conventions: a trial is accepted when ``score >= threshold``. EER is linearly
interpolated where FAR - FRR changes sign; FRR@FAR uses the smallest
threshold whose FAR does not exceed the target.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass
class ScoredSet:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.shape != self.labels.shape or self.scores.ndim != 1:
            raise ValueError("scores and labels must be 1-d arrays of equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if self.labels.sum() == 0 or self.labels.sum() == len(self.labels):
            raise ValueError("need at least one positive and one negative")

    @property
    def positives(self) -> np.ndarray:
        return self.scores[self.labels == 1]

    @property
    def negatives(self) -> np.ndarray:
        return self.scores[self.labels == 0]


def _as_set(s, labels=None) -> ScoredSet:
    return s if isinstance(s, ScoredSet) else ScoredSet(s, labels)


def auc(s, labels=None) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    s = _as_set(s, labels)
    pos, neg = s.positives, s.negatives
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    not_above = np.searchsorted(neg_sorted, pos, side="right")
    wins = below.sum() + 0.5 * (not_above - below).sum()
    return 100.0 * float(wins) / (len(pos) * len(neg))


def roc_points(s, labels=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, FAR, FRR) over every distinct score plus one reject-all point."""
    s = _as_set(s, labels)
    thr = np.unique(s.scores)
    pos, neg = np.sort(s.positives), np.sort(s.negatives)
    far = (len(neg) - np.searchsorted(neg, thr, side="left")) / len(neg)
    frr = np.searchsorted(pos, thr, side="left") / len(pos)
    thr = np.append(thr, np.inf)
    far = np.append(far, 0.0)
    frr = np.append(frr, 1.0)
    return thr, far, frr


def eer(s, labels=None) -> float:
    _, far, frr = roc_points(s, labels)
    d = far - frr
    zero = np.flatnonzero(d == 0)
    if len(zero):
        return 100.0 * float(far[zero[0]])
    i = int(np.flatnonzero((d[:-1] > 0) & (d[1:] < 0))[0])
    alpha = d[i] / (d[i] - d[i + 1])
    return 100.0 * float(far[i] + alpha * (far[i + 1] - far[i]))


def f1(s, labels=None, threshold: float = 0.5) -> float:
    s = _as_set(s, labels)
    pred = s.scores >= threshold
    tp = int(np.sum(pred & (s.labels == 1)))
    fp = int(np.sum(pred & (s.labels == 0)))
    fn = int(np.sum(~pred & (s.labels == 1)))
    if tp == 0:
        return 0.0
    # 2PR / (P + R) with the fractions cleared: one rounding instead of four
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def frr_at_far(s, labels=None, far_target: float = 0.05) -> float:
    _, far, frr = roc_points(s, labels)
    ok = np.flatnonzero(far <= far_target)
    return 100.0 * float(frr[ok[0]])


def report(s, labels=None, threshold: float = 0.5) -> dict[str, float]:
    s = _as_set(s, labels)
    return {
        "auc": auc(s),
        "eer": eer(s),
        "f1": f1(s, threshold=threshold),
        "frr_at_far5": frr_at_far(s, far_target=0.05),
    }


# -- score-file protocol ------------------------------------------------------------------------

@dataclass(frozen=True)
class ScoreRow:
    clip_id: str
    keyword: str
    label: int
    score: float


def write_scores(path, rows: Iterable[ScoreRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for r in rows:
            writer.writerow([r.clip_id, r.keyword, r.label, repr(float(r.score))])


def read_scores(path) -> list[ScoreRow]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if len(rec) != 4:
                raise ValueError(f"{path}:{lineno}: expected clip_id,keyword,label,score")
            if lineno == 1 and rec[2] == "label":
                continue
            rows.append(ScoreRow(rec[0], rec[1], int(rec[2]), float(rec[3])))
    return rows


def write_report(path, results: dict[str, dict[str, float]]) -> None:
    """One CSV row per (subset, metric)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subset", "metric", "value"])
        for subset, metrics in results.items():
            for name, value in metrics.items():
                writer.writerow([subset, name, f"{value:.4f}"])


def write_roc(path, s, labels=None) -> None:
    thr, far, frr = roc_points(s, labels)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "far", "frr"])
        for t, a, r in zip(thr, far, frr):
            writer.writerow([repr(float(t)), f"{a:.6f}", f"{r:.6f}"])


def scored_set(rows: Sequence[ScoreRow]) -> ScoredSet:
    return ScoredSet(np.array([r.score for r in rows]), np.array([r.label for r in rows]))


def load_report(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            out.setdefault(rec["subset"], {})[rec["metric"]] = float(rec["value"])
    return out
