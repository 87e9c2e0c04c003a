"""Image-level evaluation: AUROC, FPR at a fixed TPR, seed aggregation.

A sample counts as predicted bad when its score is ``>=`` the threshold.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError, SingleClassError, ValidationError


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionMismatchError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 (good) or 1 (bad)")
    if np.isnan(s).any():
        raise ValidationError("scores contain NaN")
    good, bad = s[y == 0], s[y == 1]
    if good.size == 0 or bad.size == 0:
        raise SingleClassError(f"need both classes, got {good.size} good and {bad.size} bad")
    return good, bad


def auroc(scores, labels) -> float:
    """Probability that a bad sample outscores a good one, ties counting half.

    Counted exactly on integers over distinct score values, O(n log n).
    """
    good, bad = _split(scores, labels)
    values, inv = np.unique(np.concatenate([good, bad]), return_inverse=True)
    n_good_at = np.bincount(inv[:good.size], minlength=values.size)
    n_bad_at = np.bincount(inv[good.size:], minlength=values.size)
    good_below = np.concatenate([[0], np.cumsum(n_good_at)[:-1]])
    twice = int(np.sum(n_bad_at * (2 * good_below + n_good_at)))
    return twice / (2 * good.size * bad.size)


def fpr_at_tpr(scores, labels, target_tpr: float = 0.95) -> tuple[float, float]:
    """False-positive rate at the largest threshold that reaches ``target_tpr``.

    Returns ``(fpr, threshold)``; no interpolation between ROC points.
    """
    if not 0.0 < target_tpr <= 1.0:
        raise ValidationError(f"target_tpr must lie in (0, 1], got {target_tpr}")
    good, bad = _split(scores, labels)
    desc = np.sort(bad)[::-1]
    n_bad = desc.size
    # Fewest bad samples k with k / n_bad >= target.
    k = next(k for k in range(1, n_bad + 1) if k / n_bad >= target_tpr)
    threshold = float(desc[k - 1])
    return float(np.count_nonzero(good >= threshold) / good.size), threshold


@dataclass(frozen=True)
class EvalReport:
    auroc: float
    fpr_at_95tpr: float
    threshold_used: float
    n_good: int
    n_bad: int

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(scores, labels, target_tpr: float = 0.95) -> EvalReport:
    good, bad = _split(scores, labels)
    fpr, thr = fpr_at_tpr(scores, labels, target_tpr)
    return EvalReport(auroc(scores, labels), fpr, thr, int(good.size), int(bad.size))


@dataclass(frozen=True)
class SeedAggregate:
    mean: float
    std: float
    per_seed: tuple[float, ...]

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"


def aggregate(per_seed) -> SeedAggregate:
    """Mean and population standard deviation over seeds."""
    v = np.asarray(per_seed, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInputError("nothing to aggregate")
    m = float(v.mean())
    m = min(max(m, float(v.min())), float(v.max()))
    return SeedAggregate(m, float(np.sqrt(np.mean((v - m) ** 2))), tuple(float(x) for x in v))


def report_json(report: EvalReport, **extra) -> str:
    return json.dumps({**extra, **report.to_dict()}, indent=2, sort_keys=True) + "\n"


def report_csv_row(method: str, seed: int, report: EvalReport) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow([method, seed, repr(report.auroc), repr(report.fpr_at_95tpr)])
    return buf.getvalue()
