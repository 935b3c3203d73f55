"""Evaluation statistics: ROC/AUC, operating-point rates, F2 threshold
selection, paired DeLong tests, inter-rater kappa, and multi-seed aggregation.

AUC is computed two independent ways on every call (midrank pair counting
and trapezoidal integration of the ROC polyline) and the call fails loudly
if they disagree, so a regression in either route cannot pass silently.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfc
from scipy.stats import rankdata

from .errors import ClassError, DataError, LabelError, LaminetError, PairingError, ShapeError


@dataclass(frozen=True)
class ScoredSet:
    """Per-case classifier scores with binary truth labels.

    Scores are any real numbers with "higher means more positive"; in this
    package they are predicted probabilities.  Ids are optional and only
    used for pairing checks between classifiers.
    """

    scores: np.ndarray
    labels: np.ndarray
    scan_ids: tuple[str, ...] | None = None
    patient_ids: tuple[str, ...] | None = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        labels = np.asarray(self.labels)
        if scores.ndim != 1 or labels.shape != scores.shape:
            raise ShapeError(f"scores {scores.shape} and labels {labels.shape} must be parallel 1D")
        if not np.all((labels == 0) | (labels == 1)):
            raise LabelError("labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))
        for name in ("scan_ids", "patient_ids"):
            ids = getattr(self, name)
            if ids is not None and len(ids) != scores.size:
                raise ShapeError(f"{name} length {len(ids)} != {scores.size}")

    def __len__(self):
        return self.scores.size

    def require_both_classes(self) -> tuple[int, int]:
        pos = int(self.labels.sum())
        neg = len(self) - pos
        if pos == 0 or neg == 0:
            raise ClassError(f"need both classes, got {pos} positives and {neg} negatives")
        return pos, neg


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Rates:
    sensitivity: float
    specificity: float
    precision: float
    f1: float
    fbeta: float
    beta: float
    undefined: tuple[str, ...] = ()


# ---------------------------------------------------------------------------
# ROC and AUC


def roc_points(s: ScoredSet) -> list[tuple[float, float]]:
    """(FPR, TPR) polyline from the all-negative to the all-positive corner.

    One point per distinct threshold (predicted positive means score >=
    threshold), walked from the highest score down.
    """
    pos, neg = s.require_both_classes()
    order = np.argsort(-s.scores, kind="mergesort")
    scores = s.scores[order]
    labels = s.labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = len(s)
    while i < n:
        j = i
        while j < n and scores[j] == scores[i]:
            j += 1
        tp += int(labels[i:j].sum())
        fp += (j - i) - int(labels[i:j].sum())
        points.append((fp / neg, tp / pos))
        i = j
    return points


def _trapezoid_area(points: list[tuple[float, float]]) -> float:
    terms = []
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        terms.append((x1 - x0) * (y0 + y1) / 2.0)
    return math.fsum(terms)


def auc(s: ScoredSet) -> float:
    """Probability a random positive outscores a random negative (ties 0.5)."""
    pos, neg = s.require_both_classes()
    ranks = rankdata(s.scores, method="average")
    value = (math.fsum(ranks[s.labels == 1]) - pos * (pos + 1) / 2.0) / (pos * neg)
    check = _trapezoid_area(roc_points(s))
    if abs(value - check) > 1e-12:
        raise LaminetError(f"AUC cross-check failed: pair-count {value!r} vs trapezoid {check!r}")
    return value


# ---------------------------------------------------------------------------
# Operating points


def confusion_at(s: ScoredSet, threshold: float) -> ConfusionCounts:
    pred = s.scores >= threshold
    truth = s.labels == 1
    return ConfusionCounts(tp=int(np.sum(pred & truth)), fp=int(np.sum(pred & ~truth)),
                           tn=int(np.sum(~pred & ~truth)), fn=int(np.sum(~pred & truth)))


def _safe_div(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def rates(c: ConfusionCounts, beta: float = 2.0) -> Rates:
    """Sensitivity/specificity/precision and F scores; 0 + flag when undefined."""
    undefined: list[str] = []
    sens = _safe_div(c.tp, c.tp + c.fn, "sensitivity", undefined)
    spec = _safe_div(c.tn, c.tn + c.fp, "specificity", undefined)
    prec = _safe_div(c.tp, c.tp + c.fp, "precision", undefined)
    f1 = _safe_div(2.0 * prec * sens, prec + sens, "f1", undefined)
    b2 = beta * beta
    fbeta = _safe_div((1.0 + b2) * prec * sens, b2 * prec + sens, "fbeta", undefined)
    return Rates(sens, spec, prec, f1, fbeta, beta, tuple(undefined))


def select_threshold_f2(s: ScoredSet) -> float:
    """Threshold maximizing F2 over all distinct scores plus a +inf sentinel.

    Ties go to the larger threshold (the more conservative operating point).
    The sentinel predicts nothing positive, which scores F2=0, so it is only
    returned when every candidate scores 0.
    """
    s.require_both_classes()
    candidates = sorted(set(s.scores.tolist()) | {math.inf})
    best_t = math.inf
    best_f2 = -1.0
    for t in candidates:
        f2 = rates(confusion_at(s, t)).fbeta
        if f2 > best_f2 or (f2 == best_f2 and t > best_t):
            best_f2, best_t = f2, t
    return best_t


# ---------------------------------------------------------------------------
# Paired DeLong comparison


@dataclass(frozen=True)
class DeLongComponents:
    auc_a: float
    auc_b: float
    v10: np.ndarray  # (n_pos, 2) per-positive structural components
    v01: np.ndarray  # (n_neg, 2) per-negative structural components
    s10: np.ndarray  # (2, 2) covariance of v10 columns
    s01: np.ndarray  # (2, 2) covariance of v01 columns
    delta: float
    var: float
    z: float
    p_value: float


def _psi_matrix(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    pos = scores[labels == 1][:, None]
    neg = scores[labels == 0][None, :]
    return np.where(pos > neg, 1.0, np.where(pos == neg, 0.5, 0.0))


def delong_paired(a: ScoredSet, b: ScoredSet) -> DeLongComponents:
    """Two-sided test of equal AUC for two classifiers on the same cases."""
    if not np.array_equal(a.labels, b.labels) or len(a) != len(b):
        raise PairingError("paired comparison needs identical cases and labels")
    if a.scan_ids is not None and b.scan_ids is not None and a.scan_ids != b.scan_ids:
        raise PairingError("paired comparison needs identical scan id lists")
    pos, neg = a.require_both_classes()
    if pos < 2 or neg < 2:
        raise ClassError("paired AUC variance needs at least two cases per class")
    psi_a = _psi_matrix(a.scores, a.labels)
    psi_b = _psi_matrix(b.scores, b.labels)
    v10 = np.stack([psi_a.mean(axis=1), psi_b.mean(axis=1)], axis=1)
    v01 = np.stack([psi_a.mean(axis=0), psi_b.mean(axis=0)], axis=1)
    auc_a, auc_b = float(psi_a.mean()), float(psi_b.mean())
    s10 = np.cov(v10.T, ddof=1)
    s01 = np.cov(v01.T, ddof=1)
    var = float((s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / pos
                + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / neg)
    delta = auc_a - auc_b
    if var <= 0:
        z = 0.0 if delta == 0 else math.copysign(math.inf, delta)
        p = 1.0 if delta == 0 else 0.0
    else:
        z = delta / math.sqrt(var)
        p = float(erfc(abs(z) / math.sqrt(2.0)))
    return DeLongComponents(auc_a, auc_b, v10, v01, s10, s01, delta, var, z, p)


# ---------------------------------------------------------------------------
# Inter-rater agreement


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p_o: float
    p_e: float
    degenerate: bool = False
    pairwise: tuple[float, ...] | None = None


def cohen_kappa(r1, r2) -> KappaResult:
    r1 = np.asarray(r1)
    r2 = np.asarray(r2)
    if r1.shape != r2.shape or r1.ndim != 1:
        raise PairingError(f"rater lengths differ: {r1.shape} vs {r2.shape}")
    if r1.size == 0:
        raise DataError("empty rater lists")
    n = int(r1.size)
    agree = int(np.sum(r1 == r2))
    cats = np.unique(np.concatenate([r1, r2]))
    chance = sum(int(np.sum(r1 == c)) * int(np.sum(r2 == c)) for c in cats)
    # Integer-count form of (p_o - p_e) / (1 - p_e): a single rounding per
    # ratio, so hand-checkable tables come out exact.
    p_o = agree / n
    p_e = chance / (n * n)
    if chance == n * n:
        # Both raters constant and identical: agreement is vacuous.
        return KappaResult(kappa=0.0, p_o=p_o, p_e=p_e, degenerate=True)
    return KappaResult(kappa=(n * agree - chance) / (n * n - chance), p_o=p_o, p_e=p_e)


def light_kappa(raters: list) -> KappaResult:
    if len(raters) < 2:
        raise DataError("Light's kappa needs at least two raters")
    pairwise = []
    degenerate = False
    p_os, p_es = [], []
    for i in range(len(raters)):
        for j in range(i + 1, len(raters)):
            k = cohen_kappa(raters[i], raters[j])
            pairwise.append(k.kappa)
            p_os.append(k.p_o)
            p_es.append(k.p_e)
            degenerate = degenerate or k.degenerate
    return KappaResult(kappa=float(np.mean(pairwise)), p_o=float(np.mean(p_os)),
                       p_e=float(np.mean(p_es)), degenerate=degenerate,
                       pairwise=tuple(pairwise))


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class EvalReport:
    auc: float
    sensitivity: float
    specificity: float
    f1: float
    threshold: float
    roc: tuple[tuple[float, float], ...] = ()
    seed: int | None = None
    per_seed: tuple["EvalReport", ...] = ()
    std: dict[str, float] | None = None

    def to_dict(self) -> dict:
        d = {"auc": self.auc, "sensitivity": self.sensitivity,
             "specificity": self.specificity, "f1": self.f1,
             "threshold": self.threshold, "roc": [list(p) for p in self.roc]}
        if self.seed is not None:
            d["seed"] = self.seed
        if self.per_seed:
            d["per_seed"] = [r.to_dict() for r in self.per_seed]
        if self.std is not None:
            d["std"] = dict(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(auc=d["auc"], sensitivity=d["sensitivity"],
                   specificity=d["specificity"], f1=d["f1"],
                   threshold=d["threshold"],
                   roc=tuple((p[0], p[1]) for p in d.get("roc", [])),
                   seed=d.get("seed"),
                   per_seed=tuple(cls.from_dict(r) for r in d.get("per_seed", [])),
                   std=d.get("std"))


def evaluate(s: ScoredSet, threshold: float | None = None,
             seed: int | None = None) -> EvalReport:
    """Full report at a threshold (default: the F2-optimal one for this set)."""
    if threshold is None:
        threshold = select_threshold_f2(s)
    r = rates(confusion_at(s, threshold))
    return EvalReport(auc=auc(s), sensitivity=r.sensitivity, specificity=r.specificity,
                      f1=r.f1, threshold=float(threshold),
                      roc=tuple(roc_points(s)), seed=seed)


def aggregate_runs(reports: list[EvalReport]) -> EvalReport:
    """Mean and population std of the headline metrics over per-seed runs."""
    if not reports:
        raise DataError("no reports to aggregate")
    fields_ = ["auc", "sensitivity", "specificity", "f1", "threshold"]
    values = {f: np.array([getattr(r, f) for r in reports], dtype=np.float64) for f in fields_}
    means = {f: float(v.mean()) for f, v in values.items()}
    stds = {f: float(v.std()) for f, v in values.items()}  # population (n divisor)
    return EvalReport(auc=means["auc"], sensitivity=means["sensitivity"],
                      specificity=means["specificity"], f1=means["f1"],
                      threshold=means["threshold"], per_seed=tuple(reports), std=stds)


def format_metric(mean: float, std: float) -> str:
    return f"{mean:.4f} (±{std:.4f})"


def write_roc_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in points:
            writer.writerow([repr(float(fpr)), repr(float(tpr))])


def read_roc_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["fpr", "tpr"]:
            raise DataError(f"unexpected ROC csv header: {header}")
        return [(float(a), float(b)) for a, b in reader]
