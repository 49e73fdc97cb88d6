"""Stratified splitting and the discrimination / confusion-matrix metric suite."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from typing import Optional, Sequence

import numpy as np

NA = "NA"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(labels: Sequence[int], test_fraction: float = 0.3, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class sends round(count * fraction) to test."""
    y = np.asarray(labels)
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size < 2:
            raise ValueError(f"class {cls} has fewer than 2 members")
        members = rng.permutation(members)
        n_test = _round_half_up(members.size * test_fraction)
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMatrix:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.shape != y.shape:
        raise ValueError("probs and labels differ in length")
    pred = p >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


@dataclass
class MetricsReport:
    """Rates are fractions in [0, 1]; ``None`` marks an undefined value."""

    auc: Optional[float] = None
    auc_ci_low: Optional[float] = None
    auc_ci_high: Optional[float] = None
    sensitivity: Optional[float] = None
    specificity: Optional[float] = None
    ppv: Optional[float] = None
    npv: Optional[float] = None
    f1: Optional[float] = None
    accuracy: Optional[float] = None
    threshold: Optional[float] = None

    def to_dict(self) -> dict:
        return {f.name: NA if getattr(self, f.name) is None else getattr(self, f.name) for f in fields(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, obj: dict) -> "MetricsReport":
        return cls(**{k: None if v == NA else v for k, v in obj.items()})

    def to_table(self, label: str = "Model") -> str:
        """Plain-text table with the AUC, Sens., Spec., PPV, NPV, F1, Acc. columns in percent."""

        def pct(x):
            return NA if x is None else f"{100.0 * x:.2f}"

        auc_cell = pct(self.auc)
        if self.auc is not None and self.auc_ci_low is not None and self.auc_ci_high is not None:
            auc_cell += f" ({pct(self.auc_ci_low)}-{pct(self.auc_ci_high)})"
        heads = ["Model", "AUC (95% CI)", "Sens.(%)", "Spec.(%)", "PPV(%)", "NPV(%)", "F1(%)", "Acc.(%)"]
        cells = [label, auc_cell] + [
            pct(v) for v in (self.sensitivity, self.specificity, self.ppv, self.npv, self.f1, self.accuracy)
        ]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line = lambda row: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))  # noqa: E731
        return "\n".join([line(heads), line(cells)]) + "\n"


def compute_metrics(cm: ConfusionMatrix) -> MetricsReport:
    sens = _ratio(cm.tp, cm.tp + cm.fn)
    spec = _ratio(cm.tn, cm.tn + cm.fp)
    ppv = _ratio(cm.tp, cm.tp + cm.fp)
    npv = _ratio(cm.tn, cm.tn + cm.fn)
    f1 = None
    if ppv is not None and sens is not None:
        f1 = _ratio(2.0 * ppv * sens, ppv + sens)
    acc = _ratio(cm.tp + cm.tn, cm.total)
    return MetricsReport(sensitivity=sens, specificity=spec, ppv=ppv, npv=npv, f1=f1, accuracy=acc)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values
    starts = np.flatnonzero(np.concatenate([[True], xs[1:] != xs[:-1]]))
    ends = np.concatenate([starts[1:], [xs.size]])
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks starts+1 .. ends
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC via the rank sum, ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes")
    r = _average_ranks(s)
    u = r[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_auc_ci(
    scores: Sequence[float],
    labels: Sequence[int],
    n_boot: int = 2000,
    seed: int = 0,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile bootstrap interval; each replicate draws from its own (seed, b) stream."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if len(set(y.tolist())) < 2:
        raise ValueError("AUC needs both classes")
    if n_boot < 1:
        raise ValueError("n_boot must be >= 1")
    n = s.size
    reps = np.empty(n_boot)
    for b in range(n_boot):
        rng = np.random.default_rng([seed, b])
        while True:
            idx = rng.integers(0, n, size=n)
            yb = y[idx]
            if 0 < yb.sum() < n:
                break
        reps[b] = auc(s[idx], yb)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    return float(lo), float(hi)


def youden_threshold(probs: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold among the observed scores maximizing sensitivity + specificity - 1."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    best_t, best_j = 0.5, -math.inf
    for t in np.unique(p):
        m = compute_metrics(confusion(p, y, t))
        if m.sensitivity is None or m.specificity is None:
            continue
        j = m.sensitivity + m.specificity - 1.0
        if j > best_j:
            best_t, best_j = float(t), j
    return best_t


def evaluate(
    probs: Sequence[float],
    labels: Sequence[int],
    threshold: float = 0.5,
    n_boot: int = 2000,
    seed: int = 0,
) -> MetricsReport:
    """Full report; AUC and its interval are left undefined for single-class input."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    report = compute_metrics(confusion(p, y, threshold))
    report.threshold = float(threshold)
    if 0 < int(np.sum(y == 1)) < y.size:
        report.auc = auc(p, y)
        if n_boot > 0:
            lo, hi = bootstrap_auc_ci(p, y, n_boot, seed)
            # percentile intervals need not cover the point estimate
            report.auc_ci_low = min(lo, report.auc)
            report.auc_ci_high = max(hi, report.auc)
    return report
