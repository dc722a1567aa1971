"""
Evaluation Module
Binary-classification metrics and bootstrap reporting.

All metrics follow a "higher is better" reading:
- AUROC via the Mann-Whitney statistic (ties count one half)
- AUPRC as non-interpolated average precision over a descending-score sweep
- min(+P, Se) as the best, over decision thresholds, of min(precision, recall)

Bootstrap summaries report mean and std over resamples, multiplied by 100.

Author: ColaCare Research Team
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, Mapping

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

METRICS = ("auprc", "auroc", "min_p_se")
METRIC_LABELS = {"auprc": "AUPRC", "auroc": "AUROC", "min_p_se": "min(+P, Se)"}


class UndefinedMetricError(ValueError):
    """Raised when a metric is undefined for the given labels."""


class BootstrapError(RuntimeError):
    """Raised when no bootstrap resample contains both classes."""


@dataclass
class MetricResult:
    auroc: float
    auprc: float
    min_p_se: float
    n_samples: int
    n_positive: int


@dataclass
class BootstrapSummary:
    """Per-metric mean and std over resamples, values x100."""
    mean: Dict[str, float]
    std: Dict[str, float]
    n_resamples: int
    n_skipped: int
    seed: int

    def cell(self, metric: str) -> str:
        return f"{self.mean[metric]:.2f} ± {self.std[metric]:.2f}"

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {m: {"mean": round(self.mean[m], 6), "std": round(self.std[m], 6)} for m in METRICS}


@dataclass
class EvaluationConfig:
    n_bootstrap: int = 100
    seed: int = 42


def _as_arrays(labels, scores):
    y = np.asarray(labels, dtype=np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"labels ({y.size}) and scores ({s.size}) differ in length")
    return y, s


def auroc(labels, scores) -> float:
    """P(score+ > score-) + 0.5 P(tie), computed from average ranks."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(y: np.ndarray, s: np.ndarray):
    """True/false positive counts at each distinct threshold, descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    distinct = np.flatnonzero(np.diff(s_sorted)) if s_sorted.size > 1 else np.array([], dtype=int)
    ends = np.concatenate([distinct, [s_sorted.size - 1]])
    tp = np.cumsum(y_sorted)[ends]
    fp = (ends + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64)


def auprc(labels, scores) -> float:
    """Average precision: Σ (R_k - R_{k-1}) P_k with tied scores grouped."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUPRC needs at least one positive")
    tp, fp = _threshold_counts(y, s)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * precision))


def min_p_se(labels, scores) -> float:
    """Max over thresholds τ (distinct scores) of min(precision, recall)."""
    y, s = _as_arrays(labels, scores)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("min(+P, Se) needs at least one positive")
    tp, fp = _threshold_counts(y, s)
    predicted = tp + fp
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = tp / n_pos
    return float(np.max(np.minimum(precision, recall)))


def evaluate(labels, scores) -> MetricResult:
    y, s = _as_arrays(labels, scores)
    return MetricResult(
        auroc=auroc(y, s),
        auprc=auprc(y, s),
        min_p_se=min_p_se(y, s),
        n_samples=int(y.size),
        n_positive=int(y.sum()),
    )


def bootstrap(labels, scores, n_resamples: int = 100, seed: int = 42, max_attempts: int = 10) -> BootstrapSummary:
    """
    Resample the test set with replacement ``n_resamples`` times.

    Resample i uses its own generator seeded with ``seed ^ i``. A resample
    missing a class is redrawn up to ``max_attempts`` times, then skipped.
    """
    if n_resamples < 2:
        raise ValueError(f"n_resamples must be >= 2, got {n_resamples}")
    y, s = _as_arrays(labels, scores)
    n = y.size
    values = {m: [] for m in METRICS}
    skipped = 0
    for i in range(n_resamples):
        rng = np.random.default_rng(seed ^ i)
        for _ in range(max_attempts):
            idx = rng.integers(0, n, size=n)
            ys = y[idx]
            if 0 < ys.sum() < n:
                break
        else:
            skipped += 1
            continue
        result = evaluate(ys, s[idx])
        for m in METRICS:
            values[m].append(getattr(result, m))

    if skipped == n_resamples:
        raise BootstrapError(f"All {n_resamples} resamples lacked a class")
    if skipped:
        logger.warning(f"Skipped {skipped}/{n_resamples} degenerate bootstrap resamples")
    return BootstrapSummary(
        mean={m: float(np.mean(values[m]) * 100.0) for m in METRICS},
        std={m: float(np.std(values[m]) * 100.0) for m in METRICS},
        n_resamples=n_resamples - skipped,
        n_skipped=skipped,
        seed=seed,
    )


def results_table(summaries: Mapping[str, BootstrapSummary]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """method -> metric -> {mean, std}, values x100."""
    return {method: summary.to_dict() for method, summary in summaries.items()}


def format_table(summaries: Mapping[str, BootstrapSummary]) -> str:
    """Plain-text method x metric table with 'mean ± std' cells."""
    header = ["Methods"] + [METRIC_LABELS[m] for m in METRICS]
    rows = [[method] + [summary.cell(m) for m in METRICS] for method, summary in summaries.items()]
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = [" | ".join(str(c).ljust(w) for c, w in zip(header, widths))]
    lines.append("-+-".join("-" * w for w in widths))
    lines.extend(" | ".join(str(c).ljust(w) for c, w in zip(r, widths)) for r in rows)
    return "\n".join(lines)


def save_results(path: str, summaries: Mapping[str, BootstrapSummary]):
    with open(path, "w") as f:
        json.dump(results_table(summaries), f, indent=2, sort_keys=True)
    logger.info(f"Results written to {path}")
