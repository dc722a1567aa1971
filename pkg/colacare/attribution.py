"""
Attribution Module
Per-feature Shapley importances of an expert's prediction.

The value of a coalition S is the model probability with every feature
outside S replaced by its normalized baseline (0, the train mean) at all time
steps. Exact enumeration covers F <= 14; larger F uses antithetic
permutation sampling.

Author: ColaCare Research Team
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .ehr_data import FeatureSpec, PatientRecord

logger = logging.getLogger(__name__)

MAX_EXACT_FEATURES = 14
MIN_PERMUTATIONS = 10

# batch of (n, T, F) inputs -> n probabilities
ValueModel = Callable[[np.ndarray], np.ndarray]


class AttributionError(ValueError):
    """Raised for attribution requests outside the supported range."""


@dataclass
class AttributionResult:
    phi: np.ndarray
    baseline_value: float
    actual_value: float
    method: str  # exact | sampled
    n_permutations: int = 0
    seed: Optional[int] = None

    def efficiency_gap(self) -> float:
        return float(abs(self.phi.sum() - (self.actual_value - self.baseline_value)))

    def to_dict(self):
        return {
            "phi": [float(v) for v in self.phi],
            "baseline_value": self.baseline_value,
            "actual_value": self.actual_value,
            "method": self.method,
            "n_permutations": self.n_permutations,
            "seed": self.seed,
        }


@dataclass
class RankedFeature:
    name: str
    phi: float
    last_value: Optional[float]
    index: int


def _coalition_inputs(series: np.ndarray, keep: np.ndarray, baseline: np.ndarray) -> np.ndarray:
    """Stack one masked copy of ``series`` per coalition row of ``keep`` (n, F)."""
    return np.where(keep[:, None, :], series[None, :, :], baseline[None, None, :])


def _baseline(specs: Optional[Sequence[FeatureSpec]], n_features: int) -> np.ndarray:
    """
    Normalized baseline (zeros, the train mean). Given ``specs`` must cover
    every column and carry fitted train statistics.
    """
    if specs is not None:
        if len(specs) != n_features:
            raise AttributionError(f"{len(specs)} feature specs for a record with {n_features} features")
        unfitted = [s.name for s in specs if not s.is_fitted]
        if unfitted:
            raise AttributionError(f"Feature specs without train statistics: {', '.join(unfitted)}")
    return np.zeros(n_features)


def _evaluate(model: ValueModel, series: np.ndarray, keep: np.ndarray, baseline: np.ndarray,
              chunk: int = 4096) -> np.ndarray:
    values = []
    for start in range(0, keep.shape[0], chunk):
        values.append(np.asarray(model(_coalition_inputs(series, keep[start:start + chunk], baseline)), dtype=np.float64))
    return np.concatenate(values)


def shapley_exact(model: ValueModel, record: PatientRecord,
                  specs: Optional[Sequence[FeatureSpec]] = None) -> AttributionResult:
    """
    Exact Shapley values by enumerating all 2^F coalitions.

    phi_i = Σ_{S ⊆ N minus i} |S|! (F - |S| - 1)! / F! * (v(S ∪ i) - v(S))
    """
    series = np.asarray(record.series, dtype=np.float64)
    n_features = series.shape[1]
    if n_features > MAX_EXACT_FEATURES:
        raise AttributionError(
            f"Exact Shapley supports F <= {MAX_EXACT_FEATURES} (got {n_features}); use shapley_sampled instead"
        )
    baseline = _baseline(specs, n_features)
    codes = np.arange(2 ** n_features)
    keep = ((codes[:, None] >> np.arange(n_features)[None, :]) & 1).astype(bool)
    values = _evaluate(model, series, keep, baseline)

    sizes = keep.sum(axis=1)
    weights_by_size = np.array([
        math.factorial(s) * math.factorial(n_features - s - 1) / math.factorial(n_features)
        if s < n_features else 0.0
        for s in range(n_features + 1)
    ])
    phi = np.zeros(n_features)
    for i in range(n_features):
        bit = 1 << i
        without = codes[(codes & bit) == 0]
        phi[i] = np.sum(weights_by_size[sizes[without]] * (values[without | bit] - values[without]))

    return AttributionResult(
        phi=phi,
        baseline_value=float(values[0]),
        actual_value=float(values[-1]),
        method="exact",
    )


def shapley_sampled(model: ValueModel, record: PatientRecord, specs: Optional[Sequence[FeatureSpec]] = None,
                    n_permutations: int = 200, seed: int = 0) -> AttributionResult:
    """
    Antithetic permutation sampling: every sampled permutation is evaluated
    together with its reverse, giving 2 * n_permutations marginal-contribution
    chains. Each chain telescopes, so efficiency holds exactly.
    """
    if n_permutations < MIN_PERMUTATIONS:
        raise AttributionError(f"n_permutations must be >= {MIN_PERMUTATIONS}, got {n_permutations}")
    series = np.asarray(record.series, dtype=np.float64)
    n_features = series.shape[1]
    baseline = _baseline(specs, n_features)
    rng = np.random.default_rng(seed)

    orders = []
    for _ in range(n_permutations):
        perm = rng.permutation(n_features)
        orders.append(perm)
        orders.append(perm[::-1])

    # prefix coalitions of every chain: (chains * (F + 1), F)
    keep = np.zeros((len(orders), n_features + 1, n_features), dtype=bool)
    for c, order in enumerate(orders):
        for k in range(1, n_features + 1):
            keep[c, k] = keep[c, k - 1]
            keep[c, k, order[k - 1]] = True
    values = _evaluate(model, series, keep.reshape(-1, n_features), baseline).reshape(len(orders), n_features + 1)

    phi = np.zeros(n_features)
    for c, order in enumerate(orders):
        phi[order] += np.diff(values[c])
    phi /= len(orders)

    return AttributionResult(
        phi=phi,
        baseline_value=float(values[0, 0]),
        actual_value=float(values[0, -1]),
        method="sampled",
        n_permutations=n_permutations,
        seed=seed,
    )


def explain(model: ValueModel, record: PatientRecord, specs: Optional[Sequence[FeatureSpec]] = None,
            method: str = "auto", n_permutations: int = 200, seed: int = 0,
            exact_limit: int = 10) -> AttributionResult:
    """Dispatch to exact enumeration or sampling; ``auto`` is exact up to ``exact_limit`` features."""
    n_features = record.series.shape[1]
    if method == "exact" or (method == "auto" and n_features <= exact_limit):
        return shapley_exact(model, record, specs)
    if method in ("sampled", "auto"):
        return shapley_sampled(model, record, specs, n_permutations=n_permutations, seed=seed)
    raise AttributionError(f"Unknown attribution method: {method}")


def last_observed(record: PatientRecord, index: int) -> Optional[float]:
    observed = np.flatnonzero(record.mask[:, index])
    if observed.size == 0:
        return None
    return float(record.series[observed[-1], index])


def top_features(result: AttributionResult, specs: Sequence[FeatureSpec], k: int,
                 record: Optional[PatientRecord] = None) -> List[RankedFeature]:
    """
    Features ranked by |phi| descending, ties by feature index ascending.

    ``record`` (raw scale, with mask) supplies the last observed value.
    """
    if k < 1:
        raise AttributionError(f"k must be >= 1, got {k}")
    order = sorted(range(len(result.phi)), key=lambda i: (-abs(result.phi[i]), i))
    ranked = []
    for i in order[:k]:
        ranked.append(RankedFeature(
            name=specs[i].name,
            phi=float(result.phi[i]),
            last_value=last_observed(record, i) if record is not None else None,
            index=i,
        ))
    return ranked


def mean_abs_importance(results: Sequence[AttributionResult]) -> np.ndarray:
    return np.mean([np.abs(r.phi) for r in results], axis=0)


def ranking(phi: np.ndarray) -> Tuple[int, ...]:
    return tuple(sorted(range(len(phi)), key=lambda i: (-abs(phi[i]), i)))
