"""
EHR Data Module
Defines, generates, loads, imputes and splits structured EHR time-series cohorts.

This module provides:
- Feature and patient record types
- Dataset JSON loading/saving with schema validation
- Forward-fill + population-mean imputation
- Train-split normalization statistics and z-normalization
- Stratified, seed-deterministic train/val/test splitting
- A synthetic cohort generator with a documented latent risk rule

Synthetic latent rule
---------------------
Every synthetic patient has T visits (2 <= T <= T_max). Features 0, 1, 2 are
the signal features and feature 3 is the trend feature. Each signal feature
has a latent level z ~ N(0, 0.8^2) plus per-visit noise N(0, 0.6^2), so its
last-visit latent value is standard normal. The trend feature follows
base + s * t / (T - 1) with a latent slope s ~ N(0, 1). The label is drawn as

    y ~ Bernoulli(sigmoid(LABEL_BIAS + Σ_k SIGNAL_WEIGHTS[k] * last_k + TREND_WEIGHT * s))

Latent values are mapped to clinical scales through each feature's
(mean, sd). Every cell is then hidden with probability 0.2.

Author: ColaCare Research Team
"""

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6

SIGNAL_FEATURES = (0, 1, 2)
TREND_FEATURE = 3
SIGNAL_WEIGHTS = (1.8, 1.5, -1.35)
TREND_WEIGHT = -1.2
LABEL_BIAS = -4.2
MISSING_RATE = 0.2

# name, unit, clinical mean, clinical sd
_SYNTHETIC_CATALOG = [
    ("lactate", "mmol/L", 2.0, 1.0),
    ("creatinine", "mg/dL", 1.2, 0.5),
    ("systolic_bp", "mmHg", 120.0, 18.0),
    ("oxygen_saturation", "%", 95.0, 2.5),
    ("heart_rate", "bpm", 85.0, 15.0),
    ("respiratory_rate", "breaths/min", 18.0, 4.0),
    ("temperature", "C", 37.0, 0.6),
    ("glucose", "mg/dL", 130.0, 35.0),
    ("white_blood_cells", "10^9/L", 9.0, 3.0),
    ("hemoglobin", "g/dL", 12.0, 1.8),
    ("platelets", "10^9/L", 230.0, 60.0),
    ("sodium", "mmol/L", 139.0, 4.0),
    ("potassium", "mmol/L", 4.2, 0.5),
    ("bicarbonate", "mmol/L", 24.0, 3.0),
    ("blood_urea_nitrogen", "mg/dL", 20.0, 8.0),
    ("bilirubin", "mg/dL", 1.0, 0.6),
    ("albumin", "g/dL", 3.5, 0.5),
    ("diastolic_bp", "mmHg", 70.0, 11.0),
    ("gcs_total", "points", 13.0, 2.0),
    ("ph", "", 7.38, 0.05),
]

_CONDITIONS = [
    "community-acquired pneumonia",
    "septic shock",
    "acute kidney injury",
    "congestive heart failure exacerbation",
    "chronic obstructive pulmonary disease exacerbation",
    "post-operative monitoring",
    "diabetic ketoacidosis",
    "gastrointestinal bleeding",
]


class DatasetSchemaError(ValueError):
    """Raised when a dataset file does not follow the documented schema."""


class DatasetValidationError(ValueError):
    """Raised when a record's dimensions or values are inconsistent."""


class SplitError(ValueError):
    """Raised when a cohort cannot be split as requested."""


class GeneratorParameterError(ValueError):
    """Raised for invalid synthetic generator sizes."""


@dataclass
class FeatureSpec:
    """One feature column of the T x F series."""
    name: str
    kind: str = "dynamic"  # static | dynamic
    unit: str = ""
    population_mean: Optional[float] = None
    population_std: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("static", "dynamic"):
            raise DatasetValidationError(f"Feature {self.name}: kind must be static or dynamic, got {self.kind}")

    @property
    def is_fitted(self) -> bool:
        return self.population_mean is not None and math.isfinite(self.population_mean)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "unit": self.unit,
            "population_mean": self.population_mean,
            "population_std": self.population_std,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureSpec":
        return cls(
            name=data["name"],
            kind=data.get("kind", "dynamic"),
            unit=data.get("unit", "") or "",
            population_mean=data.get("population_mean"),
            population_std=data.get("population_std"),
        )


@dataclass
class PatientRecord:
    """One patient: static info, T x F series with observation mask, binary label."""
    patient_id: str
    static_info: Dict[str, Any]
    series: np.ndarray
    mask: np.ndarray
    label: int

    def __post_init__(self):
        self.series = np.asarray(self.series, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def n_visits(self) -> int:
        return self.series.shape[0]

    @property
    def n_features(self) -> int:
        return self.series.shape[1]

    def validate(self, n_features: Optional[int] = None):
        if self.series.ndim != 2:
            raise DatasetValidationError(f"Patient {self.patient_id}: series must be T x F, got shape {self.series.shape}")
        if self.series.shape[0] < 1:
            raise DatasetValidationError(f"Patient {self.patient_id}: at least one visit required")
        if self.mask.shape != self.series.shape:
            raise DatasetValidationError(
                f"Patient {self.patient_id}: mask shape {self.mask.shape} != series shape {self.series.shape}"
            )
        if n_features is not None and self.series.shape[1] != n_features:
            raise DatasetValidationError(
                f"Patient {self.patient_id}: series has {self.series.shape[1]} features, expected {n_features}"
            )
        if self.label not in (0, 1):
            raise DatasetValidationError(f"Patient {self.patient_id}: label must be 0 or 1, got {self.label}")
        observed = self.series[self.mask]
        if not np.all(np.isfinite(observed)):
            raise DatasetValidationError(f"Patient {self.patient_id}: observed cells must be finite")

    def is_complete(self) -> bool:
        return bool(np.all(np.isfinite(self.series)))


@dataclass
class DatasetSplit:
    """Disjoint train/val/test patient id lists."""
    train: List[str]
    val: List[str]
    test: List[str]
    seed: int

    def to_dict(self) -> Dict[str, Any]:
        return {"train": self.train, "val": self.val, "test": self.test, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DatasetSplit":
        return cls(train=list(data["train"]), val=list(data["val"]), test=list(data["test"]), seed=int(data["seed"]))

    def part(self, name: str) -> List[str]:
        if name not in ("train", "val", "test"):
            raise SplitError(f"Unknown split part: {name}")
        return getattr(self, name)


# -- file IO --------------------------------------------------------------------------------

def _record_from_json(entry: Dict[str, Any], index: int, n_features: int) -> PatientRecord:
    missing = [key for key in ("id", "series", "mask", "label") if key not in entry]
    if missing:
        raise DatasetSchemaError(f"Patient entry #{index} ({entry.get('id', '?')}): missing keys {missing}")
    patient_id = str(entry["id"])
    rows = entry["series"]
    mask_rows = entry["mask"]
    if not isinstance(rows, list) or not isinstance(mask_rows, list):
        raise DatasetSchemaError(f"Patient {patient_id}: series and mask must be lists of rows")
    for t, row in enumerate(rows):
        if not isinstance(row, list) or len(row) != n_features:
            raise DatasetValidationError(
                f"Patient {patient_id}: series row {t} has {len(row) if isinstance(row, list) else '?'} values, expected {n_features}"
            )
    for t, row in enumerate(mask_rows):
        if not isinstance(row, list) or len(row) != n_features:
            raise DatasetValidationError(f"Patient {patient_id}: mask row {t} does not have {n_features} values")
    if len(rows) != len(mask_rows):
        raise DatasetValidationError(f"Patient {patient_id}: {len(rows)} series rows but {len(mask_rows)} mask rows")
    series = np.array([[np.nan if v is None else float(v) for v in row] for row in rows], dtype=np.float64)
    mask = np.array(mask_rows, dtype=bool)
    if series.size == 0:
        series = series.reshape(0, n_features)
        mask = mask.reshape(0, n_features)
    label = entry["label"]
    if label not in (0, 1):
        raise DatasetSchemaError(f"Patient {patient_id}: label must be 0 or 1, got {label!r}")
    record = PatientRecord(
        patient_id=patient_id,
        static_info=dict(entry.get("static", {})),
        series=series,
        mask=mask,
        label=int(label),
    )
    # a cell marked observed must carry a value
    if np.any(mask & np.isnan(series)):
        raise DatasetValidationError(f"Patient {patient_id}: observed cell with null value")
    record.validate(n_features)
    return record


def load_dataset(path: str) -> Tuple[List[FeatureSpec], List[PatientRecord]]:
    """
    Load a dataset JSON file.

    Args:
        path: File with top-level {"features": [...], "patients": [...]}

    Returns:
        Tuple[List[FeatureSpec], List[PatientRecord]]: validated specs and records
    """
    with open(path, "r") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise DatasetSchemaError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(payload, dict) or "features" not in payload or "patients" not in payload:
        raise DatasetSchemaError(f"{path}: expected an object with 'features' and 'patients'")

    specs = []
    for i, entry in enumerate(payload["features"]):
        if not isinstance(entry, dict) or "name" not in entry:
            raise DatasetSchemaError(f"{path}: feature #{i} has no name")
        specs.append(FeatureSpec.from_dict(entry))
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise DatasetValidationError(f"{path}: duplicate feature names")

    records = []
    seen = set()
    for i, entry in enumerate(payload["patients"]):
        if not isinstance(entry, dict):
            raise DatasetSchemaError(f"{path}: patient entry #{i} is not an object")
        record = _record_from_json(entry, i, len(specs))
        if record.patient_id in seen:
            raise DatasetValidationError(f"{path}: duplicate patient id {record.patient_id}")
        seen.add(record.patient_id)
        records.append(record)

    logger.info(f"Loaded {len(records)} patients with {len(specs)} features from {path}")
    return specs, records


def _cell(value: float, observed: bool):
    if not observed or not math.isfinite(value):
        return None
    return float(value)


def save_dataset(path: str, specs: Sequence[FeatureSpec], records: Sequence[PatientRecord]):
    """Write specs and records in the dataset JSON schema; missing cells become null."""
    payload = {
        "features": [s.to_dict() for s in specs],
        "patients": [
            {
                "id": r.patient_id,
                "static": r.static_info,
                "series": [[_cell(v, m) for v, m in zip(row, mrow)] for row, mrow in zip(r.series, r.mask)],
                "mask": [[bool(m) for m in mrow] for mrow in r.mask],
                "label": int(r.label),
            }
            for r in records
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
    logger.info(f"Saved {len(records)} patients to {path}")


# -- preprocessing ---------------------------------------------------------------------------

def fit_statistics(specs: Sequence[FeatureSpec], records: Sequence[PatientRecord],
                   train_ids: Sequence[str]) -> List[FeatureSpec]:
    """Population mean/std per feature over observed train cells (std floored at 1e-6)."""
    wanted = set(train_ids)
    train = [r for r in records if r.patient_id in wanted]
    if not train:
        raise SplitError("Cannot fit statistics on an empty train split")
    fitted = []
    for j, spec in enumerate(specs):
        values = np.concatenate([r.series[r.mask[:, j], j] for r in train])
        values = values[np.isfinite(values)]
        if values.size == 0:
            mean, std = 0.0, 1.0
            logger.warning(f"Feature {spec.name} never observed in train split; using mean 0, std 1")
        else:
            mean = float(values.mean())
            std = float(max(values.std(), STD_FLOOR))
        fitted.append(replace(spec, population_mean=mean, population_std=std))
    return fitted


def impute(record: PatientRecord, specs: Sequence[FeatureSpec]) -> PatientRecord:
    """
    Forward-fill each feature along time, then fill remaining gaps with the
    population mean. The mask is left unchanged.
    """
    if len(specs) != record.n_features:
        raise DatasetValidationError(f"Patient {record.patient_id}: {record.n_features} features, {len(specs)} specs")
    series = record.series.copy()
    series[~record.mask] = np.nan
    for j, spec in enumerate(specs):
        if not spec.is_fitted:
            raise DatasetValidationError(f"Feature {spec.name} has no population mean; fit statistics first")
        column = series[:, j]
        last = np.nan
        for t in range(column.shape[0]):
            if np.isnan(column[t]):
                column[t] = last
            else:
                last = column[t]
        column[np.isnan(column)] = spec.population_mean
    return replace(record, series=series, mask=record.mask.copy())


def normalize(record: PatientRecord, specs: Sequence[FeatureSpec]) -> PatientRecord:
    """Z-normalize a (typically imputed) record with the fitted train statistics."""
    means = np.array([s.population_mean for s in specs], dtype=np.float64)
    stds = np.array([max(s.population_std or 1.0, STD_FLOOR) for s in specs], dtype=np.float64)
    return replace(record, series=(record.series - means) / stds, mask=record.mask.copy())


def prepare(records: Sequence[PatientRecord], specs: Sequence[FeatureSpec]) -> List[PatientRecord]:
    """Impute then normalize every record."""
    return [normalize(impute(r, specs), specs) for r in records]


# -- splitting -------------------------------------------------------------------------------

def _largest_remainder(total: int, ratios: Sequence[float]) -> List[int]:
    raw = [total * r for r in ratios]
    counts = [int(math.floor(x)) for x in raw]
    remainder = total - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def split(records: Sequence[PatientRecord], ratios: Tuple[float, float, float], seed: int) -> DatasetSplit:
    """
    Stratified, deterministic train/val/test split.

    Split sizes come from largest-remainder rounding of ratio * n; positives are
    apportioned the same way inside those sizes.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise SplitError(f"Ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise SplitError(f"Ratios must sum to 1, got {sum(ratios)}")
    n = len(records)
    if n < 10:
        raise SplitError(f"At least 10 patients required, got {n}")
    positives = [r.patient_id for r in records if r.label == 1]
    negatives = [r.patient_id for r in records if r.label == 0]
    if not positives or not negatives:
        raise SplitError("Both outcome classes must be present to stratify")

    sizes = _largest_remainder(n, ratios)
    pos_counts = _largest_remainder(len(positives), ratios)
    pos_counts = [min(p, s) for p, s in zip(pos_counts, sizes)]
    # hand back any positives the size clamp removed
    leftover = len(positives) - sum(pos_counts)
    for i in range(3):
        room = sizes[i] - pos_counts[i]
        take = min(room, leftover)
        pos_counts[i] += take
        leftover -= take
    neg_counts = [s - p for s, p in zip(sizes, pos_counts)]

    rng = np.random.default_rng(seed)
    pos_order = [positives[i] for i in rng.permutation(len(positives))]
    neg_order = [negatives[i] for i in rng.permutation(len(negatives))]

    parts = []
    pos_start = neg_start = 0
    for k in range(3):
        part = pos_order[pos_start:pos_start + pos_counts[k]] + neg_order[neg_start:neg_start + neg_counts[k]]
        pos_start += pos_counts[k]
        neg_start += neg_counts[k]
        parts.append(sorted(part))
    logger.info(f"Split {n} patients into {len(parts[0])}/{len(parts[1])}/{len(parts[2])} (seed={seed})")
    return DatasetSplit(train=parts[0], val=parts[1], test=parts[2], seed=seed)


def split_statistics(records: Sequence[PatientRecord], data_split: DatasetSplit) -> List[Dict[str, Any]]:
    """Sample counts, cohort shares and positive counts/shares per split."""
    labels = {r.patient_id: r.label for r in records}
    total = len(records)
    rows = []
    for name in ("train", "val", "test"):
        ids = data_split.part(name)
        n_pos = sum(labels[i] for i in ids)
        rows.append({
            "split": name,
            "samples": len(ids),
            "samples_pct": 100.0 * len(ids) / total if total else 0.0,
            "positives": n_pos,
            "positives_pct": 100.0 * n_pos / len(ids) if ids else 0.0,
        })
    return rows


def select(records: Sequence[PatientRecord], ids: Sequence[str]) -> List[PatientRecord]:
    """Records for ``ids`` in the order of ``ids``."""
    by_id = {r.patient_id: r for r in records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DatasetValidationError(f"Unknown patient ids: {missing[:5]}")
    return [by_id[i] for i in ids]


# -- synthetic cohort ------------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    """Arguments of the synthetic cohort generator."""
    n_patients: int = 2000
    n_features: int = 10
    max_visits: int = 8
    seed: int = 7


def _feature_catalog(n_features: int) -> List[Tuple[str, str, float, float]]:
    catalog = list(_SYNTHETIC_CATALOG)
    k = 0
    while len(catalog) < n_features:
        catalog.append((f"marker_{k:02d}", "", 0.0, 1.0))
        k += 1
    return catalog[:n_features]


def generate_synthetic(n_patients: int, n_features: int, max_visits: int,
                       seed: int) -> Tuple[List[FeatureSpec], List[PatientRecord]]:
    """
    Generate a synthetic cohort following the latent rule documented at module level.

    Args:
        n_patients: Number of patients (>= 10)
        n_features: Number of series features F (>= 4)
        max_visits: Maximum visits per patient T_max (>= 2)
        seed: Generator seed; identical arguments give identical cohorts

    Returns:
        Tuple[List[FeatureSpec], List[PatientRecord]]: unfitted specs and raw records
    """
    if n_patients < 10:
        raise GeneratorParameterError(f"n_patients must be >= 10, got {n_patients}")
    if n_features < 4:
        raise GeneratorParameterError(f"F must be >= 4, got {n_features}")
    if max_visits < 2:
        raise GeneratorParameterError(f"T_max must be >= 2, got {max_visits}")

    rng = np.random.default_rng(seed)
    catalog = _feature_catalog(n_features)
    specs = [FeatureSpec(name=name, kind="dynamic", unit=unit) for name, unit, _, _ in catalog]
    means = np.array([c[2] for c in catalog])
    sds = np.array([c[3] for c in catalog])

    records = []
    for i in range(n_patients):
        n_visits = int(rng.integers(2, max_visits + 1))
        latent = np.zeros((n_visits, n_features))
        # signal features: persistent level plus visit noise
        levels = rng.normal(0.0, 0.8, size=n_features)
        latent[:, :] = levels + rng.normal(0.0, 0.6, size=(n_visits, n_features))
        # trend feature: linear drift over the stay
        slope = rng.normal(0.0, 1.0)
        base = rng.normal(0.0, 0.5)
        steps = np.arange(n_visits) / (n_visits - 1)
        latent[:, TREND_FEATURE] = base + slope * steps + rng.normal(0.0, 0.15, size=n_visits)
        # remaining features: random walks unrelated to the outcome
        for j in range(TREND_FEATURE + 1, n_features):
            latent[:, j] = np.cumsum(rng.normal(0.0, 0.5, size=n_visits)) + levels[j]

        last = latent[-1, list(SIGNAL_FEATURES)]
        risk_logit = LABEL_BIAS + float(np.dot(SIGNAL_WEIGHTS, last)) + TREND_WEIGHT * slope
        risk = 1.0 / (1.0 + math.exp(-risk_logit))
        label = int(rng.random() < risk)

        series = means + sds * latent
        mask = rng.random(size=series.shape) >= MISSING_RATE
        series = np.where(mask, series, np.nan)

        age = int(np.clip(rng.normal(65, 14), 18, 98))
        static_info = {
            "sex": "female" if rng.random() < 0.45 else "male",
            "age": age,
            "condition": _CONDITIONS[int(rng.integers(len(_CONDITIONS)))],
        }
        records.append(PatientRecord(
            patient_id=f"P{i:05d}",
            static_info=static_info,
            series=series,
            mask=mask,
            label=label,
        ))

    positive_rate = sum(r.label for r in records) / n_patients
    logger.info(f"Generated {n_patients} synthetic patients (F={n_features}, positive rate {positive_rate:.3f})")
    return specs, records
