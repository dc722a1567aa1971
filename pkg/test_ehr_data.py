"""
Dataset loading, imputation, normalization, splitting and synthetic cohort tests.
"""

import json

import numpy as np
import pytest

from colacare.ehr_data import (
    SIGNAL_FEATURES,
    DatasetSchemaError,
    DatasetValidationError,
    FeatureSpec,
    GeneratorParameterError,
    PatientRecord,
    SplitError,
    fit_statistics,
    generate_synthetic,
    impute,
    load_dataset,
    normalize,
    save_dataset,
    select,
    split,
    split_statistics,
)


def _record(pid, series, mask, label=0):
    return PatientRecord(patient_id=pid, static_info={}, series=np.array(series, dtype=float),
                         mask=np.array(mask, dtype=bool), label=label)


def test_impute_forward_fills_then_uses_population_mean():
    specs = [FeatureSpec("a", population_mean=5.0, population_std=1.0),
             FeatureSpec("b", population_mean=-1.0, population_std=2.0)]
    nan = np.nan
    record = _record("p1", [[nan, 2.0], [3.0, nan], [nan, nan]], [[0, 1], [1, 0], [0, 0]])
    filled = impute(record, specs)
    assert filled.series.tolist() == [[5.0, 2.0], [3.0, 2.0], [3.0, 2.0]]
    assert np.array_equal(filled.mask, record.mask)


def test_impute_requires_fitted_statistics():
    record = _record("p1", [[1.0]], [[1]])
    with pytest.raises(DatasetValidationError):
        impute(record, [FeatureSpec("a")])


def test_normalize_uses_train_statistics_with_std_floor():
    specs = [FeatureSpec("a", population_mean=10.0, population_std=2.0),
             FeatureSpec("b", population_mean=1.0, population_std=0.0)]
    record = _record("p1", [[12.0, 1.0]], [[1, 1]])
    assert normalize(record, specs).series.tolist() == [[1.0, 0.0]]


def test_fit_statistics_only_sees_train_cells():
    records = [
        _record("train", [[1.0], [3.0]], [[1], [1]]),
        _record("test", [[100.0], [100.0]], [[1], [1]]),
    ]
    fitted = fit_statistics([FeatureSpec("a")], records, ["train"])
    assert fitted[0].population_mean == pytest.approx(2.0)
    assert fitted[0].population_std == pytest.approx(1.0)
    assert fitted[0].is_fitted


def test_split_is_disjoint_stratified_and_deterministic():
    _, records = generate_synthetic(1000, 5, 4, seed=2)
    first = split(records, (0.8, 0.15, 0.05), seed=9)
    second = split(records, (0.8, 0.15, 0.05), seed=9)
    assert first == second
    ids = first.train + first.val + first.test
    assert len(ids) == len(set(ids)) == len(records)
    assert (len(first.train), len(first.val), len(first.test)) == (800, 150, 50)

    rate = np.mean([r.label for r in records])
    for row in split_statistics(records, first):
        assert abs(row["positives_pct"] / 100.0 - rate) <= 0.03


def test_split_needs_both_classes_and_enough_patients():
    records = [_record(f"p{i}", [[1.0]], [[1]], label=0) for i in range(20)]
    with pytest.raises(SplitError):
        split(records, (0.8, 0.1, 0.1), seed=0)
    with pytest.raises(SplitError):
        split(records[:5], (0.8, 0.1, 0.1), seed=0)


def test_select_keeps_requested_order(cohort):
    _, records = cohort
    ids = [records[5].patient_id, records[1].patient_id]
    assert [r.patient_id for r in select(records, ids)] == ids
    with pytest.raises(DatasetValidationError):
        select(records, ["nobody"])


def test_synthetic_cohort_is_reproducible_and_plausible():
    specs_a, records_a = generate_synthetic(400, 8, 6, seed=7)
    specs_b, records_b = generate_synthetic(400, 8, 6, seed=7)
    assert [s.name for s in specs_a] == [s.name for s in specs_b]
    assert all(np.array_equal(a.mask, b.mask) and a.label == b.label for a, b in zip(records_a, records_b))

    assert len(specs_a) == 8
    assert all(2 <= r.n_visits <= 6 for r in records_a)
    assert 0.05 <= np.mean([r.label for r in records_a]) <= 0.25
    missing = 1.0 - np.mean(np.concatenate([r.mask.ravel() for r in records_a]))
    assert 0.15 <= missing <= 0.25
    assert {"sex", "age", "condition"} <= set(records_a[0].static_info)


def test_signal_features_separate_the_classes():
    _, records = generate_synthetic(2000, 6, 6, seed=4)
    # lactate is the first signal feature with a positive weight
    j = SIGNAL_FEATURES[0]
    pos = [r.series[r.mask[:, j], j][-1] for r in records if r.label == 1 and r.mask[:, j].any()]
    neg = [r.series[r.mask[:, j], j][-1] for r in records if r.label == 0 and r.mask[:, j].any()]
    assert np.mean(pos) > np.mean(neg)


def test_generator_rejects_tiny_arguments():
    with pytest.raises(GeneratorParameterError):
        generate_synthetic(5, 6, 4, seed=0)
    with pytest.raises(GeneratorParameterError):
        generate_synthetic(100, 3, 4, seed=0)


def test_dataset_file_round_trip_keeps_missingness(tmp_path, cohort):
    specs, records = cohort
    path = str(tmp_path / "dataset.json")
    save_dataset(path, specs, records[:20])
    loaded_specs, loaded = load_dataset(path)
    assert [s.name for s in loaded_specs] == [s.name for s in specs]
    for original, restored in zip(records[:20], loaded):
        assert np.array_equal(original.mask, restored.mask)
        assert np.allclose(original.series[original.mask], restored.series[restored.mask])


def test_load_dataset_reports_bad_rows(tmp_path):
    payload = {
        "features": [{"name": "a"}, {"name": "b"}],
        "patients": [{"id": "x", "series": [[1.0]], "mask": [[True]], "label": 0}],
    }
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(DatasetValidationError, match="x"):
        load_dataset(str(path))

    path.write_text(json.dumps({"patients": []}))
    with pytest.raises(DatasetSchemaError):
        load_dataset(str(path))
