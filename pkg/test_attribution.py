"""
Shapley attribution tests: closed-form models, axioms and expert integration.
"""

from dataclasses import replace

import numpy as np
import pytest

from colacare.attribution import (
    AttributionError,
    explain,
    mean_abs_importance,
    ranking,
    shapley_exact,
    shapley_sampled,
    top_features,
)
from colacare.ehr_data import FeatureSpec, PatientRecord, fit_statistics, generate_synthetic, prepare, select, split
from colacare.expert_models import ExpertConfig, train_expert


def _record(series, mask=None):
    series = np.asarray(series, dtype=float)
    mask = np.ones(series.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return PatientRecord("p", {}, series, mask, 0)


WEIGHTS = np.array([0.5, -2.0, 0.0, 1.0])


def linear_model(batch):
    return batch[:, -1, :] @ WEIGHTS


def interaction_model(batch):
    return batch[:, -1, 0] * batch[:, -1, 1]


def test_exact_values_of_additive_model():
    record = _record([[9.0, 9.0, 9.0, 9.0], [1.0, 2.0, 3.0, -1.0]])
    result = shapley_exact(linear_model, record)
    assert result.phi == pytest.approx(WEIGHTS * np.array([1.0, 2.0, 3.0, -1.0]))
    # dummy feature
    assert result.phi[2] == pytest.approx(0.0, abs=1e-12)
    assert result.baseline_value == 0.0
    assert result.efficiency_gap() < 1e-12


def test_interaction_is_split_symmetrically():
    record = _record([[2.0, 3.0, 5.0]])
    result = shapley_exact(interaction_model, record)
    assert result.phi == pytest.approx([3.0, 3.0, 0.0])


def test_sampled_values_are_efficient_and_close_to_exact():
    rng = np.random.default_rng(0)
    record = _record(rng.normal(size=(3, 6)))

    def model(batch):
        last = batch[:, -1, :]
        return np.tanh(last[:, 0] * last[:, 1] + last[:, 2]) + 0.3 * last[:, 3]

    exact = shapley_exact(model, record)
    sampled = shapley_sampled(model, record, n_permutations=400, seed=3)
    assert sampled.efficiency_gap() < 1e-9
    assert sampled.phi == pytest.approx(exact.phi, abs=0.1)
    again = shapley_sampled(model, record, n_permutations=400, seed=3)
    assert np.array_equal(sampled.phi, again.phi)


def test_explain_switches_method_by_feature_count():
    small = _record(np.ones((2, 4)))
    large = _record(np.ones((2, 12)))

    def model(batch):
        return batch[:, -1, :].sum(axis=1)

    assert explain(model, small).method == "exact"
    assert explain(model, large, n_permutations=20).method == "sampled"
    assert explain(model, large, method="exact").method == "exact"
    with pytest.raises(AttributionError):
        explain(model, small, method="kernel")


def test_exact_refuses_wide_records_and_sampler_needs_permutations():
    with pytest.raises(AttributionError):
        shapley_exact(linear_model, _record(np.ones((1, 15))))
    with pytest.raises(AttributionError):
        shapley_sampled(linear_model, _record(np.ones((1, 4))), n_permutations=5)


def test_specs_must_match_record_and_be_fitted():
    record = _record([[1.0, 2.0, 3.0, 4.0]])
    fitted = [FeatureSpec(n, population_mean=0.0, population_std=1.0) for n in "abcd"]
    assert explain(linear_model, record, fitted).efficiency_gap() < 1e-12
    with pytest.raises(AttributionError, match="3 feature specs"):
        shapley_exact(linear_model, record, fitted[:3])
    with pytest.raises(AttributionError, match="without train statistics: c"):
        shapley_sampled(linear_model, record, fitted[:2] + [FeatureSpec("c"), fitted[3]], n_permutations=10)


def test_top_features_rank_by_magnitude_with_index_ties():
    specs = [FeatureSpec(n) for n in ("a", "b", "c", "d")]
    record = _record([[1.0, 1.0, 1.0, 1.0], [2.0, -2.0, 2.0, 1.0]], mask=[[1, 1, 1, 1], [1, 1, 0, 1]])
    result = shapley_exact(lambda b: b[:, -1, :] @ np.array([1.0, 1.0, 0.5, 0.0]), record)
    ranked = top_features(result, specs, k=3, record=record)
    assert [f.name for f in ranked] == ["a", "b", "c"]
    # c's last visit is unobserved
    assert ranked[2].last_value == 1.0
    assert ranking(np.array([0.1, -0.3, 0.3])) == (1, 2, 0)
    with pytest.raises(AttributionError):
        top_features(result, specs, k=0)


def test_expert_attribution_is_efficient(experts, prepared):
    specs, records = prepared
    for expert in experts:
        result = explain(expert.value_function(records[0]), records[0], specs)
        assert result.method == "exact"
        assert result.efficiency_gap() < 1e-6
        assert result.actual_value == pytest.approx(expert.infer(records[0]).logit, abs=1e-9)


def test_value_function_sees_the_record_mask(experts, prepared):
    specs, records = prepared
    base = next(r for r in records if r.n_visits >= 2)
    mask = base.mask.copy()
    mask[0] = False  # first visit fully imputed
    record = replace(base, mask=mask)
    attn = next(e for e in experts if e.config.architecture == "attn_pool")
    value = attn.value_function(record)(record.series[None])[0]
    assert value == pytest.approx(attn.infer(record).logit, abs=1e-9)
    assert value != pytest.approx(attn.predict_proba(record.series[None])[0], abs=1e-12)


@pytest.mark.slow
def test_signal_features_lead_mean_importance():
    specs, raw = generate_synthetic(2000, 10, 8, seed=7)
    data_split = split(raw, (0.8, 0.15, 0.05), seed=42)
    fitted = fit_statistics(specs, raw, data_split.train)
    records = prepare(raw, fitted)
    model = train_expert(ExpertConfig(architecture="gru_last", lr=0.01, max_epochs=30, patience=8),
                         fitted, records, data_split)
    test = select(records, data_split.test)
    results = [explain(model.value_function(r), r, fitted) for r in test[:40]]
    top4 = set(ranking(mean_abs_importance(results))[:4])
    assert {0, 1, 2} <= top4
