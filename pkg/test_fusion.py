"""
Fusion network tests: schema checks, report channel modes, training and persistence.
"""

from dataclasses import replace

import numpy as np
import pytest

from colacare.ehr_data import DatasetSplit, select
from colacare.evaluation import auroc
from colacare.fusion import (
    FusionConfig,
    FusionModel,
    FusionSample,
    FusionSchema,
    FusionShapeError,
    build_fusion_samples,
    embed_report,
    predict_fusion,
    train_fusion,
)
from colacare.nn_core import Tape, TrainingError, backward, numerical_gradient
from colacare.retrieval import EmbeddingError, HashEmbedder

SMALL = dict(hidden_dim=8, lr=0.01, max_epochs=4, patience=2, batch_size=64)


def _reports(records, informative=True):
    return {r.patient_id: ("The panel sees high risk of in-hospital mortality." if informative and r.label
                           else "The panel sees low risk and a stable course.")
            for r in records}


@pytest.fixture(scope="module")
def samples(experts, prepared):
    _, records = prepared
    return build_fusion_samples(records, experts, _reports(records), HashEmbedder(32))


def test_samples_follow_expert_order_and_sizes(samples, experts):
    sample = samples[0]
    assert sample.expert_names == [e.name for e in experts]
    assert [h.shape for h in sample.expert_hiddens] == [(e.config.hidden_dim,) for e in experts]
    assert sample.report_embedding.shape == (32,)
    assert sample.concat().shape == (3 * 8 + 32,)


def test_report_modes(experts, prepared):
    _, records = prepared
    subset = records[:5]
    embedder = HashEmbedder(32)
    constant = build_fusion_samples(subset, experts, _reports(subset), embedder, report_mode="constant")
    assert all(np.array_equal(s.report_embedding, constant[0].report_embedding) for s in constant)
    none = build_fusion_samples(subset, experts, {}, embedder, report_mode="none")
    assert all(s.report_embedding.size == 0 for s in none)
    with pytest.raises(ValueError):
        build_fusion_samples(subset, experts, {}, embedder, report_mode="image")
    with pytest.raises(ValueError):
        FusionConfig(report_mode="image")


def test_missing_reports_use_placeholder_text(experts, prepared):
    _, records = prepared
    subset = records[:2]
    embedder = HashEmbedder(32)
    with_placeholder = build_fusion_samples(subset, experts, {}, embedder)
    constant = build_fusion_samples(subset, experts, {}, embedder, report_mode="constant")
    assert np.allclose(with_placeholder[0].report_embedding, constant[0].report_embedding)


def test_empty_report_cannot_be_embedded():
    with pytest.raises(EmbeddingError):
        embed_report("   ")


def test_trained_model_predicts_probabilities(samples, data_split, tmp_path):
    model = train_fusion(FusionConfig(**SMALL), samples, data_split)
    scores = model.predict(samples[:20])
    assert np.all((scores > 0.0) & (scores < 1.0))
    assert predict_fusion(model, samples[0]) == pytest.approx(scores[0])
    assert 1 <= len(model.history) <= SMALL["max_epochs"]

    model.save(str(tmp_path))
    loaded = FusionModel.load(str(tmp_path))
    assert loaded.schema == model.schema
    assert np.allclose(loaded.predict(samples[:20]), scores)


def test_schema_violations_name_the_sample(samples, data_split):
    bad = FusionSample(samples[1].patient_id, list(reversed(samples[1].expert_names)),
                       samples[1].expert_hiddens, samples[1].report_embedding, samples[1].label)
    with pytest.raises(FusionShapeError, match="#1"):
        train_fusion(FusionConfig(**SMALL), [samples[0], bad] + samples[2:], data_split)

    model = train_fusion(FusionConfig(**SMALL), samples, data_split)
    short = FusionSample("X", samples[0].expert_names, samples[0].expert_hiddens, np.zeros(5), 0)
    with pytest.raises(FusionShapeError):
        predict_fusion(model, short)
    with pytest.raises(FusionShapeError):
        train_fusion(FusionConfig(**SMALL), [], data_split)


def test_single_class_training_split_is_rejected(samples):
    negatives = [s.patient_id for s in samples if s.label == 0]
    one_class = DatasetSplit(train=negatives[:50], val=negatives[50:60], test=[], seed=0)
    with pytest.raises(TrainingError):
        train_fusion(FusionConfig(**SMALL), samples, one_class)


def test_training_is_deterministic(samples, data_split):
    first = train_fusion(FusionConfig(seed=3, **SMALL), samples, data_split)
    second = train_fusion(FusionConfig(seed=3, **SMALL), samples, data_split)
    assert np.array_equal(first.predict(samples), second.predict(samples))


def test_expert_side_initialization_ignores_report_channel(samples):
    schema = FusionSchema.from_sample(samples[0])
    with_report = FusionModel(FusionConfig(seed=5, **SMALL), schema).store
    without = FusionModel(FusionConfig(seed=5, **SMALL), replace(schema, report_dim=0)).store
    e = sum(schema.expert_dims)
    assert with_report["fusion.W1"].shape == (schema.input_dim, SMALL["hidden_dim"])
    assert np.array_equal(with_report["fusion.W1"].data[:e], without["fusion.W1"].data)
    for name in ("fusion.b1", "fusion.W2", "fusion.b2"):
        assert np.array_equal(with_report[name].data, without[name].data)


def test_fusion_gradients_match_finite_differences(samples):
    model = FusionModel(FusionConfig(seed=2, **SMALL), FusionSchema.from_sample(samples[0]))
    x = model.matrix(samples[:16])
    labels = np.array([s.label for s in samples[:16]], dtype=np.float64)

    def loss_value():
        tape = Tape(record=False)
        return float(tape.bce(model.forward(tape, x), labels).data[0, 0])

    tape = Tape()
    loss = tape.bce(model.forward(tape, x), labels)
    grads = backward(tape, loss, params=model.store.params)
    rng = np.random.default_rng(0)
    for name in model.store.names():
        tensor = model.store[name]
        for flat in rng.choice(tensor.data.size, size=min(20, tensor.data.size), replace=False):
            index = np.unravel_index(flat, tensor.shape)
            numeric = numerical_gradient(loss_value, tensor, index)
            assert grads[name][index] == pytest.approx(numeric, rel=1e-4, abs=1e-7), (name, index)


def _noisy_reports(records, informative_rate, seed):
    rng = np.random.default_rng(seed)
    reports = {}
    for r in records:
        says_high = bool(r.label) if rng.random() < informative_rate else not r.label
        reports[r.patient_id] = ("The panel sees high risk of in-hospital mortality." if says_high
                                 else "The panel sees low risk and a stable course.")
    return reports


@pytest.mark.slow
def test_informative_reports_beat_best_expert_and_constant_reports_do_not(trained_cohort):
    _, records, data_split, experts = trained_cohort
    test = select(records, data_split.test)
    labels = [r.label for r in test]
    best_expert = max(auroc(labels, e.predict_scores(test)) for e in experts)

    config = FusionConfig(hidden_dim=16, lr=0.01, max_epochs=40, patience=10, batch_size=64)
    reports = _noisy_reports(records, informative_rate=0.9, seed=0)
    embedder = HashEmbedder(32)
    fused = {}
    for mode in ("report", "constant", "none"):
        built = build_fusion_samples(records, experts, reports, embedder, report_mode=mode)
        model = train_fusion(config, built, data_split)
        by_id = {s.patient_id: s for s in built}
        fused[mode] = auroc(labels, model.predict([by_id[r.patient_id] for r in test]))

    assert fused["report"] >= best_expert + 0.01
    assert abs(fused["constant"] - fused["none"]) <= 0.02
