"""
Shared pytest fixtures: synthetic cohorts, their splits and trained experts.
"""

import os
import sys

import numpy as np
import pytest

# Add the project root to Python path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from colacare.ehr_data import fit_statistics, generate_synthetic, prepare, split
from colacare.expert_models import ExpertConfig, train_expert
from colacare.retrieval import HashEmbedder, build_index

SMALL_COHORT = dict(n_patients=300, n_features=6, max_visits=5, seed=11)

GUIDELINE_DOCS = [
    {"id": "lac", "title": "Lactate", "text": "Elevated lactate reflects tissue hypoperfusion and predicts mortality in sepsis. " * 6},
    {"id": "cre", "title": "Creatinine", "text": "Rising creatinine indicates acute kidney injury with higher in-hospital mortality. " * 6},
    {"id": "sbp", "title": "Blood pressure", "text": "Systolic blood pressure below 90 mmHg defines hypotension and septic shock. " * 6},
    {"id": "spo", "title": "Oxygen", "text": "Falling oxygen saturation signals respiratory failure requiring escalation. " * 6},
]


@pytest.fixture(scope="session")
def cohort():
    """(raw specs, raw records) of a small synthetic cohort."""
    return generate_synthetic(**SMALL_COHORT)


@pytest.fixture(scope="session")
def data_split(cohort):
    _, records = cohort
    return split(records, (0.6, 0.2, 0.2), seed=3)


@pytest.fixture(scope="session")
def prepared(cohort, data_split):
    """(fitted specs, imputed + normalized records)."""
    specs, records = cohort
    fitted = fit_statistics(specs, records, data_split.train)
    return fitted, prepare(records, fitted)


@pytest.fixture(scope="session")
def experts(prepared, data_split):
    """One briefly trained expert per architecture."""
    specs, records = prepared
    models = []
    for seed, architecture in enumerate(("gru_last", "attn_pool", "recalib_gate")):
        config = ExpertConfig(architecture=architecture, hidden_dim=8, lr=0.01, max_epochs=3, patience=2,
                              batch_size=64, seed=seed)
        models.append(train_expert(config, specs, records, data_split))
    return models


@pytest.fixture(scope="session")
def trained_cohort():
    """(fitted specs, records, split, experts) of a 1000-patient cohort with well-trained experts; slow tests only."""
    specs, raw = generate_synthetic(1000, 8, 6, seed=7)
    data_split = split(raw, (0.7, 0.15, 0.15), seed=42)
    fitted = fit_statistics(specs, raw, data_split.train)
    records = prepare(raw, fitted)
    models = [
        train_expert(ExpertConfig(architecture=architecture, hidden_dim=16, lr=0.01, max_epochs=15, patience=5,
                                  seed=seed), fitted, records, data_split)
        for seed, architecture in enumerate(("gru_last", "attn_pool", "recalib_gate"))
    ]
    return fitted, records, data_split, models


@pytest.fixture(scope="session")
def guideline_index():
    return build_index(GUIDELINE_DOCS, HashEmbedder(64), chunk_size=120, overlap=30)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
