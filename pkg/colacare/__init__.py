"""
ColaCare Module
Mortality prediction from longitudinal EHR with expert models and an LLM consultation

This module provides:
- Synthetic and imported EHR cohorts with a stratified split
- Three recurrent expert models trained with a small autodiff core
- Shapley feature importances for expert predictions
- A chunked, hashed-embedding retrieval index over guideline text
- DoctorAgent / MetaAgent consultation through a scripted or HTTP chat gateway
- A fusion network over expert hidden states and the final report
- Bootstrap evaluation (AUROC, AUPRC, min(+P, Se)) and a run-directory CLI

Author: ColaCare Research Team
License: MIT
"""

from .attribution import AttributionResult, explain, top_features
from .config import ConfigError, RunConfig
from .consultation import (
    ConsultationConfig,
    ConsultationStats,
    ConsultationTranscript,
    aggregate_stats,
    run_cohort,
    run_consultation,
)
from .ehr_data import (
    DatasetSplit,
    FeatureSpec,
    PatientRecord,
    fit_statistics,
    generate_synthetic,
    load_dataset,
    prepare,
    split,
)
from .evaluation import auprc, auroc, bootstrap, evaluate, min_p_se
from .expert_models import ExpertConfig, ExpertModel, ExpertOutput, train_expert
from .fusion import FusionConfig, FusionModel, build_fusion_samples, predict_fusion, train_fusion
from .llm_gateway import ChatRequest, ChatResponse, CostLedger, ProviderConfig, ScriptedProvider, make_provider
from .retrieval import CorpusIndex, HashEmbedder, build_index, chunk_text, retrieve

__version__ = "1.0.0"
__author__ = "ColaCare Research Team"

__all__ = [
    'AttributionResult',
    'ChatRequest',
    'ChatResponse',
    'ConfigError',
    'ConsultationConfig',
    'ConsultationStats',
    'ConsultationTranscript',
    'CorpusIndex',
    'CostLedger',
    'DatasetSplit',
    'ExpertConfig',
    'ExpertModel',
    'ExpertOutput',
    'FeatureSpec',
    'FusionConfig',
    'FusionModel',
    'HashEmbedder',
    'PatientRecord',
    'ProviderConfig',
    'RunConfig',
    'ScriptedProvider',
    'aggregate_stats',
    'auprc',
    'auroc',
    'bootstrap',
    'build_fusion_samples',
    'build_index',
    'chunk_text',
    'evaluate',
    'explain',
    'fit_statistics',
    'generate_synthetic',
    'load_dataset',
    'make_provider',
    'min_p_se',
    'predict_fusion',
    'prepare',
    'retrieve',
    'run_cohort',
    'run_consultation',
    'split',
    'top_features',
    'train_expert',
    'train_fusion',
]
