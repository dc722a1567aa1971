"""
Fusion Module
Late fusion of expert hidden states and the consultation report embedding.

    ŷ = σ(tanh([h_1, ..., h_N, h_report] W1 + b1) W2 + b2)

Expert encoders stay frozen; only the fusion MLP is trained (AdamW, BCE,
early stopping on validation AUPRC). The expert ordering is part of the
checkpoint schema.

Author: ColaCare Research Team
"""

import json
import logging
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
from tqdm import tqdm

from .ehr_data import DatasetSplit, PatientRecord
from .evaluation import UndefinedMetricError, auprc
from .nn_core import (
    ParamStore,
    Tape,
    Tensor,
    TrainingError,
    backward,
    forward_linear,
    load_params,
    optimizer_step,
    save_params,
)
from .retrieval import Embedder, EmbeddingError, HashEmbedder

logger = logging.getLogger(__name__)

REPORT_MODES = ("report", "constant", "none")
MISSING_REPORT_TEXT = "No consultation report is available for this patient."


class FusionShapeError(ValueError):
    """Raised when a fusion sample does not match the fusion schema."""


@dataclass
class FusionConfig:
    """Configuration for the fusion network."""
    hidden_dim: int = 128
    lr: float = 0.001
    batch_size: int = 128
    max_epochs: int = 50
    patience: int = 10
    weight_decay: float = 0.01
    seed: int = 0
    report_mode: str = "report"  # report | constant | none

    def __post_init__(self):
        if self.hidden_dim <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("hidden_dim, batch_size and max_epochs must be positive")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.report_mode not in REPORT_MODES:
            raise ValueError(f"Unknown report_mode {self.report_mode}; choose from {REPORT_MODES}")


@dataclass
class FusionSample:
    patient_id: str
    expert_names: List[str]
    expert_hiddens: List[np.ndarray]
    report_embedding: np.ndarray
    label: int

    def concat(self) -> np.ndarray:
        return np.concatenate([np.ravel(h) for h in self.expert_hiddens] + [np.ravel(self.report_embedding)])


@dataclass
class FusionSchema:
    """Expert order, hidden sizes and report embedding size of a fusion network."""
    expert_names: List[str]
    expert_dims: List[int]
    report_dim: int

    @property
    def input_dim(self) -> int:
        return sum(self.expert_dims) + self.report_dim

    @classmethod
    def from_sample(cls, sample: FusionSample) -> "FusionSchema":
        return cls(
            expert_names=list(sample.expert_names),
            expert_dims=[int(np.size(h)) for h in sample.expert_hiddens],
            report_dim=int(np.size(sample.report_embedding)),
        )

    def check(self, sample: FusionSample, index: Optional[int] = None):
        where = f"sample #{index} ({sample.patient_id})" if index is not None else f"sample {sample.patient_id}"
        if list(sample.expert_names) != self.expert_names:
            raise FusionShapeError(f"{where}: expert order {sample.expert_names} != schema {self.expert_names}")
        dims = [int(np.size(h)) for h in sample.expert_hiddens]
        if dims != self.expert_dims:
            raise FusionShapeError(f"{where}: expert hidden sizes {dims} != schema {self.expert_dims}")
        if int(np.size(sample.report_embedding)) != self.report_dim:
            raise FusionShapeError(
                f"{where}: report embedding size {np.size(sample.report_embedding)} != schema {self.report_dim}"
            )


def embed_report(report_text: str, embedder: Optional[Embedder] = None) -> np.ndarray:
    """h_report: unit-norm embedding of the final report text."""
    if not report_text or not report_text.strip():
        raise EmbeddingError("Cannot embed an empty report")
    return (embedder or HashEmbedder()).embed([report_text])[0]


class FusionModel:
    """
    Concatenation MLP with one tanh hidden layer and a sigmoid output.

    The report rows of W1 are drawn after every other parameter, so one seed
    gives the same expert-side initialization with or without a report channel.
    """

    def __init__(self, config: FusionConfig, schema: FusionSchema, store: Optional[ParamStore] = None):
        self.config = config
        self.schema = schema
        self.history: List[Dict[str, float]] = []
        if store is None:
            store = self._init_params()
        self.store = store

    def _init_params(self) -> ParamStore:
        rng = np.random.default_rng(self.config.seed)
        store = ParamStore()
        e, r, h = sum(self.schema.expert_dims), self.schema.report_dim, self.config.hidden_dim
        bound = 1.0 / np.sqrt(e)
        expert_rows = rng.uniform(-bound, bound, size=(e, h))
        store.init_uniform("fusion.b1", (1, h), rng, fan_in=e)
        store.init_uniform("fusion.W2", (h, 1), rng, fan_in=h)
        store.init_uniform("fusion.b2", (1, 1), rng, fan_in=h)
        report_rows = rng.uniform(-bound, bound, size=(r, h))
        store.add("fusion.W1", np.vstack([expert_rows, report_rows]))
        return store

    def forward(self, tape: Tape, x: np.ndarray) -> Tensor:
        p = self.store.params
        hidden = tape.tanh(forward_linear(tape, Tensor(x), p["fusion.W1"], p["fusion.b1"]))
        return tape.sigmoid(forward_linear(tape, hidden, p["fusion.W2"], p["fusion.b2"]))

    def matrix(self, samples: Sequence[FusionSample]) -> np.ndarray:
        for i, sample in enumerate(samples):
            self.schema.check(sample, i)
        return np.vstack([s.concat() for s in samples])

    def predict(self, samples: Sequence[FusionSample]) -> np.ndarray:
        if not samples:
            return np.zeros(0)
        return self.forward(Tape(record=False), self.matrix(samples)).data[:, 0]

    def save(self, directory: str, name: str = "fusion"):
        os.makedirs(directory, exist_ok=True)
        save_params(self.store, os.path.join(directory, f"{name}.params.json"))
        with open(os.path.join(directory, f"{name}.schema.json"), "w") as f:
            json.dump({"config": asdict(self.config), "schema": asdict(self.schema), "history": self.history},
                      f, indent=2)

    @classmethod
    def load(cls, directory: str, name: str = "fusion") -> "FusionModel":
        with open(os.path.join(directory, f"{name}.schema.json"), "r") as f:
            sidecar = json.load(f)
        store = load_params(os.path.join(directory, f"{name}.params.json"))
        model = cls(FusionConfig(**sidecar["config"]), FusionSchema(**sidecar["schema"]), store=store)
        model.history = list(sidecar.get("history", []))
        return model


def predict_fusion(model: FusionModel, sample: FusionSample) -> float:
    """Deterministic probability in (0, 1) for one sample matching the schema."""
    return float(model.predict([sample])[0])


def _split_samples(samples: Sequence[FusionSample], ids: Sequence[str]) -> List[FusionSample]:
    by_id = {s.patient_id: s for s in samples}
    return [by_id[i] for i in ids if i in by_id]


def _val_auprc(model: FusionModel, samples: Sequence[FusionSample]) -> float:
    labels = np.array([s.label for s in samples])
    try:
        return auprc(labels, model.predict(samples))
    except UndefinedMetricError:
        return 0.0


def train_fusion(config: FusionConfig, samples: Sequence[FusionSample], data_split: DatasetSplit,
                 show_progress: bool = False) -> FusionModel:
    """
    Train the fusion MLP on the train part of ``data_split``.

    Every sample must share the schema of the first one; violations name the
    sample index. Both classes must be present in the train part.
    """
    if not samples:
        raise FusionShapeError("No fusion samples")
    schema = FusionSchema.from_sample(samples[0])
    for i, sample in enumerate(samples):
        schema.check(sample, i)

    train = _split_samples(samples, data_split.train)
    val = _split_samples(samples, data_split.val)
    labels = np.array([s.label for s in train], dtype=np.float64)
    if not train or labels.min() == labels.max():
        raise TrainingError("Fusion train split needs both classes")

    model = FusionModel(config, schema)
    x_train = model.matrix(train)
    rng = np.random.default_rng(config.seed + 1)
    best_auprc, best_params, stale = -1.0, model.store.snapshot(), 0
    logger.info(f"Training fusion network: input {schema.input_dim} -> {config.hidden_dim} on {len(train)} samples")

    for epoch in tqdm(range(1, config.max_epochs + 1), desc="fusion", disable=not show_progress):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(train), config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            loss = tape.bce(model.forward(tape, x_train[idx]), labels[idx])
            if not np.isfinite(loss.data[0, 0]):
                raise TrainingError(f"Non-finite fusion loss at epoch {epoch}")
            grads = backward(tape, loss, params=model.store.params)
            optimizer_step(model.store, grads, lr=config.lr, weight_decay=config.weight_decay)
            total += loss.data[0, 0] * len(idx)

        score = _val_auprc(model, val) if val else 0.0
        model.history.append({"epoch": epoch, "train_loss": total / len(train), "val_auprc": score})
        if score > best_auprc:
            best_auprc, best_params, stale = score, model.store.snapshot(), 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"Fusion early stop at epoch {epoch} (best val AUPRC {best_auprc:.4f})")
                break

    model.store.restore(best_params)
    return model


def build_fusion_samples(records: Sequence[PatientRecord], experts: Sequence, reports: Mapping[str, str],
                         embedder: Optional[Embedder] = None, report_mode: str = "report") -> List[FusionSample]:
    """
    Fusion inputs for ``records``: frozen expert hidden states plus the report embedding.

    ``reports`` maps patient id to final report text; a patient without one
    gets a fixed placeholder text. ``report_mode`` "constant" replaces every
    embedding with the same vector, "none" drops the report channel.
    """
    if report_mode not in REPORT_MODES:
        raise ValueError(f"Unknown report_mode {report_mode}")
    embedder = embedder or HashEmbedder()
    names = [e.name for e in experts]
    outputs = [e.predict_batch(records) for e in experts]
    constant = embed_report(MISSING_REPORT_TEXT, embedder)

    missing = [r.patient_id for r in records if r.patient_id not in reports]
    if missing and report_mode == "report":
        logger.warning(f"{len(missing)} patients have no report; using placeholder text")

    texts = [reports.get(r.patient_id) or MISSING_REPORT_TEXT for r in records]
    embeddings = embedder.embed(texts) if report_mode == "report" else None

    samples = []
    for i, record in enumerate(records):
        if report_mode == "report":
            report = embeddings[i]
        elif report_mode == "constant":
            report = constant
        else:
            report = np.zeros(0)
        samples.append(FusionSample(
            patient_id=record.patient_id,
            expert_names=names,
            expert_hiddens=[out[i].hidden for out in outputs],
            report_embedding=report,
            label=int(record.label),
        ))
    return samples
