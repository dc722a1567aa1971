"""
Expert Models Module
Lightweight EHR expert architectures producing a hidden state and a risk logit.

Architectures:
- gru_last: GRU over visits, hidden state = final GRU state
- attn_pool: GRU states pooled by softmax attention over time; visits with no
  observed cell are excluded from attention
- recalib_gate: per-feature sigmoid gate computed from feature-wise summary
  statistics rescales the inputs before the GRU

All architectures end in one linear + sigmoid head. Records of different
lengths are batched by padding; a padded step leaves the GRU state unchanged,
so batched outputs equal per-record unrolling.

Author: ColaCare Research Team
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .ehr_data import DatasetSplit, FeatureSpec, PatientRecord, select
from .evaluation import UndefinedMetricError, auprc, auroc
from .nn_core import (
    MASK_NEG,
    ParamStore,
    Tape,
    Tensor,
    TrainingError,
    backward,
    forward_attention_pool,
    forward_gate,
    forward_gru_cell,
    forward_linear,
    load_params,
    optimizer_step,
    save_params,
)

logger = logging.getLogger(__name__)

ARCHITECTURES = ("gru_last", "attn_pool", "recalib_gate")
LR_GRID = (0.01, 0.001, 0.0001)
HIDDEN_GRID = (64, 128)


class InferenceError(ValueError):
    """Raised when a record does not fit the expert it is fed to."""


@dataclass
class ExpertConfig:
    """Configuration for one expert model."""
    architecture: str = "gru_last"
    hidden_dim: int = 64
    lr: float = 0.001
    max_epochs: int = 50
    patience: int = 10
    batch_size: int = 128
    weight_decay: float = 0.01
    seed: int = 0
    name: Optional[str] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"Unknown architecture {self.architecture}; choose from {ARCHITECTURES}")
        if self.hidden_dim <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("hidden_dim, batch_size and max_epochs must be positive")
        if not 0 <= self.patience < self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.name is None:
            self.name = self.architecture

    def to_dict(self):
        return asdict(self)


@dataclass
class ExpertOutput:
    """h_EHR, post-sigmoid logit z and feature importances α."""
    hidden: np.ndarray
    logit: float
    importances: Optional[np.ndarray] = None
    gate: Optional[np.ndarray] = None
    attention: Optional[np.ndarray] = None


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_auprc: float
    val_auroc: float
    improved: bool


@dataclass
class Batch:
    """Padded batch: x (B, T, F), observed mask (B, T, F), active steps (B, T)."""
    x: np.ndarray
    observed: np.ndarray
    active: np.ndarray
    labels: np.ndarray


def make_batch(records: Sequence[PatientRecord], n_features: int) -> Batch:
    """Pad records to a common length; raises InferenceError on feature mismatch."""
    for i, r in enumerate(records):
        if r.n_features != n_features:
            raise InferenceError(
                f"Record #{i} ({r.patient_id}) has {r.n_features} features, expert expects {n_features}"
            )
        if not r.is_complete():
            raise InferenceError(f"Record #{i} ({r.patient_id}) has missing cells; impute first")
    batch_size = len(records)
    t_max = max(r.n_visits for r in records)
    x = np.zeros((batch_size, t_max, n_features))
    observed = np.zeros((batch_size, t_max, n_features), dtype=bool)
    active = np.zeros((batch_size, t_max))
    for i, r in enumerate(records):
        x[i, :r.n_visits] = r.series
        observed[i, :r.n_visits] = r.mask
        active[i, :r.n_visits] = 1.0
    labels = np.array([r.label for r in records], dtype=np.float64)
    return Batch(x=x, observed=observed, active=active, labels=labels)


class ExpertModel:
    """
    One trained (or trainable) expert.

    Parameter creation order is GRU, head, then architecture extras, so two
    architectures built with the same seed share identical GRU and head weights.
    """

    def __init__(self, config: ExpertConfig, specs: Sequence[FeatureSpec],
                 store: Optional[ParamStore] = None):
        self.config = config
        self.specs = list(specs)
        self.n_features = len(self.specs)
        self.history: List[EpochLog] = []
        self.store = store if store is not None else self._init_params()

    @property
    def name(self) -> str:
        return self.config.name

    def _init_params(self) -> ParamStore:
        rng = np.random.default_rng(self.config.seed)
        store = ParamStore()
        f, h = self.n_features, self.config.hidden_dim
        for gate in ("z", "r", "n"):
            store.init_uniform(f"gru.W{gate}", (f, h), rng, fan_in=f)
            store.init_uniform(f"gru.U{gate}", (h, h), rng, fan_in=h)
            store.init_uniform(f"gru.b{gate}", (1, h), rng, fan_in=h)
        store.init_uniform("head.W", (h, 1), rng, fan_in=h)
        store.init_uniform("head.b", (1, 1), rng, fan_in=h)
        if self.config.architecture == "attn_pool":
            store.init_uniform("attn.w", (h, 1), rng, fan_in=h)
            store.init_uniform("attn.b", (1, 1), rng, fan_in=h)
        elif self.config.architecture == "recalib_gate":
            squeeze = max(2, f // 2)
            store.init_uniform("gate.W1", (2 * f, squeeze), rng, fan_in=2 * f)
            store.init_uniform("gate.b1", (1, squeeze), rng, fan_in=2 * f)
            store.init_uniform("gate.W2", (squeeze, f), rng, fan_in=squeeze)
            store.init_uniform("gate.b2", (1, f), rng, fan_in=squeeze)
        return store

    # -- forward -------------------------------------------------------------------------

    def forward(self, tape: Tape, batch: Batch) -> Dict[str, Tensor]:
        """Returns hidden (B, H), prob (B, 1) and, per architecture, gate or attention."""
        params = self.store.params
        batch_size, t_max, _ = batch.x.shape
        outputs: Dict[str, Tensor] = {}

        gate = None
        if self.config.architecture == "recalib_gate":
            counts = batch.active.sum(axis=1, keepdims=True)
            mean = (batch.x * batch.active[:, :, None]).sum(axis=1) / counts
            last_index = batch.active.sum(axis=1).astype(int) - 1
            last = batch.x[np.arange(batch_size), last_index]
            summary = Tensor(np.concatenate([mean, last], axis=1))
            gate = forward_gate(tape, summary, params)
            outputs["gate"] = gate

        h = Tensor(np.zeros((batch_size, self.config.hidden_dim)))
        states = []
        for t in range(t_max):
            x_t = Tensor(batch.x[:, t, :])
            if gate is not None:
                x_t = tape.mul(x_t, gate)
            h_new = forward_gru_cell(tape, x_t, h, params)
            step = batch.active[:, t:t + 1]
            if np.all(step == 1.0):
                h = h_new
            else:
                keep = Tensor(step)
                h = tape.add(tape.mul(keep, h_new), tape.mul(Tensor(1.0 - step), h))
            states.append(h)

        if self.config.architecture == "attn_pool":
            visit_observed = batch.observed.any(axis=2) & (batch.active == 1.0)
            usable = np.where(visit_observed.any(axis=1, keepdims=True), visit_observed, batch.active == 1.0)
            bias = np.where(usable, 0.0, MASK_NEG)
            hidden, weights = forward_attention_pool(tape, states, params, mask_bias=bias)
            outputs["attention"] = weights
        else:
            hidden = h

        outputs["hidden"] = hidden
        outputs["prob"] = tape.sigmoid(forward_linear(tape, hidden, params["head.W"], params["head.b"]))
        return outputs

    def loss(self, tape: Tape, batch: Batch) -> Tensor:
        return tape.bce(self.forward(tape, batch)["prob"], batch.labels)

    # -- inference -----------------------------------------------------------------------

    def predict_proba(self, x: np.ndarray, observed: Optional[np.ndarray] = None,
                      active: Optional[np.ndarray] = None) -> np.ndarray:
        """Probabilities for a raw (B, T, F) array; used as the attribution value function."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.n_features:
            raise InferenceError(f"Expected (B, T, {self.n_features}) input, got {x.shape}")
        if observed is None:
            observed = np.ones(x.shape, dtype=bool)
        if active is None:
            active = np.ones(x.shape[:2])
        batch = Batch(x=x, observed=observed, active=active, labels=np.zeros(x.shape[0]))
        return self.forward(Tape(record=False), batch)["prob"].data[:, 0]

    def value_function(self, record: PatientRecord) -> Callable[[np.ndarray], np.ndarray]:
        """predict_proba bound to the record's observation mask, so v(all features) equals infer(record).logit."""
        mask = np.asarray(record.mask, dtype=bool)

        def value(x: np.ndarray) -> np.ndarray:
            x = np.asarray(x, dtype=np.float64)
            return self.predict_proba(x, observed=np.broadcast_to(mask, x.shape))

        return value

    def infer(self, record: PatientRecord) -> ExpertOutput:
        """Deterministic hidden state and logit for one normalized record."""
        return self.predict_batch([record])[0]

    def predict_batch(self, records: Sequence[PatientRecord], batch_size: Optional[int] = None) -> List[ExpertOutput]:
        """Element-wise equal to ``infer``; order preserved."""
        if not records:
            return []
        size = batch_size or self.config.batch_size
        results: List[ExpertOutput] = []
        for start in range(0, len(records), size):
            chunk = records[start:start + size]
            try:
                batch = make_batch(chunk, self.n_features)
            except InferenceError as e:
                raise InferenceError(f"Batch starting at record index {start}: {e}") from e
            out = self.forward(Tape(record=False), batch)
            for i in range(len(chunk)):
                results.append(ExpertOutput(
                    hidden=out["hidden"].data[i].copy(),
                    logit=float(out["prob"].data[i, 0]),
                    gate=out["gate"].data[i].copy() if "gate" in out else None,
                    attention=out["attention"].data[i, :chunk[i].n_visits].copy() if "attention" in out else None,
                ))
        return results

    def predict_scores(self, records: Sequence[PatientRecord]) -> np.ndarray:
        return np.array([o.logit for o in self.predict_batch(records)])

    # -- persistence ---------------------------------------------------------------------

    def save(self, directory: str):
        """Parameter checkpoint plus ExpertConfig/spec JSON sidecar."""
        os.makedirs(directory, exist_ok=True)
        save_params(self.store, os.path.join(directory, f"{self.name}.params.json"))
        sidecar = {
            "config": self.config.to_dict(),
            "specs": [s.to_dict() for s in self.specs],
            "history": [asdict(h) for h in self.history],
        }
        with open(os.path.join(directory, f"{self.name}.config.json"), "w") as f:
            json.dump(sidecar, f, indent=2)

    @classmethod
    def load(cls, directory: str, name: str) -> "ExpertModel":
        with open(os.path.join(directory, f"{name}.config.json"), "r") as f:
            sidecar = json.load(f)
        config = ExpertConfig(**sidecar["config"])
        specs = [FeatureSpec.from_dict(s) for s in sidecar["specs"]]
        store = load_params(os.path.join(directory, f"{name}.params.json"))
        model = cls(config, specs, store=store)
        model.history = [EpochLog(**h) for h in sidecar.get("history", [])]
        return model


# -- training ---------------------------------------------------------------------------------

def _validation_scores(model: ExpertModel, records: Sequence[PatientRecord]) -> Tuple[float, float]:
    labels = np.array([r.label for r in records])
    scores = model.predict_scores(records)
    try:
        return auprc(labels, scores), auroc(labels, scores)
    except UndefinedMetricError:
        logger.warning("Validation split lacks a class; AUPRC treated as 0")
        return 0.0, 0.5


def train_expert(config: ExpertConfig, specs: Sequence[FeatureSpec], records: Sequence[PatientRecord],
                 data_split: DatasetSplit, show_progress: bool = False) -> ExpertModel:
    """
    Train one expert with AdamW and early stopping on validation AUPRC.

    Args:
        config: Expert configuration
        specs: Fitted feature specs (records must be imputed and normalized with them)
        records: All prepared records; membership comes from ``data_split``
        data_split: Train/val/test ids

    Returns:
        ExpertModel: the best-on-validation checkpoint
    """
    train = select(records, data_split.train)
    val = select(records, data_split.val)
    if not train:
        raise TrainingError("Empty train split")
    if not val:
        raise TrainingError("Empty validation split")

    model = ExpertModel(config, specs)
    rng = np.random.default_rng(config.seed + 1)
    best_auprc = -1.0
    best_params = model.store.snapshot()
    stale = 0

    logger.info(
        f"Training expert {config.name} ({config.architecture}, hidden={config.hidden_dim}, lr={config.lr}) "
        f"on {len(train)} patients"
    )
    epochs = range(1, config.max_epochs + 1)
    for epoch in tqdm(epochs, desc=f"expert {config.name}", disable=not show_progress):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(train), config.batch_size):
            chunk = [train[i] for i in order[start:start + config.batch_size]]
            batch = make_batch(chunk, model.n_features)
            tape = Tape()
            loss = model.loss(tape, batch)
            if not np.isfinite(loss.data[0, 0]):
                raise TrainingError(f"Non-finite training loss at epoch {epoch} for expert {config.name}")
            grads = backward(tape, loss, params=model.store.params)
            optimizer_step(model.store, grads, lr=config.lr, weight_decay=config.weight_decay)
            losses.append(loss.data[0, 0] * len(chunk))

        train_loss = float(np.sum(losses) / len(train))
        val_auprc, val_auroc = _validation_scores(model, val)
        improved = val_auprc > best_auprc
        model.history.append(EpochLog(epoch, train_loss, val_auprc, val_auroc, improved))
        logger.debug(f"[{config.name}] epoch {epoch}: loss={train_loss:.4f} val_auprc={val_auprc:.4f}")
        if improved:
            best_auprc = val_auprc
            best_params = model.store.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"[{config.name}] early stop at epoch {epoch} (best val AUPRC {best_auprc:.4f})")
                break

    model.store.restore(best_params)
    return model


def grid_search(base_config: ExpertConfig, specs: Sequence[FeatureSpec], records: Sequence[PatientRecord],
                data_split: DatasetSplit, lrs: Sequence[float] = LR_GRID,
                hidden_dims: Sequence[int] = HIDDEN_GRID) -> ExpertModel:
    """Train one expert per (lr, hidden_dim) and keep the best validation AUPRC."""
    val = select(records, data_split.val)
    best: Optional[ExpertModel] = None
    best_score = -1.0
    for lr in lrs:
        for hidden_dim in hidden_dims:
            config = replace(base_config, lr=lr, hidden_dim=hidden_dim)
            model = train_expert(config, specs, records, data_split)
            score, _ = _validation_scores(model, val)
            logger.info(f"Grid cell lr={lr} hidden={hidden_dim}: val AUPRC {score:.4f}")
            if score > best_score:
                best, best_score = model, score
    return best
