"""
Consultation Module
Multi-round collaborative consultation per patient and cohort statistics.

Per patient:
1. every expert infers the record and its Shapley importances are computed
2. each DoctorAgent gets its own record text, retrieves evidence and reviews
3. the MetaAgent writes a preliminary report
4. rounds of doctor statements, MetaAgent action and revision until
   unanimous agreement, a stop decision, or ``max_rounds``

Author: ColaCare Research Team
"""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, TypeVar

from tqdm import tqdm

from .agents import (
    AgentChannel,
    DoctorTurn,
    MetaDecision,
    MetaReport,
    PatientRecordText,
    VariantOutput,
    build_patient_record,
    doctor_initial_review,
    doctor_role,
    doctor_statement,
    llm_output_probability,
    meta_action,
    meta_revise,
    meta_synthesize,
    unanimous,
)
from .attribution import explain
from .ehr_data import FeatureSpec, PatientRecord
from .expert_models import ExpertModel
from .llm_gateway import CostLedger, ProtocolError, Provider, ScriptError, TransportError
from .retrieval import CorpusIndex, Embedder, RetrievedEvidence, retrieve

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

GATEWAY_ERRORS = (TransportError, ProtocolError, ScriptError)


class ConsultationError(ValueError):
    """Raised when a consultation cannot be set up."""


@dataclass
class ConsultationConfig:
    """Configuration for the collaborative consultation."""
    n_doctors: int = 3
    max_rounds: int = 3
    k_retrieval: int = 16
    k_top_features: int = 10
    reretrieve_per_round: bool = False
    parallelism: int = 1
    llm_output: bool = True
    attribution_method: str = "auto"
    n_permutations: int = 200
    attribution_seed: int = 0
    price_input_per_million: float = 0.14
    price_output_per_million: float = 0.28

    def __post_init__(self):
        if self.n_doctors < 1:
            raise ConsultationError(f"n_doctors must be >= 1, got {self.n_doctors}")
        if self.max_rounds < 1:
            raise ConsultationError(f"max_rounds must be >= 1, got {self.max_rounds}")
        if self.k_retrieval < 1 or self.k_top_features < 1:
            raise ConsultationError("k_retrieval and k_top_features must be >= 1")
        if self.parallelism < 1:
            raise ConsultationError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass
class DoctorContext:
    """Round-0 state of one DoctorAgent."""
    role_id: int
    expert_name: str
    logit: float
    importances: List[float]
    attribution_method: str
    record_text: PatientRecordText
    evidence: Optional[RetrievedEvidence] = None
    review: Optional[DoctorTurn] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "role_id": self.role_id,
            "expert_name": self.expert_name,
            "logit": self.logit,
            "importances": self.importances,
            "attribution_method": self.attribution_method,
            "record_text": self.record_text.to_dict(),
            "evidence": self.evidence.to_dict() if self.evidence is not None else None,
            "review": self.review.to_dict() if self.review else None,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DoctorContext":
        return cls(
            role_id=data["role_id"],
            expert_name=data["expert_name"],
            logit=data["logit"],
            importances=list(data["importances"]),
            attribution_method=data["attribution_method"],
            record_text=PatientRecordText.from_dict(data["record_text"]),
            evidence=RetrievedEvidence.from_dict(data["evidence"]) if data.get("evidence") else None,
            review=DoctorTurn.from_dict(data["review"]) if data.get("review") else None,
        )


@dataclass
class ConsultationTranscript:
    patient_id: str
    label: int
    status: str = "completed"  # completed | aborted
    doctors: List[DoctorContext] = field(default_factory=list)
    rounds: List[List[DoctorTurn]] = field(default_factory=list)
    reports: List[MetaReport] = field(default_factory=list)
    actions: List[MetaDecision] = field(default_factory=list)
    round_evidence: List[Dict[str, List[str]]] = field(default_factory=list)
    variant: Optional[VariantOutput] = None
    ledger: Dict[str, Any] = field(default_factory=dict)
    failed_step: Optional[str] = None
    error: Optional[str] = None

    @property
    def rounds_used(self) -> int:
        return len(self.rounds)

    @property
    def consensus(self) -> bool:
        return bool(self.rounds) and unanimous(self.rounds[-1])

    @property
    def final_report(self) -> Optional[MetaReport]:
        return self.reports[-1] if self.reports else None

    @property
    def expert_logits(self) -> List[float]:
        return [d.logit for d in self.doctors]

    def protocol_call_count(self) -> int:
        """Closed-form gateway call count of the consultation itself (variant excluded)."""
        n = len(self.doctors)
        total = n + 1
        for decision in self.actions:
            total += n + (1 if decision.consulted else 0) + (1 if decision.action == "continue" else 0)
        return total

    def to_dict(self) -> Dict[str, Any]:
        final = self.final_report
        return {
            "patient_id": self.patient_id,
            "label": self.label,
            "status": self.status,
            "rounds_used": self.rounds_used,
            "consensus": self.consensus,
            "doctors": [d.to_dict() for d in self.doctors],
            "rounds": [[t.to_dict() for t in turns] for turns in self.rounds],
            "reports": [r.to_dict() for r in self.reports],
            "actions": [a.to_dict() for a in self.actions],
            "round_evidence": self.round_evidence,
            "final_report": final.to_dict() if final else None,
            "variant": self.variant.to_dict() if self.variant else None,
            "ledger": self.ledger,
            "failed_step": self.failed_step,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ConsultationTranscript":
        return cls(
            patient_id=data["patient_id"],
            label=int(data["label"]),
            status=data["status"],
            doctors=[DoctorContext.from_dict(d) for d in data["doctors"]],
            rounds=[[DoctorTurn.from_dict(t) for t in turns] for turns in data["rounds"]],
            reports=[MetaReport.from_dict(r) for r in data["reports"]],
            actions=[MetaDecision.from_dict(a) for a in data["actions"]],
            round_evidence=list(data.get("round_evidence", [])),
            variant=VariantOutput.from_dict(data["variant"]) if data.get("variant") else None,
            ledger=dict(data.get("ledger", {})),
            failed_step=data.get("failed_step"),
            error=data.get("error"),
        )

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"{self.patient_id}.json")
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, path: str) -> "ConsultationTranscript":
        with open(path, "r") as f:
            return cls.from_dict(json.load(f))


@dataclass
class ConsultationStats:
    """Cohort-level consultation statistics."""
    n_patients: int
    n_aborted: int
    avg_rounds: float
    consensus_rate: float
    doctor_votes: Dict[str, Dict[str, float]]
    tokens_per_patient: Dict[str, Dict[str, float]]
    cost_per_sample: float
    variant_fallbacks: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def save(self, path: str):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
        logger.info(f"Consultation stats written to {path}")


def _map(fn: Callable[[T], R], items: Sequence[T], workers: int) -> List[R]:
    """Order-preserving map, threaded when ``workers`` > 1."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _evidence_chunks(index: CorpusIndex, evidence: RetrievedEvidence):
    return [index.get(chunk_id) for chunk_id in evidence.chunk_ids]


def _prepare_doctor(role_id: int, expert: ExpertModel, patient: PatientRecord, specs: Sequence[FeatureSpec],
                    config: ConsultationConfig) -> DoctorContext:
    """Expert output, attribution and record text; evidence is retrieved later."""
    output = expert.infer(patient)
    attribution = explain(
        expert.value_function(patient), patient, specs,
        method=config.attribution_method,
        n_permutations=config.n_permutations,
        seed=config.attribution_seed,
    )
    output.importances = attribution.phi
    record_text = build_patient_record(
        patient.static_info, {expert.name: output}, specs, config.k_top_features, record=patient
    )
    return DoctorContext(
        role_id=role_id,
        expert_name=expert.name,
        logit=output.logit,
        importances=[float(v) for v in attribution.phi],
        attribution_method=attribution.method,
        record_text=record_text,
    )


def run_consultation(config: ConsultationConfig, patient: PatientRecord, experts: Sequence[ExpertModel],
                     specs: Sequence[FeatureSpec], index: CorpusIndex, provider: Provider,
                     embedder: Optional[Embedder] = None) -> ConsultationTranscript:
    """
    Full consultation for one normalized patient record.

    Gateway failures do not raise; the transcript comes back with
    status "aborted" and the step that failed.
    """
    if len(experts) != config.n_doctors:
        raise ConsultationError(f"n_doctors={config.n_doctors} but {len(experts)} experts were supplied")

    ledger = CostLedger(config.price_input_per_million, config.price_output_per_million)
    channel = AgentChannel(provider, conversation_id=patient.patient_id, ledger=ledger)
    transcript = ConsultationTranscript(patient_id=patient.patient_id, label=int(patient.label))
    role_ids = list(range(1, config.n_doctors + 1))

    transcript.doctors = [
        _prepare_doctor(role_id, expert, patient, specs, config)
        for role_id, expert in zip(role_ids, experts)
    ]
    logits = transcript.expert_logits

    step = "retrieval"
    try:
        for doctor in transcript.doctors:
            doctor.evidence = retrieve(index, doctor.record_text.text, config.k_retrieval, embedder=embedder)
        evidence = {d.role_id: _evidence_chunks(index, d.evidence) for d in transcript.doctors}

        step = "doctor_review"
        reviews = _map(
            lambda d: doctor_initial_review(d.role_id, d.record_text, evidence[d.role_id], channel),
            transcript.doctors, config.n_doctors,
        )
        for doctor, review in zip(transcript.doctors, reviews):
            doctor.review = review

        step = "meta_report"
        report = meta_synthesize(reviews, patient.static_info, channel, logits)
        transcript.reports.append(report)

        previous = {turn.role_id: turn for turn in reviews}
        for round_number in range(1, config.max_rounds + 1):
            if config.reretrieve_per_round and round_number > 1:
                step = f"retrieval:{round_number}"
                fresh = retrieve(index, report.narrative, config.k_retrieval, embedder=embedder)
                evidence = {role_id: _evidence_chunks(index, fresh) for role_id in role_ids}
                transcript.round_evidence.append({doctor_role(r): fresh.chunk_ids for r in role_ids})

            step = f"doctor_statement:{round_number}"
            statements = _map(
                lambda r: doctor_statement(r, previous[r], report, evidence[r], channel, round_number),
                role_ids, config.n_doctors,
            )
            transcript.rounds.append(statements)

            step = f"meta_action:{round_number}"
            decision = meta_action(statements, report, channel, round_number)
            if decision.action == "continue" and round_number == config.max_rounds:
                decision.action = "stop"
                decision.capped = True
            transcript.actions.append(decision)
            if decision.action == "stop":
                break

            step = f"meta_revision:{round_number}"
            report = meta_revise(report, statements, channel, logits)
            transcript.reports.append(report)
            previous = {turn.role_id: turn for turn in statements}

        if config.llm_output:
            step = "llm_output_variant"
            transcript.variant = llm_output_probability(transcript.final_report, channel, logits)
    except GATEWAY_ERRORS as e:
        transcript.status = "aborted"
        transcript.failed_step = step
        transcript.error = f"{type(e).__name__}: {e}"
        logger.error(f"Consultation for {patient.patient_id} aborted at {step}: {e}")

    transcript.ledger = ledger.to_dict()
    if transcript.status == "completed":
        logger.debug(
            f"{patient.patient_id}: {transcript.rounds_used} round(s), consensus={transcript.consensus}, "
            f"risk={transcript.final_report.risk}"
        )
    return transcript


def _vote_shares(transcripts: Sequence[ConsultationTranscript]) -> Dict[str, Dict[str, float]]:
    counts: Dict[str, Dict[str, int]] = {}
    for transcript in transcripts:
        for turns in transcript.rounds:
            for turn in turns:
                tally = counts.setdefault(doctor_role(turn.role_id), {"agree": 0, "disagree": 0})
                tally[turn.vote] += 1
    shares = {}
    for role in sorted(counts):
        tally = counts[role]
        total = tally["agree"] + tally["disagree"]
        shares[role] = {
            "agree_pct": 100.0 * tally["agree"] / total if total else 0.0,
            "disagree_pct": 100.0 * tally["disagree"] / total if total else 0.0,
            "votes": total,
        }
    return shares


def aggregate_stats(transcripts: Sequence[ConsultationTranscript], ledger: CostLedger) -> ConsultationStats:
    """
    Fold per-patient transcripts, in patient-id order, into cohort statistics.

    Votes are counted per vote cast (every round). Aborted transcripts are
    excluded and counted separately.
    """
    ordered = sorted(transcripts, key=lambda t: t.patient_id)
    completed = [t for t in ordered if t.status == "completed"]
    n = len(completed)

    role_tokens: Dict[str, List[int]] = {}
    for transcript in completed:
        for role, usage in transcript.ledger.get("by_role", {}).items():
            totals = role_tokens.setdefault(role, [0, 0])
            totals[0] += usage["input_tokens"]
            totals[1] += usage["output_tokens"]
    tokens_per_patient = {
        role: {"avg_input_tokens": totals[0] / n, "avg_output_tokens": totals[1] / n}
        for role, totals in sorted(role_tokens.items())
    } if n else {}

    return ConsultationStats(
        n_patients=n,
        n_aborted=len(ordered) - n,
        avg_rounds=sum(t.rounds_used for t in completed) / n if n else 0.0,
        consensus_rate=100.0 * sum(t.consensus for t in completed) / n if n else 0.0,
        doctor_votes=_vote_shares(completed),
        tokens_per_patient=tokens_per_patient,
        cost_per_sample=ledger.cost_per_sample(len(ordered)) if ordered else 0.0,
        variant_fallbacks=sum(1 for t in completed if t.variant is not None and t.variant.fallback),
    )


def run_cohort(config: ConsultationConfig, patients: Sequence[PatientRecord], experts: Sequence[ExpertModel],
               specs: Sequence[FeatureSpec], index: CorpusIndex, provider: Provider,
               embedder: Optional[Embedder] = None, transcript_dir: Optional[str] = None,
               show_progress: bool = True) -> Tuple[List[ConsultationTranscript], ConsultationStats, CostLedger]:
    """
    Consult every patient, up to ``config.parallelism`` at a time.

    Returns transcripts in patient-id order, cohort statistics and the merged
    ledger. Transcripts (aborted ones included) are written to
    ``transcript_dir`` when given.
    """
    if len(experts) != config.n_doctors:
        raise ConsultationError(f"n_doctors={config.n_doctors} but {len(experts)} experts were supplied")
    ordered = sorted(patients, key=lambda p: p.patient_id)

    progress = tqdm(total=len(ordered), desc="Consulting", unit="patient", disable=not show_progress)

    def consult(patient: PatientRecord) -> ConsultationTranscript:
        transcript = run_consultation(config, patient, experts, specs, index, provider, embedder)
        if transcript_dir:
            transcript.save(transcript_dir)
        progress.update(1)
        return transcript

    try:
        transcripts = _map(consult, ordered, config.parallelism)
    finally:
        progress.close()

    ledger = CostLedger(config.price_input_per_million, config.price_output_per_million)
    for transcript in transcripts:
        ledger.merge(CostLedger.from_dict(transcript.ledger))
    stats = aggregate_stats(transcripts, ledger)
    logger.info(
        f"Consulted {len(transcripts)} patients: avg rounds {stats.avg_rounds:.2f}, "
        f"consensus {stats.consensus_rate:.1f}%, aborted {stats.n_aborted}"
    )
    return transcripts, stats, ledger


def load_transcripts(directory: str) -> List[ConsultationTranscript]:
    if not os.path.isdir(directory):
        return []
    names = sorted(name for name in os.listdir(directory) if name.endswith(".json"))
    return [ConsultationTranscript.load(os.path.join(directory, name)) for name in names]
