"""
Agents Module
Prompt construction and reply parsing for the DoctorAgents and the MetaAgent.

Every reply is requested as a strict JSON envelope and extracted leniently
(first balanced JSON object in the text). Fallbacks:
- doctor statement unparseable after one reprompt: vote agree, parse_failed
- meta action unparseable after one reprompt: continue
- meta report without a risk after one reprompt: high iff mean expert logit >= 0.5
- LLM-output probability unparseable twice: mean expert logit

Author: ColaCare Research Team
"""

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .ehr_data import FeatureSpec, PatientRecord
from .llm_gateway import ChatRequest, ChatResponse, CostLedger, Provider, complete
from .retrieval import CorpusChunk

logger = logging.getLogger(__name__)

VOTES = ("agree", "disagree", "none")
RISKS = ("high", "low")
ACTIONS = ("continue", "stop")

EXCERPT_CHARS = 500
FLAT_SLOPE = 0.01
META_ROLE = "meta"

FORMAT_REMINDER = (
    "\n\nYour previous answer could not be parsed. Reply with exactly one JSON object "
    "in the format described above and nothing else."
)
NUMBER_REMINDER = "\n\nReply with a single decimal number between 0 and 1 and nothing else."

DOCTOR_SYSTEM = (
    "You are DoctorAgent {role_id}, a physician who consults a specialised EHR prediction model. "
    "Base every claim on the patient record and the medical literature excerpts you are given, "
    "and cite excerpts by their ids."
)
META_SYSTEM = (
    "You are the MetaAgent, a senior physician who leads a panel of DoctorAgents. You synthesise "
    "their reviews into one report, judge whether further discussion is necessary and revise the "
    "report when the panel raises valid concerns."
)

REVIEW_TEMPLATE = """{record}

Relevant medical literature:
{excerpts}

Review the expert model's prediction for this patient. Explain whether the prediction and the
influential features are clinically plausible and which excerpts support your view.
Answer with JSON: {{"reason": "<your review>", "evidence_ids": ["<excerpt id>", ...]}}"""

SYNTHESIS_TEMPLATE = """Patient: {static}
Mean expert mortality risk: {mean_logit:.2f}

Reviews from the DoctorAgents:
{reviews}

Write a synthesised report. Categorise the patient's mortality risk as either high or low and
incorporate the pertinent comments and supporting evidence from the reviews.
Answer with JSON: {{"risk": "high"|"low", "narrative": "<report>", "evidence": [{{"doctor": <id>, "chunk": "<excerpt id>"}}, ...]}}"""

STATEMENT_TEMPLATE = """Your previous opinion:
{previous}

Current report from the MetaAgent (round {report_round}):
Risk: {risk}
{narrative}

Literature available to you:
{evidence}

State whether you agree or disagree with the report. If you disagree, give your reason and
support it with relevant excerpts.
Answer with JSON: {{"vote": "agree"|"disagree", "reason": "<reason>", "evidence_ids": ["<excerpt id>", ...]}}"""

ACTION_TEMPLATE = """Current report (round {report_round}), risk {risk}:
{narrative}

Statements from the DoctorAgents:
{statements}

The panel has not reached unanimous agreement. Determine whether further discussion is necessary.
Answer with JSON: {{"action": "continue"|"stop", "rationale": "<why>"}}"""

REVISION_TEMPLATE = """Previous report (round {report_round}), risk {risk}:
{narrative}

Statements from the DoctorAgents:
{statements}

Refine the report, addressing every dissenting reason that is supported by evidence.
Categorise the mortality risk as either high or low.
Answer with JSON: {{"risk": "high"|"low", "narrative": "<revised report>", "evidence": [{{"doctor": <id>, "chunk": "<excerpt id>"}}, ...]}}"""

VARIANT_TEMPLATE = """Final consultation report (risk {risk}):
{narrative}

Based only on this report, estimate the probability that the patient dies during the hospital
stay. Reply with a single decimal number between 0 and 1."""


# -- types ------------------------------------------------------------------------------------

@dataclass
class TopFeature:
    name: str
    phi: float
    last_value: Optional[float]
    trend: str  # rising | falling | flat
    unit: str = ""


@dataclass
class PatientRecordText:
    text: str
    z_values: Dict[str, float]
    top_features: List[TopFeature]
    static_summary: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientRecordText":
        return cls(
            text=data["text"],
            z_values=dict(data["z_values"]),
            top_features=[TopFeature(**f) for f in data["top_features"]],
            static_summary=data["static_summary"],
        )


@dataclass
class Usage:
    n_calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0

    def add(self, response: ChatResponse):
        self.n_calls += 1
        self.input_tokens += response.input_tokens
        self.output_tokens += response.output_tokens


@dataclass
class DoctorTurn:
    role_id: int
    round: int
    vote: str
    reason: str
    cited_chunk_ids: List[str]
    raw_text: str
    parse_failed: bool = False
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self):
        if self.vote not in VOTES:
            raise ValueError(f"Unknown vote {self.vote!r} for doctor {self.role_id}")
        if (self.round == 0) != (self.vote == "none"):
            raise ValueError(f"Doctor {self.role_id} round {self.round}: vote {self.vote!r} not allowed")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DoctorTurn":
        data = dict(data)
        data["usage"] = Usage(**data.get("usage", {}))
        return cls(**data)


@dataclass
class MetaReport:
    round: int
    risk: str
    narrative: str
    incorporated_evidence: List[Tuple[int, str]]
    raw_text: str = ""
    parse_failed: bool = False
    usage: Usage = field(default_factory=Usage)

    def __post_init__(self):
        if self.risk not in RISKS:
            raise ValueError(f"Report round {self.round}: risk must be high or low, got {self.risk!r}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["incorporated_evidence"] = [list(pair) for pair in self.incorporated_evidence]
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetaReport":
        data = dict(data)
        data["incorporated_evidence"] = [(int(d), str(c)) for d, c in data["incorporated_evidence"]]
        data["usage"] = Usage(**data.get("usage", {}))
        return cls(**data)


@dataclass
class MetaDecision:
    round: int
    action: str
    rationale: str
    consulted: bool
    parse_failed: bool = False
    capped: bool = False
    usage: Usage = field(default_factory=Usage)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetaDecision":
        data = dict(data)
        data["usage"] = Usage(**data.get("usage", {}))
        return cls(**data)


@dataclass
class VariantOutput:
    probability: float
    raw_texts: List[str]
    fallback: bool
    usage: Usage = field(default_factory=Usage)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "VariantOutput":
        data = dict(data)
        data["usage"] = Usage(**data.get("usage", {}))
        return cls(**data)


class AgentChannel:
    """
    Provider bound to one patient conversation.

    Every call is tagged with the conversation id and agent role, and recorded
    in the ledger when one is attached.
    """

    def __init__(self, provider: Provider, conversation_id: str = "", ledger: Optional[CostLedger] = None,
                 temperature: float = 0.0, max_output_tokens: int = 1024):
        self.provider = provider
        self.conversation_id = conversation_id
        self.ledger = ledger
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens

    def ask(self, role: str, tag: str, system_prompt: str, user_prompt: str, usage: Usage) -> str:
        request = ChatRequest(
            system_prompt=system_prompt,
            user_prompt=user_prompt,
            tag=tag,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
            conversation_id=self.conversation_id,
            role=role,
        )
        response = complete(self.provider, request)
        if self.ledger is not None:
            self.ledger.record(role, request, response)
        usage.add(response)
        return response.text


def doctor_role(role_id: int) -> str:
    return f"doctor_{role_id}"


# -- parsing ----------------------------------------------------------------------------------

def extract_json(text: str) -> Optional[Dict[str, Any]]:
    """First balanced JSON object in ``text`` that parses, or None."""
    start = text.find("{")
    while start != -1:
        depth = 0
        in_string = False
        escaped = False
        for i in range(start, len(text)):
            ch = text[i]
            if in_string:
                if escaped:
                    escaped = False
                elif ch == "\\":
                    escaped = True
                elif ch == '"':
                    in_string = False
            elif ch == '"':
                in_string = True
            elif ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    try:
                        obj = json.loads(text[start:i + 1])
                    except json.JSONDecodeError:
                        break
                    if isinstance(obj, dict):
                        return obj
                    break
        start = text.find("{", start + 1)
    return None


def _filter_citations(role_id: int, cited: Sequence[Any], allowed: Sequence[str]) -> List[str]:
    allowed_set = set(allowed)
    kept: List[str] = []
    for chunk_id in cited:
        chunk_id = str(chunk_id)
        if chunk_id not in allowed_set:
            logger.warning(f"Doctor {role_id} cited unretrieved evidence {chunk_id!r}; dropped")
            continue
        if chunk_id not in kept:
            kept.append(chunk_id)
    return kept


def _scan_citations(text: str, allowed: Sequence[str]) -> List[str]:
    found = [(text.find(cid), cid) for cid in allowed if cid in text]
    return [cid for _, cid in sorted(found)]


def _parse_risk(obj: Optional[Mapping[str, Any]]) -> Optional[str]:
    if obj is None:
        return None
    risk = str(obj.get("risk", "")).strip().lower()
    return risk if risk in RISKS else None


def _parse_evidence_pairs(obj: Mapping[str, Any]) -> List[Tuple[int, str]]:
    pairs = []
    for item in obj.get("evidence") or []:
        if not isinstance(item, Mapping):
            continue
        try:
            pairs.append((int(item["doctor"]), str(item["chunk"])))
        except (KeyError, TypeError, ValueError):
            continue
    return pairs


_NUMBER = re.compile(r"(?<![\w.+-])([-+]?)(\d+(?:\.\d+)?|\.\d+)([eE][-+]?\d+)?")


def parse_probability(text: str) -> Optional[float]:
    """First plain decimal number in the text, if it lies in [0, 1]; signed or exponent forms are refused."""
    match = _NUMBER.search(text)
    if match is None:
        return None
    sign, digits, exponent = match.groups()
    if sign == "-" or exponent:
        return None
    value = float(digits)
    return value if 0.0 <= value <= 1.0 else None


# -- patient record ---------------------------------------------------------------------------

def trend_tag(values: Sequence[float]) -> str:
    """Sign of the least-squares slope over visit positions; |slope| < 0.01 is flat."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return "flat"
    slope = np.polyfit(np.arange(values.size, dtype=np.float64), values, 1)[0]
    if abs(slope) < FLAT_SLOPE:
        return "flat"
    return "rising" if slope > 0 else "falling"


def _raw_values(record: PatientRecord, spec: FeatureSpec, index: int) -> np.ndarray:
    observed = record.mask[:, index]
    values = record.series[observed, index]
    if spec.is_fitted and spec.population_std is not None:
        values = values * spec.population_std + spec.population_mean
    return values


def static_summary(static_info: Mapping[str, Any]) -> str:
    if not static_info:
        return "no demographic information"
    return "; ".join(f"{key}: {static_info[key]}" for key in sorted(static_info))


def build_patient_record(static_info: Mapping[str, Any], expert_outputs: Mapping[str, Any],
                         specs: Sequence[FeatureSpec], k_top: int = 10,
                         record: Optional[PatientRecord] = None) -> PatientRecordText:
    """
    Render x_record from expert logits, Shapley importances and static info.

    ``expert_outputs`` maps expert name to an ExpertOutput with importances
    filled. Importances are averaged over the experts given. ``record`` is the
    normalized patient record; last values and trends are reported on the
    original scale of each fitted feature.
    """
    if not expert_outputs:
        raise ValueError("build_patient_record needs at least one expert output")
    if k_top < 1:
        raise ValueError(f"k_top must be >= 1, got {k_top}")

    z_values = {name: float(out.logit) for name, out in expert_outputs.items()}
    importances = [np.asarray(out.importances, dtype=np.float64)
                   for out in expert_outputs.values() if out.importances is not None]
    phi = np.mean(importances, axis=0) if importances else np.zeros(len(specs))
    order = sorted(range(len(phi)), key=lambda i: (-abs(phi[i]), i))[:k_top]

    top: List[TopFeature] = []
    for i in order:
        last_value, trend = None, "flat"
        if record is not None:
            values = _raw_values(record, specs[i], i)
            if values.size:
                last_value = float(values[-1])
                trend = trend_tag(values)
        top.append(TopFeature(specs[i].name, float(phi[i]), last_value, trend, specs[i].unit))

    summary = static_summary(static_info)
    lines = ["Patient record", f"Demographics: {summary}", "Expert model mortality risk predictions:"]
    lines.extend(f"- {name}: {z:.2f}" for name, z in z_values.items())
    lines.append("Most influential features (Shapley importance; last observed value; trend):")
    for rank, feat in enumerate(top, 1):
        if feat.last_value is None:
            value = "not observed"
        else:
            value = f"{feat.last_value:.2f}{' ' + feat.unit if feat.unit else ''}"
        lines.append(f"{rank}. {feat.name}: importance {feat.phi:+.4f}; last value {value}; {feat.trend}")
    return PatientRecordText("\n".join(lines), z_values, top, summary)


def format_excerpts(chunks: Sequence[CorpusChunk]) -> str:
    if not chunks:
        return "(no excerpts retrieved)"
    return "\n\n".join(f"[{c.chunk_id}] {c.doc_title}\n{c.text[:EXCERPT_CHARS]}" for c in chunks)


# -- DoctorAgent ------------------------------------------------------------------------------

def doctor_initial_review(role_id: int, record_text: PatientRecordText, evidence: Sequence[CorpusChunk],
                          channel: AgentChannel) -> DoctorTurn:
    """Round-0 review of one doctor's own expert prediction, grounded in its retrieved excerpts."""
    allowed = [c.chunk_id for c in evidence]
    usage = Usage()
    prompt = REVIEW_TEMPLATE.format(record=record_text.text, excerpts=format_excerpts(evidence))
    text = channel.ask(doctor_role(role_id), "doctor_review", DOCTOR_SYSTEM.format(role_id=role_id), prompt, usage)

    obj = extract_json(text)
    if obj is not None and isinstance(obj.get("reason"), str):
        reason = obj["reason"]
        cited = _filter_citations(role_id, obj.get("evidence_ids") or [], allowed)
        parse_failed = False
    else:
        logger.warning(f"Doctor {role_id} review is not a JSON envelope; using the raw text")
        reason = text.strip()
        cited = _scan_citations(text, allowed)
        parse_failed = True
    return DoctorTurn(role_id, 0, "none", reason, cited, text, parse_failed, usage)


def _render_statement_evidence(evidence: Sequence[CorpusChunk]) -> str:
    if not evidence:
        return "(none)"
    return "\n".join(f"[{c.chunk_id}] {c.doc_title}" for c in evidence)


def doctor_statement(role_id: int, own_prev_turn: DoctorTurn, current_report: MetaReport,
                     evidence: Sequence[CorpusChunk], channel: AgentChannel, round_number: int) -> DoctorTurn:
    """Agree or disagree with the current report; one reprompt, then agree with parse_failed."""
    if round_number < 1:
        raise ValueError(f"Doctor statements start at round 1, got {round_number}")
    allowed = [c.chunk_id for c in evidence]
    usage = Usage()
    prompt = STATEMENT_TEMPLATE.format(
        previous=own_prev_turn.reason or "(no comment)",
        report_round=current_report.round,
        risk=current_report.risk,
        narrative=current_report.narrative,
        evidence=_render_statement_evidence(evidence),
    )
    system = DOCTOR_SYSTEM.format(role_id=role_id)
    raw_texts = []
    for user_prompt in (prompt, prompt + FORMAT_REMINDER):
        text = channel.ask(doctor_role(role_id), "doctor_statement", system, user_prompt, usage)
        raw_texts.append(text)
        obj = extract_json(text)
        if obj is None:
            continue
        vote = str(obj.get("vote", "")).strip().lower()
        reason = obj.get("reason") or ""
        if vote == "agree" or (vote == "disagree" and isinstance(reason, str) and reason.strip()):
            cited = _filter_citations(role_id, obj.get("evidence_ids") or [], allowed)
            return DoctorTurn(role_id, round_number, vote, str(reason), cited, text, False, usage)

    logger.warning(f"Doctor {role_id} round {round_number}: unparseable statement, counted as agree")
    return DoctorTurn(role_id, round_number, "agree", "", [], raw_texts[-1], True, usage)


# -- MetaAgent --------------------------------------------------------------------------------

def _fallback_risk(mean_logit: float) -> str:
    return "high" if mean_logit >= 0.5 else "low"


def _ask_report(channel: AgentChannel, tag: str, prompt: str, round_number: int,
                mean_logit: float) -> MetaReport:
    usage = Usage()
    text = ""
    for user_prompt in (prompt, prompt + FORMAT_REMINDER):
        text = channel.ask(META_ROLE, tag, META_SYSTEM, user_prompt, usage)
        obj = extract_json(text)
        risk = _parse_risk(obj)
        if risk is not None:
            narrative = obj.get("narrative")
            narrative = narrative if isinstance(narrative, str) and narrative.strip() else text.strip()
            return MetaReport(round_number, risk, narrative, _parse_evidence_pairs(obj), text, False, usage)

    risk = _fallback_risk(mean_logit)
    logger.warning(f"Report round {round_number}: no risk after reprompt; parse_failed, falling back to {risk}")
    return MetaReport(round_number, risk, text.strip() or f"Risk assessed as {risk}.", [], text, True, usage)


def _render_reviews(reviews: Sequence[DoctorTurn]) -> str:
    blocks = []
    for turn in sorted(reviews, key=lambda t: t.role_id):
        cited = ", ".join(turn.cited_chunk_ids) or "none"
        blocks.append(f"DoctorAgent {turn.role_id}: {turn.reason}\nCited: {cited}")
    return "\n\n".join(blocks)


def meta_synthesize(reviews: Sequence[DoctorTurn], static_info: Mapping[str, Any], channel: AgentChannel,
                    expert_logits: Sequence[float]) -> MetaReport:
    """Preliminary report (round 0) from the initial reviews."""
    if not reviews:
        raise ValueError("meta_synthesize needs at least one review")
    mean_logit = float(np.mean(expert_logits)) if len(expert_logits) else 0.5
    prompt = SYNTHESIS_TEMPLATE.format(
        static=static_summary(static_info),
        mean_logit=mean_logit,
        reviews=_render_reviews(reviews),
    )
    return _ask_report(channel, "meta_report", prompt, 0, mean_logit)


def _render_statements(statements: Sequence[DoctorTurn]) -> str:
    lines = []
    for turn in sorted(statements, key=lambda t: t.role_id):
        line = f"DoctorAgent {turn.role_id}: {turn.vote}"
        if turn.reason:
            line += f". {turn.reason}"
        if turn.cited_chunk_ids:
            line += f" (cites {', '.join(turn.cited_chunk_ids)})"
        lines.append(line)
    return "\n".join(lines)


def unanimous(statements: Sequence[DoctorTurn]) -> bool:
    return all(turn.vote == "agree" for turn in statements)


def meta_action(statements: Sequence[DoctorTurn], current_report: MetaReport, channel: AgentChannel,
                round_number: int) -> MetaDecision:
    """Stop without a call on unanimous agreement; otherwise ask the MetaAgent (default continue)."""
    if unanimous(statements):
        return MetaDecision(round_number, "stop", "unanimous agreement", consulted=False)

    usage = Usage()
    prompt = ACTION_TEMPLATE.format(
        report_round=current_report.round,
        risk=current_report.risk,
        narrative=current_report.narrative,
        statements=_render_statements(statements),
    )
    for user_prompt in (prompt, prompt + FORMAT_REMINDER):
        text = channel.ask(META_ROLE, "meta_action", META_SYSTEM, user_prompt, usage)
        obj = extract_json(text)
        action = str(obj.get("action", "")).strip().lower() if obj else ""
        if action in ACTIONS:
            return MetaDecision(round_number, action, str(obj.get("rationale", "")), True, False, usage=usage)

    logger.warning(f"Round {round_number}: unparseable meta action, continuing")
    return MetaDecision(round_number, "continue", "", True, True, usage=usage)


def meta_revise(prev_report: MetaReport, statements: Sequence[DoctorTurn], channel: AgentChannel,
                expert_logits: Sequence[float]) -> MetaReport:
    mean_logit = float(np.mean(expert_logits)) if len(expert_logits) else 0.5
    prompt = REVISION_TEMPLATE.format(
        report_round=prev_report.round,
        risk=prev_report.risk,
        narrative=prev_report.narrative,
        statements=_render_statements(statements),
    )
    return _ask_report(channel, "meta_revision", prompt, prev_report.round + 1, mean_logit)


def llm_output_probability(final_report: MetaReport, channel: AgentChannel,
                           expert_logits: Sequence[float]) -> VariantOutput:
    """Probability read from the final report; one retry, then the mean expert logit."""
    usage = Usage()
    prompt = VARIANT_TEMPLATE.format(risk=final_report.risk, narrative=final_report.narrative)
    raw_texts = []
    for user_prompt in (prompt, prompt + NUMBER_REMINDER):
        text = channel.ask(META_ROLE, "llm_output_variant", META_SYSTEM, user_prompt, usage)
        raw_texts.append(text)
        value = parse_probability(text)
        if value is not None:
            return VariantOutput(value, raw_texts, False, usage)
    fallback = float(np.mean(expert_logits)) if len(expert_logits) else 0.5
    logger.warning(f"LLM-output probability unparseable; using mean expert logit {fallback:.4f}")
    return VariantOutput(fallback, raw_texts, True, usage)
