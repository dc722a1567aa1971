"""
LLM Gateway Module
Uniform chat-completion access for every agent prompt.

This module provides:
- A deterministic scripted provider for offline and reproducible runs
- An HTTP client for OpenAI-compatible endpoints with bounded retries
- An HTTP embedding client implementing the retrieval embedder interface
- Token and cost accounting per prompt tag and per agent role

Author: ColaCare Research Team
"""

import heapq
import json
import logging
import math
import os
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
import requests
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_chain, wait_fixed

from .retrieval import EmbeddingError

logger = logging.getLogger(__name__)

TAGS = (
    "doctor_review",
    "doctor_statement",
    "meta_report",
    "meta_action",
    "meta_revision",
    "llm_output_variant",
)

ENV_BASE_URL = "COLACARE_LLM_BASE_URL"
ENV_MODEL = "COLACARE_LLM_MODEL"
ENV_API_KEY = "COLACARE_LLM_API_KEY"

MAX_ATTEMPTS = 3
RETRY_WAITS = (0.5, 2.0)


class TransportError(RuntimeError):
    """Raised when an endpoint cannot be reached after all retries."""


class ProtocolError(RuntimeError):
    """Raised when an endpoint answers with an unusable body."""


class ScriptError(ValueError):
    """Raised for malformed scripts or requests no script rule answers."""


class _RetryableError(Exception):
    """Transport failure or 5xx status; retried by the HTTP providers."""


def approx_tokens(text: str) -> int:
    """Provider-agnostic token estimate: ceil(chars / 4)."""
    return math.ceil(len(text) / 4)


@dataclass
class ChatRequest:
    system_prompt: str
    user_prompt: str
    tag: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    conversation_id: str = ""
    role: str = ""

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"Unknown request tag: {self.tag}")
        if not self.system_prompt or not self.user_prompt:
            raise ValueError(f"Empty prompt for tag {self.tag}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    @property
    def prompt_text(self) -> str:
        return self.system_prompt + self.user_prompt

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ChatResponse:
    text: str
    input_tokens: int
    output_tokens: int
    provider_reported: bool = False
    latency_ms: int = 0
    retries: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ChatResponse":
        return cls(**data)


@dataclass
class ProviderConfig:
    """Chat provider selection; HTTP settings fall back to environment variables."""
    kind: str = "scripted"  # scripted | http
    script_path: Optional[str] = None
    base_url: Optional[str] = None
    model: Optional[str] = None
    embedding_model: Optional[str] = None
    timeout: float = 60.0
    max_output_tokens: int = 1024
    price_input_per_million: float = 0.14
    price_output_per_million: float = 0.28

    def __post_init__(self):
        if self.kind not in ("scripted", "http"):
            raise ValueError(f"Unknown provider kind: {self.kind}")
        if self.price_input_per_million < 0 or self.price_output_per_million < 0:
            raise ValueError("Token prices must be nonnegative")

    def resolved_base_url(self) -> str:
        return (self.base_url or os.environ.get(ENV_BASE_URL, "")).rstrip("/")

    def resolved_model(self) -> str:
        return self.model or os.environ.get(ENV_MODEL, "")


class Provider(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> ChatResponse:
        ...


# -- scripted provider ------------------------------------------------------------------------

class ScriptedProvider:
    """
    Replays canned responses.

    A script is a list of ``{"match": {...}, "response": text}`` rules. A rule
    matches when its ``tag`` equals the request tag and every optional key
    agrees: ``role``, ``conversation`` (patient id), ``ordinal`` (how many
    earlier requests with the same conversation, role and tag this provider
    has answered) and ``pattern`` (substring of the prompt). The first
    matching rule in script order wins.
    """

    def __init__(self, rules: Sequence[Mapping[str, Any]], name: str = "scripted"):
        self.name = name
        self._generic: Dict[str, List[Tuple[int, Dict[str, Any]]]] = {}
        self._specific: Dict[Tuple[str, str], List[Tuple[int, Dict[str, Any]]]] = {}
        for position, rule in enumerate(rules):
            match = rule.get("match") if isinstance(rule, Mapping) else None
            if not isinstance(match, Mapping) or "response" not in rule:
                raise ScriptError(f"Rule {position}: needs 'match' and 'response'")
            tag = match.get("tag")
            if tag not in TAGS:
                raise ScriptError(f"Rule {position}: unknown tag {tag!r}")
            entry = (position, {"match": dict(match), "response": str(rule["response"])})
            if "conversation" in match:
                self._specific.setdefault((tag, str(match["conversation"])), []).append(entry)
            else:
                self._generic.setdefault(tag, []).append(entry)
        self.n_rules = len(rules)
        self._ordinals: Dict[Tuple[str, str, str], int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str) -> "ScriptedProvider":
        try:
            with open(path, "r") as f:
                rules = json.load(f)
        except json.JSONDecodeError as e:
            raise ScriptError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(rules, list):
            raise ScriptError(f"{path}: script must be a JSON list of rules")
        logger.info(f"Loaded {len(rules)} script rules from {path}")
        return cls(rules, name=f"scripted:{os.path.basename(path)}")

    def _next_ordinal(self, request: ChatRequest) -> int:
        key = (request.conversation_id, request.role, request.tag)
        with self._lock:
            ordinal = self._ordinals.get(key, 0)
            self._ordinals[key] = ordinal + 1
        return ordinal

    @staticmethod
    def _matches(match: Mapping[str, Any], request: ChatRequest, ordinal: int) -> bool:
        if "role" in match and match["role"] != request.role:
            return False
        if "ordinal" in match and int(match["ordinal"]) != ordinal:
            return False
        if "pattern" in match and match["pattern"] not in request.prompt_text:
            return False
        return True

    def complete(self, request: ChatRequest) -> ChatResponse:
        ordinal = self._next_ordinal(request)
        candidates = heapq.merge(
            self._specific.get((request.tag, request.conversation_id), []),
            self._generic.get(request.tag, []),
            key=lambda entry: entry[0],
        )
        for _, rule in candidates:
            if self._matches(rule["match"], request, ordinal):
                text = rule["response"]
                return ChatResponse(
                    text=text,
                    input_tokens=approx_tokens(request.prompt_text),
                    output_tokens=approx_tokens(text),
                )
        raise ScriptError(
            f"No script rule for tag={request.tag} role={request.role or '-'} "
            f"conversation={request.conversation_id or '-'} ordinal={ordinal}"
        )


# -- HTTP providers ---------------------------------------------------------------------------

class _HttpClient:
    """Shared POST-with-retry plumbing for the chat and embedding clients."""

    def __init__(self, config: ProviderConfig, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self.base_url = config.resolved_base_url()
        self.model = config.resolved_model()
        if not self.base_url or not self.model:
            raise ValueError(f"HTTP provider needs a base URL and model ({ENV_BASE_URL}, {ENV_MODEL})")
        self._api_key = os.environ.get(ENV_API_KEY, "")
        self.session = session or requests.Session()
        self._sleep = sleep

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        return headers

    def _send(self, url: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        try:
            response = self.session.post(url, json=payload, headers=self._headers(), timeout=self.config.timeout)
        except requests.RequestException as e:
            raise _RetryableError(f"{type(e).__name__}: {e}") from e
        if response.status_code >= 500:
            raise _RetryableError(f"HTTP {response.status_code}")
        if response.status_code >= 400:
            raise TransportError(f"{url} answered HTTP {response.status_code}")
        try:
            return response.json()
        except ValueError as e:
            raise ProtocolError(f"{url} returned a non-JSON body") from e

    def _log_retry(self, retry_state):
        logger.warning(
            f"Request to {self.base_url} failed (attempt {retry_state.attempt_number}/{MAX_ATTEMPTS}): "
            f"{retry_state.outcome.exception()}"
        )

    def post(self, path: str, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], int]:
        """POST JSON; returns (body, retries). Transport errors and 5xx are retried twice."""
        url = f"{self.base_url}/{path}"
        attempts = 0
        retrying = Retrying(
            stop=stop_after_attempt(MAX_ATTEMPTS),
            wait=wait_chain(*[wait_fixed(w) for w in RETRY_WAITS]),
            retry=retry_if_exception_type(_RetryableError),
            before_sleep=self._log_retry,
            sleep=self._sleep,
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    attempts += 1
                    body = self._send(url, payload)
        except _RetryableError as e:
            raise TransportError(f"{url} unreachable after {attempts} attempts: {e}") from e
        return body, attempts - 1


class HttpProvider(_HttpClient):
    """
    OpenAI-compatible chat completions client.

    POST {base_url}/chat/completions with {model, messages, temperature,
    max_tokens}; the API key comes from COLACARE_LLM_API_KEY and is only
    ever placed in the Authorization header.
    """

    def __init__(self, config: ProviderConfig, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(config, session=session, sleep=sleep)
        self.name = f"http:{self.model}"
        logger.info(f"HTTP chat provider: endpoint={self.base_url} model={self.model}")

    def complete(self, request: ChatRequest) -> ChatResponse:
        payload = {
            "model": self.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        started = time.perf_counter()
        body, retries = self.post("chat/completions", payload)
        latency_ms = int((time.perf_counter() - started) * 1000)

        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"Chat response for tag {request.tag} lacks choices[0].message.content") from e
        if not isinstance(text, str) or not text:
            raise ProtocolError(f"Empty completion for tag {request.tag}")

        usage = body.get("usage") or {}
        if isinstance(usage.get("prompt_tokens"), int) and isinstance(usage.get("completion_tokens"), int):
            input_tokens, output_tokens, reported = usage["prompt_tokens"], usage["completion_tokens"], True
        else:
            input_tokens, output_tokens, reported = approx_tokens(request.prompt_text), approx_tokens(text), False
        return ChatResponse(text, input_tokens, output_tokens, reported, latency_ms, retries)


class HttpEmbedder(_HttpClient):
    """Embedding endpoint client; POST {base_url}/embeddings, rows L2-normalized."""

    def __init__(self, config: ProviderConfig, dim: int, session: Optional[requests.Session] = None,
                 sleep: Callable[[float], None] = time.sleep):
        super().__init__(config, session=session, sleep=sleep)
        if config.embedding_model:
            self.model = config.embedding_model
        self.dim = dim
        self.name = f"http-embed:{self.model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body, _ = self.post("embeddings", {"model": self.model, "input": list(texts)})
        try:
            rows = sorted(body["data"], key=lambda item: item.get("index", 0))
            vectors = np.array([row["embedding"] for row in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolError("Embedding response lacks data[].embedding") from e
        if vectors.shape != (len(texts), self.dim):
            raise EmbeddingError(f"Expected {len(texts)} embeddings of dimension {self.dim}, got {vectors.shape}")
        norms = np.linalg.norm(vectors, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise EmbeddingError("Endpoint returned a zero embedding")
        return vectors / norms


def make_provider(config: ProviderConfig, session: Optional[requests.Session] = None) -> Provider:
    if config.kind == "http":
        return HttpProvider(config, session=session)
    if not config.script_path:
        raise ValueError("Scripted provider needs a script_path")
    return ScriptedProvider.from_file(config.script_path)


def complete(provider: Provider, request: ChatRequest) -> ChatResponse:
    """Send one request; token counts come from the provider or ceil(chars / 4)."""
    response = provider.complete(request)
    logger.debug(
        f"{request.tag} [{request.conversation_id}/{request.role}] "
        f"in={response.input_tokens} out={response.output_tokens} retries={response.retries}"
    )
    return response


# -- accounting -------------------------------------------------------------------------------

@dataclass
class UsageTotals:
    calls: int = 0
    input_tokens: int = 0
    output_tokens: int = 0

    def add(self, input_tokens: int, output_tokens: int, calls: int = 1):
        self.calls += calls
        self.input_tokens += input_tokens
        self.output_tokens += output_tokens


@dataclass
class CostLedger:
    """Token and call totals per prompt tag and per agent role."""
    price_input_per_million: float = 0.0
    price_output_per_million: float = 0.0
    by_tag: Dict[str, UsageTotals] = field(default_factory=dict)
    by_role: Dict[str, UsageTotals] = field(default_factory=dict)

    def __post_init__(self):
        self._lock = threading.Lock()

    def record(self, role: str, request: ChatRequest, response: ChatResponse) -> "CostLedger":
        with self._lock:
            self.by_tag.setdefault(request.tag, UsageTotals()).add(response.input_tokens, response.output_tokens)
            self.by_role.setdefault(role, UsageTotals()).add(response.input_tokens, response.output_tokens)
        return self

    def merge(self, other: "CostLedger") -> "CostLedger":
        with self._lock:
            for mine, theirs in ((self.by_tag, other.by_tag), (self.by_role, other.by_role)):
                for key, totals in theirs.items():
                    mine.setdefault(key, UsageTotals()).add(totals.input_tokens, totals.output_tokens, totals.calls)
        return self

    @property
    def total(self) -> UsageTotals:
        totals = UsageTotals()
        for usage in self.by_tag.values():
            totals.add(usage.input_tokens, usage.output_tokens, usage.calls)
        return totals

    def averages(self) -> Dict[str, Dict[str, float]]:
        """Per-role mean input/output tokens per call."""
        return {
            role: {
                "avg_input_tokens": usage.input_tokens / usage.calls,
                "avg_output_tokens": usage.output_tokens / usage.calls,
            }
            for role, usage in sorted(self.by_role.items())
            if usage.calls
        }

    def cost(self) -> float:
        total = self.total
        return (total.input_tokens * self.price_input_per_million
                + total.output_tokens * self.price_output_per_million) / 1_000_000

    def cost_per_sample(self, n_samples: int) -> float:
        if n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {n_samples}")
        return self.cost() / n_samples

    def to_dict(self) -> Dict[str, Any]:
        return {
            "price_input_per_million": self.price_input_per_million,
            "price_output_per_million": self.price_output_per_million,
            "by_tag": {k: asdict(v) for k, v in sorted(self.by_tag.items())},
            "by_role": {k: asdict(v) for k, v in sorted(self.by_role.items())},
            "total": asdict(self.total),
            "cost": round(self.cost(), 8),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "CostLedger":
        return cls(
            price_input_per_million=data.get("price_input_per_million", 0.0),
            price_output_per_million=data.get("price_output_per_million", 0.0),
            by_tag={k: UsageTotals(**v) for k, v in data.get("by_tag", {}).items()},
            by_role={k: UsageTotals(**v) for k, v in data.get("by_role", {}).items()},
        )


# -- demo scripts -----------------------------------------------------------------------------

def build_demo_script(records: Sequence[Any], informative_rate: float = 0.9, seed: int = 0,
                      expert_means: Optional[Mapping[str, float]] = None, n_doctors: int = 3,
                      dissent_rate: float = 0.3, noise: float = 0.05) -> List[Dict[str, Any]]:
    """
    Scripted-provider rules for an offline consultation over ``records``.

    For ``informative_rate`` of patients the MetaAgent report states the risk
    matching the label ("high risk" / "low risk"); the rest get a coin flip.
    For ``dissent_rate`` of patients the last doctor disagrees in round 1 and
    the MetaAgent continues once. LLM-output replies are the expert mean plus
    Gaussian noise when ``expert_means`` is given, otherwise 0.5.
    """
    if not 0.0 <= informative_rate <= 1.0:
        raise ValueError(f"informative_rate must be in [0, 1], got {informative_rate}")
    rng = np.random.default_rng(seed)
    rules: List[Dict[str, Any]] = []
    last_doctor = f"doctor_{n_doctors}"
    for record in sorted(records, key=lambda r: r.patient_id):
        pid = record.patient_id
        if rng.random() < informative_rate:
            risk = "high" if record.label == 1 else "low"
        else:
            risk = "high" if rng.random() < 0.5 else "low"
        dissent = n_doctors > 1 and rng.random() < dissent_rate
        mean = float(expert_means[pid]) if expert_means is not None else 0.5
        variant = float(np.clip(mean + rng.normal(0.0, noise), 0.0, 1.0))

        report = {
            "risk": risk,
            "narrative": f"The panel assessment indicates {risk} risk of in-hospital mortality for this patient.",
            "evidence": [],
        }
        for tag in ("meta_report", "meta_revision"):
            rules.append({"match": {"tag": tag, "conversation": pid}, "response": json.dumps(report)})
        if dissent:
            rules.append({
                "match": {"tag": "doctor_statement", "conversation": pid, "role": last_doctor, "ordinal": 0},
                "response": json.dumps({"vote": "disagree",
                                        "reason": "The trend of the leading feature is not reflected in the report.",
                                        "evidence_ids": []}),
            })
            rules.append({
                "match": {"tag": "meta_action", "conversation": pid, "ordinal": 0},
                "response": json.dumps({"action": "continue", "rationale": "A dissent needs to be addressed."}),
            })
        rules.append({"match": {"tag": "llm_output_variant", "conversation": pid}, "response": f"{variant:.4f}"})

    rules.extend([
        {"match": {"tag": "doctor_review"},
         "response": json.dumps({"reason": "The expert model output is consistent with the recorded trends.",
                                 "evidence_ids": []})},
        {"match": {"tag": "doctor_statement"},
         "response": json.dumps({"vote": "agree", "reason": "", "evidence_ids": []})},
        {"match": {"tag": "meta_action"},
         "response": json.dumps({"action": "stop", "rationale": "The panel has converged."})},
    ])
    return rules


def save_script(path: str, rules: Sequence[Mapping[str, Any]]):
    with open(path, "w") as f:
        json.dump(list(rules), f, indent=1)
    logger.info(f"Wrote {len(rules)} script rules to {path}")
