"""
Gateway tests: scripted replay, HTTP retries with a fake session, accounting.
"""

import json
import logging

import numpy as np
import pytest
import requests

from colacare.ehr_data import PatientRecord
from colacare.llm_gateway import (
    ENV_API_KEY,
    ChatRequest,
    ChatResponse,
    CostLedger,
    HttpEmbedder,
    HttpProvider,
    ProtocolError,
    ProviderConfig,
    ScriptedProvider,
    ScriptError,
    TransportError,
    approx_tokens,
    build_demo_script,
    make_provider,
    save_script,
)
from colacare.retrieval import EmbeddingError

SECRET = "sk-test-secret-0000"


class FakeResponse:
    def __init__(self, status_code=200, body=None, raw=None):
        self.status_code = status_code
        self._body = body
        self._raw = raw

    def json(self):
        if self._raw is not None:
            return json.loads(self._raw)
        return self._body


class FakeSession:
    """Plays back a queue of responses or exceptions and records every call."""

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        outcome = self.outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def _request(tag="doctor_review", **kwargs):
    return ChatRequest(system_prompt="You are a doctor.", user_prompt="Review this patient.", tag=tag, **kwargs)


def _chat_body(text="ok", usage=None):
    body = {"choices": [{"message": {"content": text}}]}
    if usage is not None:
        body["usage"] = usage
    return body


@pytest.fixture
def http_config(monkeypatch):
    monkeypatch.setenv(ENV_API_KEY, SECRET)
    return ProviderConfig(kind="http", base_url="http://llm.local/v1/", model="test-model")


# -- requests and tokens ----------------------------------------------------------------------

def test_token_estimate_is_ceil_of_quarter_length():
    assert approx_tokens("") == 0
    assert approx_tokens("abcd") == 1
    assert approx_tokens("abcde") == 2


def test_request_validation():
    with pytest.raises(ValueError):
        _request(tag="small_talk")
    with pytest.raises(ValueError):
        ChatRequest(system_prompt="", user_prompt="x", tag="doctor_review")
    with pytest.raises(ValueError):
        _request(temperature=-0.1)


# -- scripted provider ------------------------------------------------------------------------

def test_first_matching_rule_wins_in_script_order():
    provider = ScriptedProvider([
        {"match": {"tag": "doctor_review", "pattern": "nothing like this"}, "response": "never"},
        {"match": {"tag": "doctor_review", "conversation": "P1"}, "response": "specific"},
        {"match": {"tag": "doctor_review"}, "response": "generic"},
    ])
    assert provider.complete(_request(conversation_id="P1")).text == "specific"
    assert provider.complete(_request(conversation_id="P2")).text == "generic"


def test_ordinals_count_per_conversation_role_and_tag():
    provider = ScriptedProvider([
        {"match": {"tag": "doctor_statement", "role": "doctor_1", "ordinal": 0}, "response": "first"},
        {"match": {"tag": "doctor_statement"}, "response": "later"},
    ])
    ask = lambda conv, role: provider.complete(
        _request(tag="doctor_statement", conversation_id=conv, role=role)).text
    assert ask("A", "doctor_1") == "first"
    assert ask("A", "doctor_1") == "later"
    assert ask("A", "doctor_2") == "later"
    assert ask("B", "doctor_1") == "first"


def test_scripted_tokens_are_estimated():
    provider = ScriptedProvider([{"match": {"tag": "doctor_review"}, "response": "x" * 10}])
    request = _request()
    response = provider.complete(request)
    assert response.input_tokens == approx_tokens(request.prompt_text)
    assert response.output_tokens == 3
    assert not response.provider_reported


def test_unmatched_request_and_bad_rules_raise(tmp_path):
    provider = ScriptedProvider([{"match": {"tag": "meta_report"}, "response": "{}"}])
    with pytest.raises(ScriptError, match="doctor_review"):
        provider.complete(_request())
    with pytest.raises(ScriptError):
        ScriptedProvider([{"match": {"tag": "unknown"}, "response": ""}])
    path = tmp_path / "script.json"
    path.write_text("{not json")
    with pytest.raises(ScriptError):
        ScriptedProvider.from_file(str(path))


def test_make_provider_loads_script_file(tmp_path):
    path = str(tmp_path / "script.json")
    save_script(path, [{"match": {"tag": "doctor_review"}, "response": "hello"}])
    provider = make_provider(ProviderConfig(kind="scripted", script_path=path))
    assert provider.complete(_request()).text == "hello"
    with pytest.raises(ValueError):
        make_provider(ProviderConfig(kind="scripted"))


# -- HTTP provider ----------------------------------------------------------------------------

def test_http_provider_posts_openai_payload(http_config):
    session = FakeSession([FakeResponse(body=_chat_body("fine", {"prompt_tokens": 11, "completion_tokens": 2}))])
    provider = HttpProvider(http_config, session=session, sleep=lambda s: None)
    response = provider.complete(_request(max_output_tokens=64))

    call = session.calls[0]
    assert call["url"] == "http://llm.local/v1/chat/completions"
    assert call["json"]["model"] == "test-model"
    assert call["json"]["max_tokens"] == 64
    assert [m["role"] for m in call["json"]["messages"]] == ["system", "user"]
    assert call["headers"]["Authorization"] == f"Bearer {SECRET}"
    assert (response.text, response.input_tokens, response.output_tokens) == ("fine", 11, 2)
    assert response.provider_reported and response.retries == 0


def test_missing_usage_falls_back_to_estimate(http_config):
    session = FakeSession([FakeResponse(body=_chat_body("abcdefgh"))])
    response = HttpProvider(http_config, session=session).complete(_request())
    assert response.output_tokens == 2
    assert not response.provider_reported


def test_transient_failures_are_retried_with_backoff(http_config, caplog):
    sleeps = []
    session = FakeSession([
        requests.ConnectionError("connection reset"),
        FakeResponse(status_code=503),
        FakeResponse(body=_chat_body("recovered")),
    ])
    provider = HttpProvider(http_config, session=session, sleep=sleeps.append)
    with caplog.at_level(logging.WARNING):
        response = provider.complete(_request())
    assert response.text == "recovered"
    assert response.retries == 2
    assert sleeps == [0.5, 2.0]
    assert SECRET not in caplog.text


def test_retries_are_bounded(http_config, caplog):
    session = FakeSession([FakeResponse(status_code=500)] * 3)
    provider = HttpProvider(http_config, session=session, sleep=lambda s: None)
    with caplog.at_level(logging.DEBUG):
        with pytest.raises(TransportError) as excinfo:
            provider.complete(_request())
    assert len(session.calls) == 3
    assert SECRET not in str(excinfo.value)
    assert SECRET not in caplog.text


def test_client_errors_are_not_retried(http_config):
    session = FakeSession([FakeResponse(status_code=401)])
    with pytest.raises(TransportError):
        HttpProvider(http_config, session=session).complete(_request())
    assert len(session.calls) == 1


def test_malformed_bodies_raise_protocol_errors(http_config):
    session = FakeSession([FakeResponse(raw="<html>"), FakeResponse(body={"choices": []})])
    provider = HttpProvider(http_config, session=session)
    with pytest.raises(ProtocolError):
        provider.complete(_request())
    with pytest.raises(ProtocolError):
        provider.complete(_request())


def test_http_provider_needs_endpoint(monkeypatch):
    monkeypatch.delenv("COLACARE_LLM_BASE_URL", raising=False)
    monkeypatch.delenv("COLACARE_LLM_MODEL", raising=False)
    with pytest.raises(ValueError):
        HttpProvider(ProviderConfig(kind="http"))


def test_http_embedder_normalizes_and_checks_dimension(http_config):
    body = {"data": [{"index": 1, "embedding": [0.0, 2.0]}, {"index": 0, "embedding": [3.0, 4.0]}]}
    session = FakeSession([FakeResponse(body=body), FakeResponse(body=body)])
    embedder = HttpEmbedder(http_config, dim=2, session=session)
    vectors = embedder.embed(["a", "b"])
    assert np.allclose(vectors, [[0.6, 0.8], [0.0, 1.0]])
    assert session.calls[0]["url"].endswith("/embeddings")
    with pytest.raises(EmbeddingError):
        HttpEmbedder(http_config, dim=3, session=session).embed(["a", "b"])


# -- accounting -------------------------------------------------------------------------------

def test_ledger_totals_costs_and_merge():
    ledger = CostLedger(price_input_per_million=0.14, price_output_per_million=0.28)
    ledger.record("doctor_1", _request(), ChatResponse("x", 1000, 200))
    ledger.record("meta", _request(tag="meta_report"), ChatResponse("y", 3000, 800))
    assert ledger.total.calls == 2
    assert ledger.total.input_tokens == 4000
    assert ledger.cost() == pytest.approx((4000 * 0.14 + 1000 * 0.28) / 1e6)
    assert ledger.cost_per_sample(2) == pytest.approx(ledger.cost() / 2)
    assert ledger.averages()["meta"] == {"avg_input_tokens": 3000.0, "avg_output_tokens": 800.0}

    restored = CostLedger.from_dict(json.loads(json.dumps(ledger.to_dict())))
    merged = CostLedger().merge(ledger).merge(restored)
    assert merged.by_role["doctor_1"].calls == 2
    assert merged.by_tag["meta_report"].output_tokens == 1600
    with pytest.raises(ValueError):
        ledger.cost_per_sample(0)


def test_demo_script_carries_label_signal():
    records = [PatientRecord(f"P{i}", {}, np.zeros((1, 1)), np.ones((1, 1)), i % 2) for i in range(40)]
    rules = build_demo_script(records, informative_rate=1.0, seed=0, dissent_rate=0.0)
    reports = {r["match"]["conversation"]: json.loads(r["response"])["risk"]
               for r in rules if r["match"]["tag"] == "meta_report"}
    assert all(reports[r.patient_id] == ("high" if r.label else "low") for r in records)

    variants = [float(r["response"]) for r in rules if r["match"]["tag"] == "llm_output_variant"]
    assert len(variants) == 40 and all(0.0 <= v <= 1.0 for v in variants)
    assert rules == build_demo_script(records, informative_rate=1.0, seed=0, dissent_rate=0.0)
