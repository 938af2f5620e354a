import math
import threading

import pytest
import requests
from hypothesis import given, strategies as st

from manner_align.backends import (
    BackendDescriptor,
    BackendRefusal,
    ContextOverflow,
    ReferenceBackend,
    ReferenceModel,
    RemoteChatBackend,
    RetryPolicy,
    SamplingConfig,
    ScoringUnsupported,
    TokenizationMismatch,
    TransportError,
)
from manner_align.prompts import PromptForge, RenderedPrompt, RewriteVariant


@pytest.fixture(scope="module")
def backend():
    return ReferenceBackend()


@pytest.fixture(scope="module")
def forge():
    return PromptForge()


# ── stylizer ─────────────────────────────────────────────────────────────────

def test_stylize_synonyms_and_template(backend):
    assert (
        backend.reference_stylize("The colour of the automobile is red.")
        == "The car's color is red."
    )


def test_stylize_idempotent_fixed(backend):
    for text in [
        "The car's color is red.",
        "The colour of the automobile is red.",
        "A feline sat on the mat.",
        "Already plain text with no matches.",
    ]:
        once = backend.reference_stylize(text)
        assert backend.reference_stylize(once) == once


def test_stylize_empty(backend):
    assert backend.reference_stylize("") == ""


@given(st.lists(st.sampled_from(
    ["The", "the", "colour", "automobile", "cat", "is", "red", "of", "grey", "favourite"]
), min_size=1, max_size=8))
def test_stylize_idempotent_property(words):
    backend = ReferenceBackend()
    text = " ".join(words) + "."
    once = backend.reference_stylize(text)
    assert backend.reference_stylize(once) == once


def test_stylize_preserves_capitalization(backend):
    assert backend.reference_stylize("Colour matters.") == "Color matters."


# ── review rule ──────────────────────────────────────────────────────────────

def test_review_accepts_content_preserving(backend):
    assert backend.review_accepts(
        "The colour of the automobile is red.", "The car's color is red."
    )


def test_review_rejects_content_change(backend):
    assert not backend.review_accepts(
        "The colour of the automobile is red.", "The car's color is blue."
    )
    assert not backend.review_accepts("A red cat.", "A red cat on a mat.")


# ── complete ─────────────────────────────────────────────────────────────────

def test_complete_rewrite(backend, forge):
    prompt = forge.render_rewrite_prompt(
        RewriteVariant.NO1, "What color?", "The colour of the automobile is red."
    )
    assert backend.complete(prompt, SamplingConfig.rewrite_default()) == (
        "Revised Answer: The car's color is red.\nExplanation: Reworded to match my style."
    )


def test_complete_review_accepts(backend, forge):
    prompt = forge.render_review_prompt(
        "What color?", "The colour of the automobile is red.", "The car's color is red."
    )
    response = backend.complete(prompt, SamplingConfig.greedy())
    assert "The Revised Answer is fine" in response


def test_complete_review_rejects(backend, forge):
    prompt = forge.render_review_prompt(
        "What color?", "The colour of the automobile is red.", "The car's color is blue."
    )
    response = backend.complete(prompt, SamplingConfig.greedy())
    assert "The Revised Answer is fine" not in response


def test_complete_context_overflow(backend, forge):
    prompt = forge.render_rewrite_prompt(RewriteVariant.NO1, "q " * 50, "a " * 200)
    with pytest.raises(ContextOverflow):
        backend.complete(prompt, SamplingConfig(max_length=100))


def test_complete_deterministic_across_threads(backend, forge):
    prompt = forge.render_rewrite_prompt(
        RewriteVariant.NO1, "What?", "My favourite animal is the canine."
    )
    results = []
    def worker():
        results.append(backend.complete(prompt, SamplingConfig.rewrite_default()))
    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(set(results)) == 1


# ── scoring ──────────────────────────────────────────────────────────────────

def uniform4_model() -> ReferenceModel:
    words = ["w1", "w2", "w3", "w4"]
    lines = [f"BIGRAM <s> {w} 0.25" for w in words]
    lines += [f"BIGRAM {a} {b} 0.25" for a in words for b in words]
    return ReferenceModel.from_text("\n".join(lines))


def test_uniform_scoring():
    backend = ReferenceBackend(uniform4_model())
    tokens = backend.score_tokens("", "w1 w3 w2")
    assert len(tokens) == 3
    for token in tokens:
        assert token.logprob == pytest.approx(math.log(0.25))


def test_bigram_probability_lookup():
    model = ReferenceModel.from_text(
        "BIGRAM <s> color 1.0\nBIGRAM color is 1.0\nBIGRAM is red 0.5\nBIGRAM red is 1.0"
    )
    backend = ReferenceBackend(model)
    tokens = backend.score_tokens("the wall color", "is red")
    assert tokens[0].logprob == pytest.approx(0.0)  # P(is | color) = 1
    assert tokens[1].logprob == pytest.approx(math.log(0.5))


def test_tiling_reconstructs_continuation():
    backend = ReferenceBackend(uniform4_model())
    continuation = "w1  w2\tw3 "
    tokens = backend.score_tokens("", continuation)
    assert "".join(t.token_text for t in tokens) == continuation


def test_out_of_vocabulary_errors():
    backend = ReferenceBackend(uniform4_model())
    with pytest.raises(TokenizationMismatch):
        backend.score_tokens("", "w1 nope w2")


def test_zero_probability_transition_errors():
    model = ReferenceModel.from_text("BIGRAM <s> a 1.0\nBIGRAM a b 1.0\nBIGRAM b a 1.0")
    backend = ReferenceBackend(model)
    with pytest.raises(TokenizationMismatch):
        backend.score_tokens("", "a a")  # (a, a) not in table, no smoothing


def test_smoothing_covers_unseen_transitions():
    model = ReferenceModel.from_text(
        "SMOOTH 0.1\nBIGRAM <s> a 1.0\nBIGRAM a b 1.0\nBIGRAM b a 1.0"
    )
    backend = ReferenceBackend(model)
    tokens = backend.score_tokens("", "a a")
    expected = math.log((0.0 + 0.1) / (1.0 + 0.1 * 2))
    assert tokens[1].logprob == pytest.approx(expected)


def test_closed_form_perplexity_cross_check():
    # exp(mean of -logprobs) must equal the product-form perplexity
    backend = ReferenceBackend(ReferenceModel.from_text(
        "BIGRAM <s> a 0.5\nBIGRAM a b 0.25\nBIGRAM b a 0.125"
    ))
    tokens = backend.score_tokens("", "a b a")
    mean_form = math.exp(sum(-t.logprob for t in tokens) / len(tokens))
    product_form = (0.5 * 0.25 * 0.125) ** (-1.0 / 3.0)
    assert mean_form == pytest.approx(product_form, rel=1e-12)


def test_model_table_validation():
    with pytest.raises(ValueError):
        ReferenceModel.from_text("BIGRAM a b")  # wrong arity
    with pytest.raises(ValueError):
        ReferenceModel.from_text("SYNONYM a b\nSYNONYM b c")  # chained synonyms


# ── descriptor & remote backend ──────────────────────────────────────────────

def test_descriptor_invariants():
    with pytest.raises(ValueError):
        BackendDescriptor("remote", "m")  # endpoint required
    with pytest.raises(ValueError):
        BackendDescriptor("reference", "m", endpoint="http://x")  # forbidden


class FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload or {}
        self.text = text

    def json(self):
        return self._payload


class FakeSession:
    """Scripted responses; an entry may be an exception instance."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers})
        item = self.script.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def remote(session, max_attempts=3):
    descriptor = BackendDescriptor(
        "remote", "test-model", "http://backend.test/v1/chat",
        RetryPolicy(max_attempts=max_attempts, base_backoff=0.01),
    )
    return RemoteChatBackend(descriptor, session=session, sleep=lambda s: None)


def chat_ok(content):
    return FakeResponse(200, {"choices": [{"message": {"content": content}}]})


def test_remote_success_payload():
    session = FakeSession([chat_ok("hello")])
    out = remote(session).complete(RenderedPrompt("hi"), SamplingConfig.rewrite_default())
    assert out == "hello"
    payload = session.requests[0]["json"]
    assert payload["messages"] == [{"role": "user", "content": "hi"}]
    assert payload["temperature"] == 0.4
    assert payload["top_p"] == 0.6
    assert payload["top_k"] == 5
    assert payload["max_tokens"] == 2048


def test_remote_greedy_payload():
    session = FakeSession([chat_ok("ok")])
    remote(session).complete(RenderedPrompt("hi"), SamplingConfig.greedy())
    payload = session.requests[0]["json"]
    assert payload["temperature"] == 0.0
    assert payload["top_k"] == 1


def test_remote_retries_then_succeeds():
    session = FakeSession([
        requests.ConnectionError("down"),
        requests.ConnectionError("down"),
        chat_ok("finally"),
    ])
    out = remote(session, max_attempts=3).complete(
        RenderedPrompt("hi"), SamplingConfig.rewrite_default()
    )
    assert out == "finally"
    assert len(session.requests) == 3


def test_remote_exhausts_retries():
    session = FakeSession([requests.ConnectionError("down")] * 3)
    with pytest.raises(TransportError) as excinfo:
        remote(session, max_attempts=3).complete(
            RenderedPrompt("hi"), SamplingConfig.rewrite_default()
        )
    assert excinfo.value.attempts == 3


def test_remote_refusal_no_retry():
    session = FakeSession([FakeResponse(400, text="bad request")])
    with pytest.raises(BackendRefusal):
        remote(session).complete(RenderedPrompt("hi"), SamplingConfig.rewrite_default())
    assert len(session.requests) == 1


def test_remote_5xx_retried():
    session = FakeSession([FakeResponse(500), FakeResponse(502), FakeResponse(503)])
    with pytest.raises(TransportError):
        remote(session).complete(RenderedPrompt("hi"), SamplingConfig.rewrite_default())
    assert len(session.requests) == 3


def test_remote_scoring_echo():
    session = FakeSession([FakeResponse(200, {
        "choices": [{"logprobs": {
            "tokens": ["ctx", " ans", "wer"],
            "token_logprobs": [None, -1.0, -2.0],
            "text_offset": [0, 3, 7],
        }}],
    })])
    tokens = remote(session).score_tokens("ctx", " answer")
    assert [t.token_text for t in tokens] == [" ans", "wer"]
    assert [t.logprob for t in tokens] == [-1.0, -2.0]


def test_remote_scoring_unsupported():
    session = FakeSession([chat_ok("no logprobs here")])
    with pytest.raises(ScoringUnsupported):
        remote(session).score_tokens("ctx", "tail")


def test_auth_token_header(monkeypatch):
    monkeypatch.setenv("MANNER_ALIGN_BACKEND_TOKEN", "sekrit")
    session = FakeSession([chat_ok("ok")])
    remote(session).complete(RenderedPrompt("hi"), SamplingConfig.rewrite_default())
    assert session.requests[0]["headers"]["Authorization"] == "Bearer sekrit"
