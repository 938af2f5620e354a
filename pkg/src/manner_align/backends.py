"""Text-generation and token-scoring backends.

Two implementations share one interface: a remote HTTP chat-completion
backend, and an in-process reference backend whose behavior (a synonym/
template stylizer, a content-word review rule, and an explicit bigram
language model) is fully determined by a human-readable table file, so
every pipeline output can be checked by hand.
"""

from __future__ import annotations

import math
import os
import re
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Set, Tuple

import requests

from .prompts import RenderedPrompt


# ── configs and errors ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class SamplingConfig:
    temperature: float = 0.4
    top_p: float = 0.6
    top_k: Optional[int] = 5
    max_length: int = 2048
    sampling_enabled: bool = True

    @staticmethod
    def rewrite_default() -> "SamplingConfig":
        return SamplingConfig(temperature=0.4, top_p=0.6, top_k=5, max_length=2048)

    @staticmethod
    def rewrite_low_temp() -> "SamplingConfig":
        return SamplingConfig(temperature=0.2, top_p=0.6, top_k=5, max_length=2048)

    @staticmethod
    def greedy(max_length: int = 2048) -> "SamplingConfig":
        # sampling disabled for the review stage
        return SamplingConfig(
            temperature=0.0, top_p=1.0, top_k=1, max_length=max_length,
            sampling_enabled=False,
        )


@dataclass(frozen=True)
class ScoredToken:
    token_text: str
    logprob: float  # finite, <= 0


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 3
    base_backoff: float = 0.5  # seconds, doubled per attempt


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "remote" | "reference"
    model_name: str
    endpoint: Optional[str] = None
    retry_policy: RetryPolicy = field(default_factory=RetryPolicy)

    def __post_init__(self):
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote backend requires an endpoint")
        if self.kind == "reference" and self.endpoint:
            raise ValueError("reference backend takes no endpoint")


class BackendFailure(Exception):
    """Base class for backend errors; carries the attempt count."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class TransportError(BackendFailure):
    pass


class ContextOverflow(BackendFailure):
    pass


class BackendRefusal(BackendFailure):
    pass


class ScoringUnsupported(BackendFailure):
    pass


class TokenizationMismatch(BackendFailure):
    pass


REVIEW_ACCEPT_SENTENCE = "The Revised Answer is fine"


# ── reference backend ────────────────────────────────────────────────────────

_PUNCT = ".,!?;:'\"()[]"
_START = "<s>"

# "the X of the Y is Z" -> "the Y's X is Z"
_OF_TEMPLATE = re.compile(r"\b([Tt]he) (\w+) of the (\w+) (is|was|are|were)\b")


@dataclass
class ReferenceModel:
    """Parsed table file: bigram probabilities, synonym map, stopwords."""

    bigrams: Dict[Tuple[str, str], float]
    synonyms: Dict[str, str]
    stopwords: Set[str]
    smoothing: float = 0.0  # Laplace-style mix weight; 0 disables

    @property
    def vocab(self) -> Set[str]:
        words = set()
        for w1, w2 in self.bigrams:
            if w1 != _START:
                words.add(w1)
            words.add(w2)
        return words

    @staticmethod
    def from_text(text: str) -> "ReferenceModel":
        bigrams: Dict[Tuple[str, str], float] = {}
        synonyms: Dict[str, str] = {}
        stopwords: Set[str] = set()
        smoothing = 0.0
        for line_no, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "BIGRAM" and len(parts) == 4:
                bigrams[(parts[1], parts[2])] = float(parts[3])
            elif kind == "SYNONYM" and len(parts) == 3:
                synonyms[parts[1]] = parts[2]
            elif kind == "STOPWORD" and len(parts) == 2:
                stopwords.add(parts[1])
            elif kind == "SMOOTH" and len(parts) == 2:
                smoothing = float(parts[1])
            else:
                raise ValueError(f"reference model line {line_no}: cannot parse {line!r}")
        for target in synonyms.values():
            if target in synonyms:
                raise ValueError(f"synonym target {target!r} is itself a synonym key")
        return ReferenceModel(bigrams, synonyms, stopwords, smoothing)

    @staticmethod
    def from_file(path: Path) -> "ReferenceModel":
        return ReferenceModel.from_text(path.read_text(encoding="utf-8"))

    @staticmethod
    def default() -> "ReferenceModel":
        text = (
            resources.files("manner_align")
            .joinpath("assets", "reference_model.txt")
            .read_text(encoding="utf-8")
        )
        return ReferenceModel.from_text(text)


def _normalize_word(word: str) -> str:
    word = word.strip().strip(_PUNCT).lower()
    if word.endswith("'s"):
        word = word[:-2]
    return word


class ReferenceBackend:
    """Deterministic in-process backend used as the pipeline's test oracle.

    Rewrite prompts are answered by the stylizer; review prompts by the
    content-word-multiset rule; token scoring uses the bigram table.
    """

    kind = "reference"

    def __init__(self, model: Optional[ReferenceModel] = None, name: str = "reference"):
        self.model = model or ReferenceModel.default()
        self.name = name

    # -- stylizer ------------------------------------------------------------

    def _map_word(self, token: str) -> str:
        core = token.strip(_PUNCT)
        if not core:
            return token
        replacement = self.model.synonyms.get(core.lower())
        if replacement is None:
            return token
        if core[0].isupper():
            replacement = replacement.capitalize()
        start = token.index(core)
        return token[:start] + replacement + token[start + len(core):]

    def reference_stylize(self, answer: str) -> str:
        """Apply the synonym map word-by-word, then normalize 'the X of the Y is'."""
        if not answer:
            return answer
        words = answer.split(" ")
        text = " ".join(self._map_word(w) for w in words)
        text = _OF_TEMPLATE.sub(lambda m: f"{m.group(1)} {m.group(3)}'s {m.group(2)} {m.group(4)}", text)
        return text

    # -- review rule ---------------------------------------------------------

    def _content_words(self, text: str) -> List[str]:
        words = []
        for raw in text.split():
            word = _normalize_word(raw)
            if not word or word in self.model.stopwords:
                continue
            words.append(self.model.synonyms.get(word, word))
        return sorted(words)

    def review_accepts(self, original: str, revised: str) -> bool:
        return self._content_words(original) == self._content_words(revised)

    # -- generation ----------------------------------------------------------

    def complete(self, prompt: RenderedPrompt, config: SamplingConfig) -> str:
        text = prompt.text
        if len(text.split()) > config.max_length:
            raise ContextOverflow("prompt exceeds max_length token budget")
        if "\nOriginal Answer: " in text and "\nRevised Answer: " in text:
            head, _, revised = text.rpartition("\nRevised Answer: ")
            _, _, original = head.rpartition("\nOriginal Answer: ")
            if self.review_accepts(original, revised):
                return REVIEW_ACCEPT_SENTENCE + "."
            return "The revision changes the content of the answer."
        if "\nAnswer: " in text:
            _, _, answer = text.rpartition("\nAnswer: ")
            styled = self.reference_stylize(answer)
            return f"Revised Answer: {styled}\nExplanation: Reworded to match my style."
        raise BackendRefusal("reference backend cannot interpret this prompt")

    # -- scoring -------------------------------------------------------------

    def _tile(self, continuation: str) -> List[str]:
        pieces = re.findall(r"\s*\S+", continuation)
        if not pieces:
            raise TokenizationMismatch("continuation has no tokens")
        tail = continuation[sum(len(p) for p in pieces):]
        if tail:
            pieces[-1] += tail
        return pieces

    def _transition_logprob(self, prev: str, word: str) -> float:
        model = self.model
        vocab = model.vocab
        if word not in vocab:
            raise TokenizationMismatch(f"out-of-vocabulary word {word!r}")
        p = model.bigrams.get((prev, word), 0.0)
        if model.smoothing > 0.0:
            p = (p + model.smoothing) / (1.0 + model.smoothing * len(vocab))
        if p <= 0.0:
            raise TokenizationMismatch(f"zero-probability transition {prev!r} -> {word!r}")
        return math.log(p)

    def score_tokens(self, context: str, continuation: str) -> List[ScoredToken]:
        pieces = self._tile(continuation)
        vocab = self.model.vocab
        context_words = [_normalize_word(w) for w in context.split()]
        prev = context_words[-1] if context_words and context_words[-1] in vocab else _START
        scored: List[ScoredToken] = []
        for piece in pieces:
            word = _normalize_word(piece)
            scored.append(ScoredToken(piece, self._transition_logprob(prev, word)))
            prev = word
        return scored


# ── remote backend ───────────────────────────────────────────────────────────

AUTH_TOKEN_ENV = "MANNER_ALIGN_BACKEND_TOKEN"


class RemoteChatBackend:
    """HTTP JSON chat-completion client with bounded retries and backoff."""

    kind = "remote"

    def __init__(
        self,
        descriptor: BackendDescriptor,
        session: Optional[requests.Session] = None,
        timeout: float = 60.0,
        sleep=time.sleep,
    ):
        if descriptor.kind != "remote":
            raise ValueError("RemoteChatBackend requires a remote descriptor")
        self.descriptor = descriptor
        self.name = descriptor.model_name
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep

    def _headers(self) -> Dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(AUTH_TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _post(self, payload: dict) -> dict:
        policy = self.descriptor.retry_policy
        last_error: Optional[str] = None
        for attempt in range(1, policy.max_attempts + 1):
            try:
                resp = self._session.post(
                    self.descriptor.endpoint,
                    json=payload,
                    headers=self._headers(),
                    timeout=self.timeout,
                )
            except requests.RequestException as exc:
                last_error = str(exc)
            else:
                if resp.status_code == 200:
                    return resp.json()
                if 400 <= resp.status_code < 500:
                    raise BackendRefusal(
                        f"backend refused ({resp.status_code}): {resp.text[:200]}",
                        attempts=attempt,
                    )
                last_error = f"HTTP {resp.status_code}"
            if attempt < policy.max_attempts:
                self._sleep(policy.base_backoff * (2 ** (attempt - 1)))
        raise TransportError(
            f"giving up after {policy.max_attempts} attempts: {last_error}",
            attempts=policy.max_attempts,
        )

    def complete(self, prompt: RenderedPrompt, config: SamplingConfig) -> str:
        payload = {
            "model": self.descriptor.model_name,
            "messages": [{"role": "user", "content": prompt.text}],
            "max_tokens": config.max_length,
        }
        if config.sampling_enabled:
            payload["temperature"] = config.temperature
            payload["top_p"] = config.top_p
            if config.top_k is not None:
                payload["top_k"] = config.top_k
        else:
            payload["temperature"] = 0.0
            payload["top_k"] = 1
        data = self._post(payload)
        try:
            return data["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendRefusal(f"unexpected response shape: {exc}")

    def score_tokens(self, context: str, continuation: str) -> List[ScoredToken]:
        payload = {
            "model": self.descriptor.model_name,
            "prompt": context + continuation,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        data = self._post(payload)
        try:
            lp = data["choices"][0]["logprobs"]
            tokens: List[str] = lp["tokens"]
            logprobs: List[Optional[float]] = lp["token_logprobs"]
            offsets: List[int] = lp["text_offset"]
        except (KeyError, IndexError, TypeError):
            raise ScoringUnsupported("endpoint does not echo token logprobs")
        start = len(context)
        scored: List[ScoredToken] = []
        for token, logprob, offset in zip(tokens, logprobs, offsets):
            if offset < start:
                continue
            if logprob is None:
                raise ScoringUnsupported("missing logprob for continuation token")
            scored.append(ScoredToken(token, float(logprob)))
        if "".join(t.token_text for t in scored) != continuation:
            raise TokenizationMismatch("echoed tokens do not tile the continuation")
        return scored


def build_backend(descriptor: BackendDescriptor, model_path: Optional[Path] = None):
    if descriptor.kind == "reference":
        model = ReferenceModel.from_file(model_path) if model_path else ReferenceModel.default()
        return ReferenceBackend(model, name=descriptor.model_name or "reference")
    return RemoteChatBackend(descriptor)
