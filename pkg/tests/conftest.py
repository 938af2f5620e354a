"""Shared fixtures: synthetic corpora, reference model tables, and
deterministic fault-injection backends."""

from __future__ import annotations

import hashlib
import json
from typing import List, Optional

import pytest

from manner_align.backends import ReferenceBackend, ReferenceModel, TransportError
from manner_align.corpus import InstructionRecord, parse_dataset, parse_tag_map

# Answers chosen so the reference stylizer has real work to do on some of
# them and leaves others untouched.
STYLABLE_ANSWERS = [
    "The colour of the automobile is red.",
    "The colour of the feline is blue.",
    "The automobile is parked near a grey wall.",
    "My favourite animal is the canine.",
]
STABLE_ANSWERS = [
    "The car's color is red.",
    "A small dog sits on the mat.",
    "There are three people in the image.",
]


def make_record(
    rec_id: str,
    qa_pairs: List[tuple],
    image: Optional[str] = "img.jpg",
    source: str = "llava_complex",
) -> dict:
    conversations = []
    for question, answer in qa_pairs:
        conversations.append({"from": "human", "value": question})
        conversations.append({"from": "gpt", "value": answer})
    obj = {"id": rec_id, "conversations": conversations}
    if image is not None:
        obj["image"] = image
    if source:
        obj["source"] = source
    return obj


def make_soft_corpus(n_records: int, rounds_per_record: int = 2) -> List[InstructionRecord]:
    answers = STYLABLE_ANSWERS + STABLE_ANSWERS
    objs = []
    for i in range(n_records):
        pairs = [
            (f"What is shown in view {i}.{j}?", answers[(i * rounds_per_record + j) % len(answers)])
            for j in range(rounds_per_record)
        ]
        objs.append(make_record(f"rec{i:04d}", pairs))
    return parse_dataset(json.dumps(objs))


TAG_MAP_TEXT = """\
llava_conv = soft
llava_detail = soft
llava_complex = soft
vqav2 = word_phrase
gqa = word_phrase
okvqa = word_phrase
ocrvqa = word_phrase
a_okvqa = choice
textcaps = short_caption
refcoco = grounding
vg = grounding
sharegpt = text_only
"""

# Per-source record counts at 1/1000 of the full trainset composition.
MINI_CORPUS_SCALE = {
    "llava_conv": 58,
    "llava_detail": 23,
    "llava_complex": 77,
    "vqav2": 83,
    "gqa": 72,
    "okvqa": 9,
    "ocrvqa": 80,
    "a_okvqa": 50,
    "textcaps": 22,
    "refcoco": 30,
    "vg": 86,
    "sharegpt": 40,
}

SOFT_TAGS = {"llava_conv", "llava_detail", "llava_complex"}
TEXT_ONLY_TAGS = {"sharegpt"}


@pytest.fixture
def tag_map():
    return parse_tag_map(TAG_MAP_TEXT)


def mini_corpus_files(dir_path) -> List[str]:
    """Write the 12-file scaled mini-corpus; returns the file paths."""
    paths = []
    for tag, count in MINI_CORPUS_SCALE.items():
        objs = []
        for i in range(count):
            rec_id = f"{tag}-{i:04d}"
            if tag in SOFT_TAGS:
                pairs = [
                    (f"Describe scene {i}.", STYLABLE_ANSWERS[i % len(STYLABLE_ANSWERS)]),
                    (f"Anything else about {i}?", STABLE_ANSWERS[i % len(STABLE_ANSWERS)]),
                ]
                objs.append(make_record(rec_id, pairs, source=tag))
            elif tag in TEXT_ONLY_TAGS:
                objs.append(make_record(rec_id, [("Tell me a fact.", "Water is wet.")],
                                        image=None, source=tag))
            elif tag == "a_okvqa":
                objs.append(make_record(rec_id, [("Which option?", "B")], source=tag))
            elif tag in ("refcoco", "vg"):
                objs.append(make_record(rec_id, [("Where is it?", "[0.1, 0.2, 0.3, 0.4]")],
                                        source=tag))
            else:
                objs.append(make_record(rec_id, [("What is this?", "a cat")], source=tag))
        path = dir_path / f"{tag}.json"
        path.write_text(json.dumps(objs), encoding="utf-8")
        paths.append(str(path))
    return paths


# ── bigram table fit to the stylized form of the corpus answers ──────────────

GAP_MODEL_TEXT = """\
SYNONYM colour color
SYNONYM automobile car
SYNONYM feline cat
STOPWORD the
STOPWORD of
STOPWORD is
BIGRAM <s> the 0.9
BIGRAM the car 0.45
BIGRAM the cat 0.45
BIGRAM car color 0.9
BIGRAM cat color 0.9
BIGRAM color is 0.9
BIGRAM is red 0.45
BIGRAM is blue 0.45
BIGRAM the colour 0.04
BIGRAM colour of 0.1
BIGRAM of the 0.9
BIGRAM the automobile 0.03
BIGRAM the feline 0.03
BIGRAM automobile is 0.1
BIGRAM feline is 0.1
"""


@pytest.fixture
def gap_backend():
    return ReferenceBackend(ReferenceModel.from_text(GAP_MODEL_TEXT), name="gap-ref")


# ── deterministic fault injection ────────────────────────────────────────────

PARSE_GARBAGE = "Sure! Here's a better answer."
CONTENT_CHANGE = (
    "Revised Answer: This reply describes a completely different scene instead.\n"
    "Explanation: changed on purpose."
)


class FaultyBackend:
    """Wraps the reference backend; injects failures on rewrite prompts with
    per-prompt deterministic pseudo-randomness (stable across thread orders)."""

    def __init__(self, inner: ReferenceBackend, seed: int = 0,
                 transport_rate: float = 0.0, parse_rate: float = 0.0,
                 reject_rate: float = 0.0):
        self.inner = inner
        self.name = f"faulty-{inner.name}"
        self.seed = seed
        self.transport_rate = transport_rate
        self.parse_rate = parse_rate
        self.reject_rate = reject_rate

    def _uniform(self, text: str) -> float:
        digest = hashlib.sha256(f"{self.seed}:{text}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2**64

    def complete(self, prompt, config):
        is_review = "\nOriginal Answer: " in prompt.text
        if not is_review:
            u = self._uniform(prompt.text)
            if u < self.transport_rate:
                raise TransportError("injected transport failure", attempts=3)
            if u < self.transport_rate + self.parse_rate:
                return PARSE_GARBAGE
            if u < self.transport_rate + self.parse_rate + self.reject_rate:
                return CONTENT_CHANGE
        return self.inner.complete(prompt, config)

    def score_tokens(self, context, continuation):
        return self.inner.score_tokens(context, continuation)
