"""Perplexity-based indicator of the writing-manner gap.

Scores the answer side of an evaluation split under a token-scoring
backend and aggregates per-token (not per-round), so short answers are
not overweighted. Lower corpus perplexity means the corpus manner is
closer to the scoring model's own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Mapping, Optional, Tuple

from .backends import ScoredToken
from .corpus import FormatClass, InstructionRecord, QARound, classify_format, split_rounds

# Conversation serialization used as the scoring context; PPL is
# template-sensitive, so the template is pinned and recorded in reports.
CONTEXT_TEMPLATE = "USER: {question}\nASSISTANT: "


@dataclass(frozen=True)
class TokenSequence:
    tokens: Tuple[ScoredToken, ...]
    source: Tuple[str, int]  # (record_id, round_index)

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("token sequence must be non-empty")


@dataclass(frozen=True)
class SplitSpec:
    """Evaluation split taken from the corpus tail; the rest is the training side."""

    eval_count: int

    def eval_slice(self, records: List[InstructionRecord]) -> List[InstructionRecord]:
        if self.eval_count <= 0:
            raise ValueError("eval_count must be positive")
        if self.eval_count > len(records):
            raise ValueError(
                f"eval_count {self.eval_count} exceeds corpus size {len(records)}"
            )
        return records[len(records) - self.eval_count:]


@dataclass(frozen=True)
class PplReport:
    backend_name: str
    eval_count: int
    token_total: int
    corpus_ppl: float
    per_round_ppl: List[Tuple[Tuple[str, int], float]]
    context_template: str = CONTEXT_TEMPLATE
    note: str = "direct-PPL variant: answer-conditional perplexity under the given backend"

    def to_json_obj(self) -> dict:
        return {
            "backend_name": self.backend_name,
            "eval_count": self.eval_count,
            "token_total": self.token_total,
            "corpus_ppl": self.corpus_ppl,
            "context_template": self.context_template,
            "note": self.note,
            "per_round": [
                {"record_id": rid, "round_index": ri, "ppl": value}
                for (rid, ri), value in self.per_round_ppl
            ],
        }


def sequence_ppl(seq: TokenSequence) -> float:
    """exp of the negative mean token log-likelihood."""
    total = sum(t.logprob for t in seq.tokens)
    return math.exp(-total / len(seq.tokens))


def score_answer(round: QARound, backend) -> TokenSequence:
    context = CONTEXT_TEMPLATE.format(question=round.question)
    tokens = backend.score_tokens(context, round.answer)
    return TokenSequence(tuple(tokens), (round.record_id, round.round_index))


def answer_ppl(round: QARound, backend) -> float:
    return sequence_ppl(score_answer(round, backend))


def corpus_gap_report(
    records: List[InstructionRecord],
    backend,
    split: SplitSpec,
    tag_map: Optional[Mapping[str, FormatClass]] = None,
) -> PplReport:
    """Score every round of the evaluation tail; any scoring error aborts
    the report (a partial perplexity is meaningless).

    With ``tag_map`` given, non-soft records in the tail are skipped;
    without it the records are assumed to be soft-format already.
    """
    eval_records = split.eval_slice(records)
    per_round: List[Tuple[Tuple[str, int], float]] = []
    total_logprob = 0.0
    token_total = 0
    for rec in eval_records:
        if tag_map is not None and not classify_format(rec, tag_map).is_soft:
            continue
        for round in split_rounds(rec):
            seq = score_answer(round, backend)
            per_round.append((seq.source, sequence_ppl(seq)))
            total_logprob += sum(t.logprob for t in seq.tokens)
            token_total += len(seq.tokens)
    if token_total == 0:
        raise ValueError("evaluation split contains no scorable rounds")
    return PplReport(
        backend_name=getattr(backend, "name", "?"),
        eval_count=split.eval_count,
        token_total=token_total,
        corpus_ppl=math.exp(-total_logprob / token_total),
        per_round_ppl=per_round,
    )
