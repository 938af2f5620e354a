"""Two-stage rewrite/review alignment over a corpus.

Each soft-format question/answer round is rewritten by the backend, the
response is post-processed, the candidate is reviewed under greedy
decoding, and the original answer is kept unless the revision passes
review. Hard-format and text-only records pass through untouched.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple

from .backends import BackendFailure, REVIEW_ACCEPT_SENTENCE, SamplingConfig
from .corpus import FormatClass, InstructionRecord, QARound, classify_format, reassemble, serialize_dataset, split_rounds
from .prompts import EmptyField, PromptForge, RewriteVariant


class RewriteStatus(Enum):
    SUCCESS = "success"
    PARSE_FAILURE = "parse_failure"
    SENSITIVE_WORD_FAILURE = "sensitive_word_failure"
    BACKEND_ERROR = "backend_error"


class ReviewStatus(Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"
    BACKEND_ERROR = "backend_error"


SENSITIVE_WORDS = (
    "revised answer",
    "original answer",
    "revision",
    "semantic meaning",
    "Question",
)

_REVISED_MARKER = "Revised Answer:"
_EXPLANATION_MARKERS = ("Explanations:", "Explanation:")


def post_process_rewrite(
    response_text: str, strict_case: bool = False
) -> Tuple[Optional[str], RewriteStatus]:
    """Extract the candidate answer between the response markers and screen it.

    With ``strict_case`` the sensitive words must match exactly as listed;
    the default screens case-insensitively.
    """
    start = response_text.find(_REVISED_MARKER)
    if start < 0:
        return None, RewriteStatus.PARSE_FAILURE
    body = response_text[start + len(_REVISED_MARKER):]
    end = None
    for marker in _EXPLANATION_MARKERS:
        pos = body.find(marker)
        if pos >= 0 and (end is None or pos < end):
            end = pos
    if end is None:
        return None, RewriteStatus.PARSE_FAILURE
    candidate = body[:end].strip()
    if not candidate:
        return None, RewriteStatus.PARSE_FAILURE

    haystack = candidate if strict_case else candidate.lower()
    for word in SENSITIVE_WORDS:
        needle = word if strict_case else word.lower()
        if needle in haystack:
            return None, RewriteStatus.SENSITIVE_WORD_FAILURE
    return candidate, RewriteStatus.SUCCESS


def review_verdict(response_text: str) -> ReviewStatus:
    """Accept iff the exact acceptance sentence appears (case-sensitive)."""
    if REVIEW_ACCEPT_SENTENCE in response_text:
        return ReviewStatus.ACCEPTED
    return ReviewStatus.REJECTED


@dataclass(frozen=True)
class RoundOutcome:
    round: QARound
    rewrite_status: RewriteStatus
    revised_answer: Optional[str]
    review_status: Optional[ReviewStatus]
    final_answer: str
    attempts: int = 1

    @property
    def changed(self) -> bool:
        return self.final_answer != self.round.answer

    def to_json_obj(self) -> dict:
        return {
            "record_id": self.round.record_id,
            "round_index": self.round.round_index,
            "question": self.round.question,
            "original_answer": self.round.answer,
            "rewrite_status": self.rewrite_status.value,
            "revised_answer": self.revised_answer,
            "review_status": self.review_status.value if self.review_status else None,
            "final_answer": self.final_answer,
            "attempts": self.attempts,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "RoundOutcome":
        return RoundOutcome(
            round=QARound(
                record_id=obj["record_id"],
                round_index=obj["round_index"],
                question=obj["question"],
                answer=obj["original_answer"],
            ),
            rewrite_status=RewriteStatus(obj["rewrite_status"]),
            revised_answer=obj.get("revised_answer"),
            review_status=ReviewStatus(obj["review_status"]) if obj.get("review_status") else None,
            final_answer=obj["final_answer"],
            attempts=obj.get("attempts", 1),
        )


def _fallback(round: QARound, rewrite_status: RewriteStatus, attempts: int = 1,
              revised: Optional[str] = None, review_status: Optional[ReviewStatus] = None) -> RoundOutcome:
    return RoundOutcome(round, rewrite_status, revised, review_status, round.answer, attempts)


def align_round(
    round: QARound,
    backend,
    rewrite_cfg: SamplingConfig,
    variant: RewriteVariant = RewriteVariant.NO1,
    forge: Optional[PromptForge] = None,
    strict_sensitive_case: bool = False,
) -> RoundOutcome:
    """Run one rewrite -> post-process -> review pass; the original answer
    is retained on every failure path."""
    forge = forge or PromptForge()
    try:
        prompt = forge.render_rewrite_prompt(variant, round.question, round.answer)
    except EmptyField:
        return _fallback(round, RewriteStatus.PARSE_FAILURE)
    try:
        response = backend.complete(prompt, rewrite_cfg)
    except BackendFailure as exc:
        return _fallback(round, RewriteStatus.BACKEND_ERROR, attempts=exc.attempts)

    candidate, status = post_process_rewrite(response, strict_case=strict_sensitive_case)
    if status is not RewriteStatus.SUCCESS:
        return _fallback(round, status)

    review_prompt = forge.render_review_prompt(round.question, round.answer, candidate)
    try:
        review_response = backend.complete(
            review_prompt, SamplingConfig.greedy(rewrite_cfg.max_length)
        )
    except BackendFailure as exc:
        return _fallback(
            round, RewriteStatus.SUCCESS, attempts=exc.attempts,
            revised=candidate, review_status=ReviewStatus.BACKEND_ERROR,
        )
    verdict = review_verdict(review_response)
    final = candidate if verdict is ReviewStatus.ACCEPTED else round.answer
    return RoundOutcome(round, RewriteStatus.SUCCESS, candidate, verdict, final)


# ── aggregation ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AlignmentReport:
    total_rounds: int
    accepted: int
    unchanged_by_choice: int
    rewrite_failures: int
    unqualified: int
    histograms: Dict[str, int]

    @property
    def failure_rate(self) -> float:
        return self.rewrite_failures / self.total_rounds if self.total_rounds else 0.0

    @property
    def unqualified_rate(self) -> float:
        return self.unqualified / self.total_rounds if self.total_rounds else 0.0

    def to_json_obj(self) -> dict:
        return {
            "total_rounds": self.total_rounds,
            "accepted": self.accepted,
            "unchanged_by_choice": self.unchanged_by_choice,
            "rewrite_failures": self.rewrite_failures,
            "unqualified": self.unqualified,
            "failure_rate": self.failure_rate,
            "unqualified_rate": self.unqualified_rate,
            "failure_rate_display": format_percent(self.rewrite_failures, self.total_rounds),
            "unqualified_rate_display": format_percent(self.unqualified, self.total_rounds),
            "histograms": dict(self.histograms),
        }


def format_percent(count: int, total: int) -> str:
    """Percentage rounded half-up to two decimals, e.g. '0.11%'."""
    if total == 0:
        return "0.00%"
    pct = (Decimal(count) * 100 / Decimal(total)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP
    )
    return f"{pct}%"


def compute_stats(outcomes: List[RoundOutcome]) -> AlignmentReport:
    hist = {
        "parse_failure": 0,
        "sensitive_word_failure": 0,
        "rewrite_backend_error": 0,
        "review_rejected": 0,
        "review_backend_error": 0,
    }
    accepted = unchanged = failures = unqualified = 0
    for o in outcomes:
        if o.rewrite_status is not RewriteStatus.SUCCESS:
            failures += 1
            key = {
                RewriteStatus.PARSE_FAILURE: "parse_failure",
                RewriteStatus.SENSITIVE_WORD_FAILURE: "sensitive_word_failure",
                RewriteStatus.BACKEND_ERROR: "rewrite_backend_error",
            }[o.rewrite_status]
            hist[key] += 1
        elif o.review_status is ReviewStatus.ACCEPTED:
            if o.revised_answer == o.round.answer:
                unchanged += 1
            else:
                accepted += 1
        elif o.review_status is ReviewStatus.BACKEND_ERROR:
            # fail-safe: counted with unqualified (original answer kept)
            unqualified += 1
            hist["review_backend_error"] += 1
        else:
            unqualified += 1
            hist["review_rejected"] += 1
    return AlignmentReport(
        total_rounds=len(outcomes),
        accepted=accepted,
        unchanged_by_choice=unchanged,
        rewrite_failures=failures,
        unqualified=unqualified,
        histograms=hist,
    )


def report_text(report: AlignmentReport) -> str:
    """Aligned-column human rendering (Total QA / Failures / Unqualified plus splits)."""
    rows = [
        ("Total QA", str(report.total_rounds), ""),
        ("Failures", str(report.rewrite_failures),
         format_percent(report.rewrite_failures, report.total_rounds)),
        ("Unqualified Samples", str(report.unqualified),
         format_percent(report.unqualified, report.total_rounds)),
        ("Accepted", str(report.accepted),
         format_percent(report.accepted, report.total_rounds)),
        ("Unchanged by choice", str(report.unchanged_by_choice),
         format_percent(report.unchanged_by_choice, report.total_rounds)),
    ]
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    lines = [f"{name:<{w0}}  {count:>{w1}}  {pct:>7}".rstrip() for name, count, pct in rows]
    return "\n".join(lines) + "\n"


# ── corpus-level run with checkpointing ──────────────────────────────────────

class ChecksumMismatch(RuntimeError):
    """Resume attempted with a different config or corpus than the checkpoint's."""


@dataclass(frozen=True)
class AlignSettings:
    rewrite_cfg: SamplingConfig = field(default_factory=SamplingConfig.rewrite_default)
    variant: RewriteVariant = RewriteVariant.NO1
    concurrency: int = 4
    strict_sensitive_case: bool = False
    run_id: str = "run"
    checkpoint_flush: int = 64


def config_hash(
    settings: AlignSettings, backend_name: str,
    tag_map: Mapping[str, FormatClass], records: List[InstructionRecord],
) -> str:
    corpus_digest = hashlib.sha256(
        serialize_dataset(records, compact=True).encode("utf-8")
    ).hexdigest()
    canonical = json.dumps(
        {
            "variant": settings.variant.value,
            "temperature": settings.rewrite_cfg.temperature,
            "top_p": settings.rewrite_cfg.top_p,
            "top_k": settings.rewrite_cfg.top_k,
            "max_length": settings.rewrite_cfg.max_length,
            "sampling_enabled": settings.rewrite_cfg.sampling_enabled,
            "strict_sensitive_case": settings.strict_sensitive_case,
            "backend": backend_name,
            "tag_map": sorted((tag, cls.kind) for tag, cls in tag_map.items()),
            "corpus": corpus_digest,
        },
        sort_keys=True,
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _load_checkpoint(path: Path, expected_hash: str) -> Dict[Tuple[str, int], RoundOutcome]:
    completed: Dict[Tuple[str, int], RoundOutcome] = {}
    with path.open("r", encoding="utf-8") as fh:
        header_line = fh.readline()
        if not header_line.strip():
            return completed
        header = json.loads(header_line)
        if header.get("config_hash") != expected_hash:
            raise ChecksumMismatch(
                "checkpoint was written with a different config or corpus"
            )
        for line in fh:
            line = line.strip()
            if not line:
                continue
            outcome = RoundOutcome.from_json_obj(json.loads(line))
            completed[(outcome.round.record_id, outcome.round.round_index)] = outcome
    return completed


def align_corpus(
    records: List[InstructionRecord],
    backend,
    tag_map: Mapping[str, FormatClass],
    settings: Optional[AlignSettings] = None,
    checkpoint_path: Optional[Path] = None,
    forge: Optional[PromptForge] = None,
) -> Tuple[List[InstructionRecord], AlignmentReport]:
    """Align every soft-format round; returns the order-preserving corpus and a report.

    With ``checkpoint_path`` the run appends one outcome per round (batched
    flushes) and a resumed run skips already-committed rounds, reproducing a
    byte-identical output under a deterministic backend.
    """
    settings = settings or AlignSettings()
    forge = forge or PromptForge()

    classes = {rec.id: classify_format(rec, tag_map) for rec in records}
    rounds: List[QARound] = []
    for rec in records:
        if classes[rec.id].is_soft:
            rounds.extend(split_rounds(rec))

    digest = config_hash(settings, getattr(backend, "name", "?"), tag_map, records)
    completed: Dict[Tuple[str, int], RoundOutcome] = {}
    ckpt_fh = None
    if checkpoint_path is not None:
        checkpoint_path = Path(checkpoint_path)
        if checkpoint_path.exists() and checkpoint_path.stat().st_size > 0:
            completed = _load_checkpoint(checkpoint_path, digest)
            ckpt_fh = checkpoint_path.open("a", encoding="utf-8")
        else:
            ckpt_fh = checkpoint_path.open("w", encoding="utf-8")
            ckpt_fh.write(json.dumps(
                {"run_id": settings.run_id, "config_hash": digest}
            ) + "\n")
            ckpt_fh.flush()

    pending = [r for r in rounds if (r.record_id, r.round_index) not in completed]
    outcomes: List[RoundOutcome] = []
    try:
        futures = {}
        with ThreadPoolExecutor(max_workers=max(1, settings.concurrency)) as pool:
            for r in pending:
                futures[(r.record_id, r.round_index)] = pool.submit(
                    align_round, r, backend, settings.rewrite_cfg,
                    settings.variant, forge, settings.strict_sensitive_case,
                )
            # commit in input order so checkpoints and outputs are deterministic
            since_flush = 0
            for r in rounds:
                key = (r.record_id, r.round_index)
                if key in completed:
                    outcomes.append(completed[key])
                    continue
                outcome = futures[key].result()
                outcomes.append(outcome)
                if ckpt_fh is not None:
                    ckpt_fh.write(json.dumps(outcome.to_json_obj(), ensure_ascii=False) + "\n")
                    since_flush += 1
                    if since_flush >= settings.checkpoint_flush:
                        ckpt_fh.flush()
                        since_flush = 0
    finally:
        if ckpt_fh is not None:
            ckpt_fh.close()

    replacements = {
        (o.round.record_id, o.round.round_index): o.final_answer
        for o in outcomes
        if o.changed
    }
    aligned = reassemble(records, replacements, classes)
    return aligned, compute_stats(outcomes)
