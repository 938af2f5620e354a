"""Blind human assessment of writing-manner alignment.

A session holds two anonymized anchor panels (model-style and
dataset-style reference samples, shown as "Style A"/"Style B" in a
per-session random order), a pool of rewritten answers to judge, and the
ballots. Served payloads never carry provenance.
"""

from __future__ import annotations

import json
import os
import random
import tempfile
import threading
from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .align import ReviewStatus, RewriteStatus, RoundOutcome

SCHEMA_VERSION = 1

VOTE_OPTIONS = ("inner_llm", "original_dataset", "none_of_both")


class InsufficientPool(ValueError):
    def __init__(self, pool_name: str, needed: int, available: int):
        self.pool_name = pool_name
        super().__init__(
            f"pool {pool_name!r} has {available} samples, {needed} required"
        )


class UnknownSample(KeyError):
    pass


class SessionClosed(RuntimeError):
    pass


@dataclass
class AssessmentSession:
    session_id: str
    seed: int
    llm_anchors: List[str]
    dataset_anchors: List[str]
    # sample_id -> text; ids are opaque and carry no provenance
    eval_samples: Dict[str, str]
    presentation_order: List[str]
    # "A" or "B" names the inner-LLM panel for this session
    llm_panel_label: str
    ballots: Dict[Tuple[str, str], str] = field(default_factory=dict)  # (rater, sample) -> option
    audit_log: List[dict] = field(default_factory=list)
    closed: bool = False

    # -- persistence ---------------------------------------------------------

    def to_json_obj(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "session_id": self.session_id,
            "seed": self.seed,
            "llm_anchors": self.llm_anchors,
            "dataset_anchors": self.dataset_anchors,
            "eval_samples": self.eval_samples,
            "presentation_order": self.presentation_order,
            "llm_panel_label": self.llm_panel_label,
            "ballots": [
                {"rater_id": r, "sample_id": s, "choice": c}
                for (r, s), c in sorted(self.ballots.items())
            ],
            "audit_log": self.audit_log,
            "closed": self.closed,
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "AssessmentSession":
        session = AssessmentSession(
            session_id=obj["session_id"],
            seed=obj["seed"],
            llm_anchors=list(obj["llm_anchors"]),
            dataset_anchors=list(obj["dataset_anchors"]),
            eval_samples=dict(obj["eval_samples"]),
            presentation_order=list(obj["presentation_order"]),
            llm_panel_label=obj["llm_panel_label"],
            audit_log=list(obj.get("audit_log", [])),
            closed=obj.get("closed", False),
        )
        for ballot in obj.get("ballots", []):
            session.ballots[(ballot["rater_id"], ballot["sample_id"])] = ballot["choice"]
        return session

    def save(self, path: Path) -> None:
        """Atomic write: annotation data loss is unacceptable."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(self.to_json_obj(), fh, ensure_ascii=False, indent=2)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @staticmethod
    def load(path: Path) -> "AssessmentSession":
        return AssessmentSession.from_json_obj(
            json.loads(Path(path).read_text(encoding="utf-8"))
        )

    # -- blind wire payloads -------------------------------------------------

    def blind_payload(self) -> dict:
        """What raters see: anonymized panels and unlabeled samples only."""
        if self.llm_panel_label == "A":
            panel_a, panel_b = self.llm_anchors, self.dataset_anchors
        else:
            panel_a, panel_b = self.dataset_anchors, self.llm_anchors
        return {
            "session_id": self.session_id,
            "panels": {"A": panel_a, "B": panel_b},
            "samples": [
                {"sample_id": sid, "text": self.eval_samples[sid]}
                for sid in self.presentation_order
            ],
            "closed": self.closed,
        }

    def panel_choice_to_option(self, choice: str) -> str:
        """Map a panel-relative choice ('A'/'B'/'neither') to a vote option."""
        if choice == "neither":
            return "none_of_both"
        if choice not in ("A", "B"):
            raise ValueError(f"unknown choice {choice!r}")
        return "inner_llm" if choice == self.llm_panel_label else "original_dataset"

    # -- voting --------------------------------------------------------------

    def record_vote(self, sample_id: str, rater_id: str, option: str) -> None:
        if self.closed:
            raise SessionClosed(self.session_id)
        if sample_id not in self.eval_samples:
            raise UnknownSample(sample_id)
        if option not in VOTE_OPTIONS:
            raise ValueError(f"unknown vote option {option!r}")
        key = (rater_id, sample_id)
        if key in self.ballots:
            self.audit_log.append(
                {
                    "event": "revote",
                    "rater_id": rater_id,
                    "sample_id": sample_id,
                    "previous": self.ballots[key],
                    "new": option,
                }
            )
        self.ballots[key] = option

    def votes_of(self, rater_id: str) -> Dict[str, str]:
        return {s: c for (r, s), c in self.ballots.items() if r == rater_id}


@dataclass(frozen=True)
class VoteAggregate:
    percentages: Dict[str, float]  # option -> percent, one decimal
    counts: Dict[str, int]
    rater_count: int
    sample_count: int
    total_votes: int
    incomplete_ballots: int

    def to_json_obj(self) -> dict:
        return {
            "percentages": dict(self.percentages),
            "counts": dict(self.counts),
            "rater_count": self.rater_count,
            "sample_count": self.sample_count,
            "total_votes": self.total_votes,
            "incomplete_ballots": self.incomplete_ballots,
        }


def _percent(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    return float(
        (Decimal(count) * 100 / Decimal(total)).quantize(
            Decimal("0.1"), rounding=ROUND_HALF_UP
        )
    )


def aggregate(session: AssessmentSession, allow_partial: bool = False) -> VoteAggregate:
    """Percentage per option over all cast ballots, rounded to one decimal."""
    counts = {option: 0 for option in VOTE_OPTIONS}
    for option in session.ballots.values():
        counts[option] += 1
    total = sum(counts.values())
    raters = {r for (r, _s) in session.ballots}
    expected = len(raters) * len(session.eval_samples)
    incomplete = expected - total
    if incomplete > 0 and not allow_partial:
        raise ValueError(
            f"{incomplete} ballots missing; pass allow_partial to aggregate anyway"
        )
    return VoteAggregate(
        percentages={option: _percent(counts[option], total) for option in VOTE_OPTIONS},
        counts=counts,
        rater_count=len(raters),
        sample_count=len(session.eval_samples),
        total_votes=total,
        incomplete_ballots=max(incomplete, 0),
    )


def build_session(
    llm_pool: List[str],
    dataset_pool: List[str],
    outcome_log: List[RoundOutcome],
    seed: int,
    session_id: str = "session",
    anchor_count: int = 20,
    eval_count: int = 100,
) -> AssessmentSession:
    """Seeded, reproducible session: anchors sampled from the two style pools,
    evaluation samples from accepted rewrite outcomes."""
    accepted = [
        o.revised_answer
        for o in outcome_log
        if o.rewrite_status is RewriteStatus.SUCCESS
        and o.review_status is ReviewStatus.ACCEPTED
        and o.revised_answer is not None
    ]
    if len(llm_pool) < anchor_count:
        raise InsufficientPool("llm_pool", anchor_count, len(llm_pool))
    if len(dataset_pool) < anchor_count:
        raise InsufficientPool("dataset_pool", anchor_count, len(dataset_pool))
    if len(accepted) < eval_count:
        raise InsufficientPool("accepted_outcomes", eval_count, len(accepted))

    rng = random.Random(seed)
    llm_anchors = rng.sample(llm_pool, anchor_count)
    dataset_anchors = rng.sample(dataset_pool, anchor_count)
    chosen = rng.sample(accepted, eval_count)
    sample_ids = [f"s{index:04d}" for index in range(eval_count)]
    order = list(sample_ids)
    rng.shuffle(order)
    return AssessmentSession(
        session_id=session_id,
        seed=seed,
        llm_anchors=llm_anchors,
        dataset_anchors=dataset_anchors,
        eval_samples=dict(zip(sample_ids, chosen)),
        presentation_order=order,
        llm_panel_label=rng.choice(["A", "B"]),
    )


# ── HTTP service ─────────────────────────────────────────────────────────────

def create_app(session_path: Path):
    """FastAPI app serving the blind session file at ``session_path``.

    Ballot mutations are serialized under a single lock and the session
    file is rewritten atomically on every vote.
    """
    from fastapi import FastAPI, HTTPException

    session_path = Path(session_path)
    app = FastAPI(title="manner-align assessment")
    lock = threading.Lock()
    state = {"session": AssessmentSession.load(session_path)}

    def get_session(session_id: str) -> AssessmentSession:
        session = state["session"]
        if session.session_id != session_id:
            raise HTTPException(status_code=404, detail="unknown session")
        return session

    @app.get("/session/{session_id}")
    def fetch_session(session_id: str):
        return get_session(session_id).blind_payload()

    @app.get("/session/{session_id}/progress/{rater_id}")
    def progress(session_id: str, rater_id: str):
        session = get_session(session_id)
        voted = set(session.votes_of(rater_id))
        remaining = [s for s in session.presentation_order if s not in voted]
        return {
            "voted": len(voted),
            "total": len(session.presentation_order),
            "next_sample_id": remaining[0] if remaining else None,
        }

    @app.post("/session/{session_id}/vote")
    def vote(session_id: str, body: dict):
        # body: {sample_id, rater_id, choice}; choice is a vote option or a
        # panel-relative 'A'/'B'/'neither'
        for field_name in ("sample_id", "rater_id", "choice"):
            if not isinstance(body.get(field_name), str):
                raise HTTPException(status_code=422, detail=f"missing field {field_name!r}")
        with lock:
            session = get_session(session_id)
            choice = body["choice"]
            if choice in ("A", "B", "neither"):
                choice = session.panel_choice_to_option(choice)
            try:
                session.record_vote(body["sample_id"], body["rater_id"], choice)
            except UnknownSample:
                raise HTTPException(status_code=404, detail="unknown sample")
            except SessionClosed:
                raise HTTPException(status_code=409, detail="session closed")
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc))
            session.save(session_path)
        return {"status": "ok", "sample_id": body["sample_id"]}

    @app.get("/session/{session_id}/aggregate")
    def session_aggregate(session_id: str, partial: bool = False):
        session = get_session(session_id)
        try:
            return aggregate(session, allow_partial=partial).to_json_obj()
        except ValueError as exc:
            raise HTTPException(status_code=409, detail=str(exc))

    return app
