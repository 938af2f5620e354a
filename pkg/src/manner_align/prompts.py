"""Rewrite and review prompt rendering.

Requirement paragraphs live as plain-text assets; the plain-English and
no-align variants are derived from the default (No1) text by fixed phrase
substitution, so an asset override of No1 propagates to both.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Dict, Optional


class RewriteVariant(Enum):
    NO1 = "no1"  # default production variant
    NO2 = "no2"
    NO3 = "no3"
    PLAIN_ENGLISH = "plain"
    NO_ALIGN = "noalign"


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    # single user-role message, no system message
    role_layout: str = "single_user_message"


class EmptyField(ValueError):
    """A question/answer field is blank after trimming."""


_STYLE_PHRASE = "your writing style"
_PLAIN_PHRASE = "plain English as you explain it to your children"
_NOALIGN_REMOVALS = (" in your writing style", " and consistent with your writing style")


def _read_asset(name: str, override_dir: Optional[Path] = None) -> str:
    if override_dir is not None:
        path = override_dir / name
        if path.exists():
            return path.read_text(encoding="utf-8").strip()
    return (
        resources.files("manner_align").joinpath("assets", name)
        .read_text(encoding="utf-8")
        .strip()
    )


class PromptForge:
    """Loads prompt assets once and renders prompts as pure string functions."""

    def __init__(self, override_dir: Optional[Path] = None):
        no1 = _read_asset("rewrite_no1.txt", override_dir)
        noalign = no1
        for phrase in _NOALIGN_REMOVALS:
            noalign = noalign.replace(phrase, "")
        self._requirements: Dict[RewriteVariant, str] = {
            RewriteVariant.NO1: no1,
            RewriteVariant.NO2: _read_asset("rewrite_no2.txt", override_dir),
            RewriteVariant.NO3: _read_asset("rewrite_no3.txt", override_dir),
            RewriteVariant.PLAIN_ENGLISH: no1.replace(_STYLE_PHRASE, _PLAIN_PHRASE),
            RewriteVariant.NO_ALIGN: noalign,
        }
        self._review_requirement = _read_asset("review.txt", override_dir)

    def requirement_text(self, variant: RewriteVariant) -> str:
        return self._requirements[variant]

    def asset_digests(self) -> Dict[str, str]:
        """SHA-256 of each requirement paragraph, recorded in run provenance."""
        digests = {
            f"rewrite_{v.value}": hashlib.sha256(text.encode("utf-8")).hexdigest()
            for v, text in self._requirements.items()
        }
        digests["review"] = hashlib.sha256(
            self._review_requirement.encode("utf-8")
        ).hexdigest()
        return digests

    def render_rewrite_prompt(
        self, variant: RewriteVariant, question: str, answer: str
    ) -> RenderedPrompt:
        if not question.strip():
            raise EmptyField("question is blank")
        if not answer.strip():
            raise EmptyField("answer is blank")
        text = (
            f"{self._requirements[variant]}\n\n"
            f"Question: {question}\n"
            f"Answer: {answer}"
        )
        return RenderedPrompt(text)

    def render_review_prompt(
        self, question: str, original: str, revised: str
    ) -> RenderedPrompt:
        for name, value in (("question", question), ("original", original), ("revised", revised)):
            if not value.strip():
                raise EmptyField(f"{name} is blank")
        text = (
            f"{self._review_requirement}\n\n"
            f"Question: {question}\n"
            f"Original Answer: {original}\n"
            f"Revised Answer: {revised}"
        )
        return RenderedPrompt(text)
