"""Instruction dataset parsing, format classification, round splitting and reassembly.

Only the answers of soft-format records are ever mutated; everything else
round-trips byte-identically through parse -> serialize.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Tuple


class Speaker(Enum):
    HUMAN = "human"
    ASSISTANT = "gpt"


class HardSubtype(Enum):
    WORD_PHRASE_VQA = "word_phrase"
    CHOICE = "choice"
    SHORT_CAPTION = "short_caption"
    GROUNDING = "grounding"


@dataclass(frozen=True)
class FormatClass:
    """Partition label: soft-format (rewritable), hard-format, or text-only."""

    kind: str  # "soft" | "hard" | "text_only"
    subtype: Optional[HardSubtype] = None
    heuristic: bool = False  # True when assigned by the fallback heuristic

    @property
    def is_soft(self) -> bool:
        return self.kind == "soft"


SOFT = FormatClass("soft")
TEXT_ONLY = FormatClass("text_only")


def hard(subtype: HardSubtype) -> FormatClass:
    return FormatClass("hard", subtype)


# tag_map config class names -> FormatClass
CLASS_NAMES: Dict[str, FormatClass] = {
    "soft": SOFT,
    "word_phrase": hard(HardSubtype.WORD_PHRASE_VQA),
    "choice": hard(HardSubtype.CHOICE),
    "short_caption": hard(HardSubtype.SHORT_CAPTION),
    "grounding": hard(HardSubtype.GROUNDING),
    "text_only": TEXT_ONLY,
}


class MalformedInput(ValueError):
    """Raised when a dataset file violates the input schema; parsing is all-or-nothing."""

    def __init__(self, reason: str, record_index: Optional[int] = None):
        self.reason = reason
        self.record_index = record_index
        where = f" (record {record_index})" if record_index is not None else ""
        super().__init__(f"malformed input{where}: {reason}")


class IllegalReplacement(ValueError):
    """Raised when a replacement targets a non-soft record or a missing round."""


@dataclass(frozen=True)
class ConversationTurn:
    speaker: Speaker
    text: str


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    turns: Tuple[ConversationTurn, ...]
    image_ref: Optional[str] = None
    source_tag: str = ""

    def pairs(self) -> int:
        return len(self.turns) // 2


@dataclass(frozen=True)
class QARound:
    record_id: str
    round_index: int  # 0-based
    question: str
    answer: str


def parse_dataset(raw: bytes | str, default_source_tag: str = "") -> List[InstructionRecord]:
    """Parse a UTF-8 JSON array of LLaVA-style conversation records.

    ``default_source_tag`` applies to records without an explicit ``source``
    field (typically derived from the filename by the caller).
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedInput(f"invalid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise MalformedInput("top-level value must be a JSON array")

    records: List[InstructionRecord] = []
    seen_ids: set[str] = set()
    for idx, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise MalformedInput("array element is not an object", idx)
        if "id" not in obj:
            raise MalformedInput("missing 'id'", idx)
        rec_id = str(obj["id"])
        if rec_id in seen_ids:
            raise MalformedInput(f"duplicate id {rec_id!r}", idx)
        seen_ids.add(rec_id)

        convs = obj.get("conversations")
        if not isinstance(convs, list) or not convs:
            raise MalformedInput("'conversations' must be a non-empty array", idx)
        turns: List[ConversationTurn] = []
        for t_idx, turn in enumerate(convs):
            if not isinstance(turn, dict):
                raise MalformedInput(f"turn {t_idx} is not an object", idx)
            who = turn.get("from")
            if who == "human":
                speaker = Speaker.HUMAN
            elif who == "gpt":
                speaker = Speaker.ASSISTANT
            else:
                raise MalformedInput(f"unknown speaker label {who!r}", idx)
            expected = Speaker.HUMAN if t_idx % 2 == 0 else Speaker.ASSISTANT
            if speaker is not expected:
                raise MalformedInput(
                    f"turn {t_idx}: expected {expected.value!r}, got {who!r}"
                    " (conversations must start with 'human' and alternate)",
                    idx,
                )
            turns.append(ConversationTurn(speaker, str(turn.get("value", ""))))
        if len(turns) % 2 != 0:
            raise MalformedInput("odd number of turns", idx)

        records.append(
            InstructionRecord(
                id=rec_id,
                turns=tuple(turns),
                image_ref=obj.get("image"),
                source_tag=str(obj.get("source", "") or default_source_tag),
            )
        )
    return records


def serialize_dataset(records: Iterable[InstructionRecord], compact: bool = False) -> str:
    """Serialize back to the input schema with stable field order (id, image, conversations, source)."""
    out = []
    for rec in records:
        obj: Dict[str, object] = {"id": rec.id}
        if rec.image_ref is not None:
            obj["image"] = rec.image_ref
        obj["conversations"] = [
            {"from": turn.speaker.value, "value": turn.text} for turn in rec.turns
        ]
        if rec.source_tag:
            obj["source"] = rec.source_tag
        out.append(obj)
    if compact:
        return json.dumps(out, ensure_ascii=False, separators=(",", ":"))
    return json.dumps(out, ensure_ascii=False, indent=2)


def parse_tag_map(text: str) -> Dict[str, FormatClass]:
    """Parse a tag_map config: one ``source_tag = class_name`` (or whitespace-separated) pair per line."""
    mapping: Dict[str, FormatClass] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" in line:
            tag, _, cls = line.partition("=")
        else:
            parts = line.split(None, 1)
            if len(parts) != 2:
                raise MalformedInput(f"tag_map line {line_no}: expected 'tag class'")
            tag, cls = parts
        tag, cls = tag.strip(), cls.strip()
        if cls not in CLASS_NAMES:
            raise MalformedInput(f"tag_map line {line_no}: unknown class {cls!r}")
        mapping[tag] = CLASS_NAMES[cls]
    return mapping


_CHOICE_LETTERS = set("ABCDE")


def _heuristic_class(record: InstructionRecord) -> FormatClass:
    """Fallback when the source tag is unknown; result is flagged as heuristic."""
    if record.image_ref is None:
        return FormatClass("text_only", heuristic=True)
    answers = [t.text for t in record.turns if t.speaker is Speaker.ASSISTANT]
    first = answers[0].strip() if answers else ""
    if len(first) == 1 and first in _CHOICE_LETTERS:
        return FormatClass("hard", HardSubtype.CHOICE, heuristic=True)
    if first.startswith("[") and first.endswith("]") and first.count(",") == 3:
        return FormatClass("hard", HardSubtype.GROUNDING, heuristic=True)
    if len(first.split()) <= 5:
        return FormatClass("hard", HardSubtype.WORD_PHRASE_VQA, heuristic=True)
    return FormatClass("soft", heuristic=True)


def classify_format(record: InstructionRecord, tag_map: Mapping[str, FormatClass]) -> FormatClass:
    """Tag-driven classification with a content heuristic only for unknown tags."""
    if record.source_tag in tag_map:
        return tag_map[record.source_tag]
    return _heuristic_class(record)


def split_rounds(record: InstructionRecord) -> List[QARound]:
    """One QARound per (Human, Assistant) pair, in conversation order."""
    rounds = []
    for i in range(record.pairs()):
        rounds.append(
            QARound(
                record_id=record.id,
                round_index=i,
                question=record.turns[2 * i].text,
                answer=record.turns[2 * i + 1].text,
            )
        )
    return rounds


def reassemble(
    records: List[InstructionRecord],
    replacements: Mapping[Tuple[str, int], str],
    classes: Mapping[str, FormatClass],
) -> List[InstructionRecord]:
    """Apply answer replacements to soft-format rounds; everything else is untouched.

    ``classes`` maps record id -> FormatClass (as returned by classify_format).
    """
    by_id = {rec.id: rec for rec in records}
    for (rec_id, round_index) in replacements:
        rec = by_id.get(rec_id)
        if rec is None:
            raise IllegalReplacement(f"no record with id {rec_id!r}")
        cls = classes.get(rec_id)
        if cls is None or not cls.is_soft:
            raise IllegalReplacement(f"record {rec_id!r} is not soft-format")
        if not 0 <= round_index < rec.pairs():
            raise IllegalReplacement(f"record {rec_id!r} has no round {round_index}")

    out: List[InstructionRecord] = []
    for rec in records:
        touched = [
            (ri, text)
            for (rid, ri), text in replacements.items()
            if rid == rec.id
        ]
        if not touched:
            out.append(rec)
            continue
        turns = list(rec.turns)
        for round_index, new_answer in touched:
            turns[2 * round_index + 1] = ConversationTurn(Speaker.ASSISTANT, new_answer)
        out.append(
            InstructionRecord(
                id=rec.id,
                turns=tuple(turns),
                image_ref=rec.image_ref,
                source_tag=rec.source_tag,
            )
        )
    return out
