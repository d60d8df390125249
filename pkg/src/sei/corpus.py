"""Canonical corpus model: entity-annotated studies, JSONL ingestion, filtering.

Every other module consumes the immutable record types defined here and
shares one tokenization convention, so entity spans, sentence boundaries,
report truncation, and n-gram metrics all agree on what a token is.

Corpus files are JSONL, one study per line:

    {"study_id": str, "findings": str, "indication": str|null,
     "entities": [{"tokens": str, "label": "ANAT-DP|OBS-DP|OBS-DA|OBS-U",
                   "start_ix": int, "end_ix": int}],
     "labels14": [0/1 x14]|null}

Embedding files are JSONL with ``{"study_id": str, "vec": [float x d]}``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .errors import CorpusError, ValidationError

__all__ = [
    "EntityLabel",
    "EntityAnnotation",
    "ReportDocument",
    "StudyRecord",
    "CorpusFilterConfig",
    "tokenize",
    "load_corpus",
    "save_corpus",
    "record_from_json",
    "record_to_json",
    "filter_corpus",
    "load_embeddings",
    "attach_embeddings",
]

# A decimal number survives as one token; otherwise . , : ; / split off.
_TOKEN_RE = re.compile(r"\d+(?:\.\d+)+|[^\s.,:;/]+|[.,:;/]")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into tokens.

    Whitespace separates tokens, and the punctuation marks . , : ; / become
    tokens of their own.  A period between digits ("1.9") does not split, so
    decimal measurements stay intact.
    """
    return _TOKEN_RE.findall(text.lower())


class EntityLabel(Enum):
    """Closed label set for report entities; unknown strings are rejected."""

    ANAT_DP = "ANAT-DP"
    OBS_DP = "OBS-DP"
    OBS_DA = "OBS-DA"
    OBS_U = "OBS-U"

    @classmethod
    def parse(cls, raw: str) -> "EntityLabel":
        try:
            return cls(raw)
        except ValueError:
            raise ValidationError(f"unknown entity label {raw!r}") from None


@dataclass(frozen=True)
class EntityAnnotation:
    """One annotated entity: surface text plus an inclusive token span."""

    tokens: str
    label: EntityLabel
    start_ix: int
    end_ix: int

    def __post_init__(self):
        if self.start_ix < 0:
            raise ValidationError(f"entity {self.tokens!r}: start_ix {self.start_ix} is negative")
        if self.end_ix < self.start_ix:
            raise ValidationError(
                f"entity {self.tokens!r}: end_ix {self.end_ix} precedes start_ix {self.start_ix}"
            )
        n_text = len(self.tokens.split())
        if self.span_len != n_text:
            raise ValidationError(
                f"entity {self.tokens!r}: span covers {self.span_len} tokens "
                f"but the text has {n_text}"
            )

    @property
    def span_len(self) -> int:
        return self.end_ix - self.start_ix + 1

    def overlaps(self, other: "EntityAnnotation") -> bool:
        return self.start_ix <= other.end_ix and other.start_ix <= self.end_ix


@dataclass(frozen=True)
class ReportDocument:
    """A findings section with its tokenization and sentence boundaries."""

    study_id: str
    text: str
    tokens: tuple[str, ...]
    sentence_ends: tuple[int, ...]

    def __post_init__(self):
        if list(self.tokens) != tokenize(self.text):
            raise ValidationError(f"report {self.study_id!r}: tokens do not match its text")
        expected = tuple(i for i, tok in enumerate(self.tokens) if tok == ".")
        if self.sentence_ends != expected:
            raise ValidationError(
                f"report {self.study_id!r}: sentence_ends {self.sentence_ends} do not "
                f"mark the '.' tokens {expected}"
            )

    @classmethod
    def from_text(cls, study_id: str, text: str) -> "ReportDocument":
        toks = tuple(tokenize(text))
        ends = tuple(i for i, tok in enumerate(toks) if tok == ".")
        return cls(study_id=study_id, text=text, tokens=toks, sentence_ends=ends)


@dataclass(frozen=True)
class StudyRecord:
    """One study: findings report, entities, and optional side data."""

    study_id: str
    report: ReportDocument
    entities: tuple[EntityAnnotation, ...]
    indication: str | None = None
    embedding: tuple[float, ...] | None = None
    labels14: tuple[int, ...] | None = None

    def __post_init__(self):
        n = len(self.report.tokens)
        for ent in self.entities:
            if ent.end_ix >= n:
                raise ValidationError(
                    f"study {self.study_id!r}: entity {ent.tokens!r} span "
                    f"[{ent.start_ix}, {ent.end_ix}] exceeds the {n}-token report"
                )
        if self.labels14 is not None:
            if len(self.labels14) != 14:
                raise ValidationError(
                    f"study {self.study_id!r}: labels14 has {len(self.labels14)} entries, expected 14"
                )
            if any(v not in (0, 1) for v in self.labels14):
                raise ValidationError(f"study {self.study_id!r}: labels14 entries must be 0 or 1")


@dataclass(frozen=True)
class CorpusFilterConfig:
    """Rules for dropping empty or junk reports."""

    min_tokens: int = 3
    junk_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.min_tokens < 0:
            raise ValidationError(f"min_tokens must be >= 0, got {self.min_tokens}")
        if any(not p for p in self.junk_patterns):
            raise ValidationError("junk_patterns must be non-empty strings")


def record_from_json(obj: dict) -> StudyRecord:
    """Build a validated StudyRecord from one parsed corpus JSON object."""
    if not isinstance(obj, dict):
        raise ValidationError("record is not a JSON object")
    for key in ("study_id", "findings"):
        if key not in obj:
            raise ValidationError(f"missing field {key!r}")
    study_id = str(obj["study_id"])
    report = ReportDocument.from_text(study_id, str(obj["findings"]))
    entities = []
    for ent in obj.get("entities") or []:
        for key in ("tokens", "label", "start_ix", "end_ix"):
            if key not in ent:
                raise ValidationError(f"entity missing field {key!r}")
        entities.append(
            EntityAnnotation(
                tokens=str(ent["tokens"]),
                label=EntityLabel.parse(str(ent["label"])),
                start_ix=int(ent["start_ix"]),
                end_ix=int(ent["end_ix"]),
            )
        )
    indication = obj.get("indication")
    if indication is not None:
        indication = str(indication)
    labels14 = obj.get("labels14")
    if labels14 is not None:
        labels14 = tuple(int(v) for v in labels14)
    return StudyRecord(
        study_id=study_id,
        report=report,
        entities=tuple(entities),
        indication=indication,
        labels14=labels14,
    )


def record_to_json(record: StudyRecord) -> dict:
    """Serialize a record back to the corpus JSONL schema."""
    return {
        "study_id": record.study_id,
        "findings": record.report.text,
        "indication": record.indication,
        "entities": [
            {
                "tokens": ent.tokens,
                "label": ent.label.value,
                "start_ix": ent.start_ix,
                "end_ix": ent.end_ix,
            }
            for ent in record.entities
        ],
        "labels14": list(record.labels14) if record.labels14 is not None else None,
    }


def load_corpus(path: str | Path) -> list[StudyRecord]:
    """Read a corpus JSONL file; errors name the offending line."""
    records = []
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                records.append(record_from_json(obj))
            except ValidationError as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from None
    return records


def save_corpus(records: Iterable[StudyRecord], path: str | Path) -> None:
    """Write records as corpus JSONL (deterministic key order)."""
    lines = [json.dumps(record_to_json(r), sort_keys=True) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def load_embeddings(path: str | Path) -> dict[str, tuple[float, ...]]:
    """Read an embeddings JSONL file into an id -> vector map.

    All vectors must share one dimension; duplicates are rejected.
    """
    out: dict[str, tuple[float, ...]] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if "study_id" not in obj or "vec" not in obj:
                raise CorpusError(f"{path}: line {lineno}: expected fields 'study_id' and 'vec'")
            sid = str(obj["study_id"])
            if sid in out:
                raise CorpusError(f"{path}: line {lineno}: duplicate study_id {sid!r}")
            vec = tuple(float(v) for v in obj["vec"])
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise CorpusError(
                    f"{path}: line {lineno}: vector of length {len(vec)} but corpus dimension is {dim}"
                )
            out[sid] = vec
    return out


def attach_embeddings(
    records: Iterable[StudyRecord], embeddings: Mapping[str, tuple[float, ...]]
) -> list[StudyRecord]:
    """Return copies of ``records`` with embeddings filled in where available."""
    return [
        replace(rec, embedding=embeddings[rec.study_id]) if rec.study_id in embeddings else rec
        for rec in records
    ]


def filter_corpus(
    records: Iterable[StudyRecord], cfg: CorpusFilterConfig
) -> tuple[list[StudyRecord], list[tuple[StudyRecord, str]]]:
    """Split records into (kept, dropped-with-reason), preserving order.

    A record is dropped iff its findings text is empty or whitespace, has
    fewer than ``min_tokens`` tokens, or contains a junk pattern
    (case-insensitive substring match).
    """
    patterns = [p.lower() for p in cfg.junk_patterns]
    kept: list[StudyRecord] = []
    dropped: list[tuple[StudyRecord, str]] = []
    for rec in records:
        reason = None
        if not rec.report.text.strip():
            reason = "empty"
        elif len(rec.report.tokens) < cfg.min_tokens:
            reason = "too_short"
        else:
            low = rec.report.text.lower()
            for pattern in patterns:
                if pattern in low:
                    reason = f"junk:{pattern}"
                    break
        if reason is None:
            kept.append(rec)
        else:
            dropped.append((rec, reason))
    return kept, dropped
