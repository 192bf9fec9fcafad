"""Dataset ingestion, passage chunking, training-pair selection, statistics.

Two dataset file layouts are supported: ``jsonl`` (one JSON object per line)
and ``dpr-json`` (a single JSON array of the same objects).  Each object has
fields ``question``, ``answers`` (array of strings), optional ``answer_kind``
("literal" or "regex", default literal), ``positive_ctxs`` and
``hard_negative_ctxs`` (arrays of ``{title, text}``).

Corpus files are tab-separated ``id<TAB>text<TAB>title``, one passage per
line, UTF-8.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

logger = logging.getLogger(__name__)

KNOWN_FORMATS = ("jsonl", "dpr-json")


class DatasetFormatError(ValueError):
    """Unknown dataset format tag."""


class DatasetParseError(ValueError):
    """Malformed dataset or corpus file; message carries the line number."""


@dataclass(frozen=True)
class Passage:
    """A retrievable text unit."""

    id: int
    title: str
    body: str


@dataclass(frozen=True)
class AnswerPattern:
    """A literal string or regular expression that identifies an answer."""

    kind: str  # "literal" | "regex"
    pattern: str

    def __post_init__(self) -> None:
        if self.kind not in ("literal", "regex"):
            raise ValueError(f"unknown answer kind {self.kind!r}")
        if self.kind == "literal" and not self.pattern:
            raise ValueError("literal answer pattern must be non-empty")
        if self.kind == "regex":
            re.compile(self.pattern)


@dataclass
class QuestionRecord:
    """A question with its answers and its positive / hard-negative passages."""

    id: int
    question: str
    answers: list[AnswerPattern]
    positives: list[Passage] = field(default_factory=list)
    hard_negatives: list[Passage] = field(default_factory=list)


@dataclass(frozen=True)
class DatasetStats:
    """Question counts bucketed by usable positive-passage count.

    ``p1``/``p2``/``p3`` count questions whose capped positive count is
    1, 2, or 3; ``delta`` is the fraction of questions in the ``p3`` bucket.
    ``delta_defined`` is False when there are no usable questions.
    """

    p1: int
    p2: int
    p3: int
    total: int
    delta: float
    delta_defined: bool = True


def _parse_ctxs(raw, next_id: int) -> tuple[list[Passage], int]:
    passages = []
    for ctx in raw or []:
        title = str(ctx.get("title", ""))
        body = str(ctx.get("text", ""))
        if not body.strip():
            continue  # body must be non-empty after normalization
        passages.append(Passage(id=next_id, title=title, body=body))
        next_id += 1
    return passages, next_id


def _record_from_obj(
    obj: dict, record_id: int, next_passage_id: int, where: str
) -> tuple[QuestionRecord | None, int]:
    """Build one record; returns (None, next_id) when the record is excluded."""
    question = str(obj.get("question", ""))
    kind = obj.get("answer_kind", "literal")
    raw_answers = [a for a in obj.get("answers", []) if str(a)]
    if not raw_answers:
        logger.warning("%s: question %r has no answers, excluded", where, question)
        return None, next_passage_id
    try:
        answers = [AnswerPattern(kind=kind, pattern=str(a)) for a in raw_answers]
    except (ValueError, re.error) as exc:
        raise DatasetParseError(f"{where}: invalid answer pattern: {exc}") from exc
    positives, next_passage_id = _parse_ctxs(obj.get("positive_ctxs"), next_passage_id)
    hard_negatives, next_passage_id = _parse_ctxs(
        obj.get("hard_negative_ctxs"), next_passage_id
    )
    record = QuestionRecord(
        id=record_id,
        question=question,
        answers=answers,
        positives=positives,
        hard_negatives=hard_negatives,
    )
    return record, next_passage_id


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from exc
            if not isinstance(obj, dict):
                raise DatasetParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, obj


def _iter_dpr_json(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.strip():
        return
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"{path}:{exc.lineno}: {exc}") from exc
    if not isinstance(data, list):
        raise DatasetParseError(f"{path}:1: expected a top-level JSON array")
    for i, obj in enumerate(data):
        if not isinstance(obj, dict):
            raise DatasetParseError(f"{path}: entry {i} is not a JSON object")
        yield i + 1, obj


def ingest_dataset(path, format: str = "jsonl") -> list[QuestionRecord]:
    """Load a dataset file into question records.

    Questions without any answers are excluded with a warning; questions
    lacking positives or hard negatives are kept and are later turned away
    by :func:`select_training_pairs`.  Ingestion is deterministic: the same
    file always yields the same record list.
    """
    path = Path(path)
    if format == "jsonl":
        entries = _iter_jsonl(path)
    elif format == "dpr-json":
        entries = _iter_dpr_json(path)
    else:
        raise DatasetFormatError(
            f"unknown dataset format {format!r}, expected one of {KNOWN_FORMATS}"
        )

    records: list[QuestionRecord] = []
    next_passage_id = 0
    for lineno, obj in entries:
        record, next_passage_id = _record_from_obj(
            obj, len(records), next_passage_id, f"{path}:{lineno}"
        )
        if record is not None:
            records.append(record)
    return records


def chunk_documents(
    docs: Iterable[tuple[str, str]],
    words_per_passage: int = 100,
    start_id: int = 0,
) -> list[Passage]:
    """Split documents into consecutive windows of whitespace-delimited words.

    Every window has exactly ``words_per_passage`` words except a possibly
    shorter final remainder, which is kept.  Joining the windows of one
    document restores its word sequence.
    """
    if words_per_passage < 1:
        raise ValueError(f"words_per_passage must be >= 1, got {words_per_passage}")
    passages: list[Passage] = []
    next_id = start_id
    for title, body in docs:
        words = body.split()
        for start in range(0, len(words), words_per_passage):
            window = words[start : start + words_per_passage]
            passages.append(Passage(id=next_id, title=title, body=" ".join(window)))
            next_id += 1
    return passages


def select_training_pairs(
    record: QuestionRecord, m_max: int
) -> tuple[list[Passage], Passage] | None:
    """Pick up to ``m_max`` positives (stored order) and the first hard negative.

    Returns None (discard) when the record has no usable positives or no hard
    negatives; such records cannot contribute a training term.
    """
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    if not record.positives or not record.hard_negatives:
        return None
    return record.positives[:m_max], record.hard_negatives[0]


def compute_stats(records: Iterable[QuestionRecord], m_max: int = 3) -> DatasetStats:
    """Count usable questions by capped positive count (``m_max=3`` gives the
    standard three-bucket breakdown) and report the fraction in the top bucket.

    Discarded records (no positives or no hard negatives) are not counted.
    """
    counts = {1: 0, 2: 0, 3: 0}
    for record in records:
        if select_training_pairs(record, m_max) is None:
            continue
        bucket = min(len(record.positives), m_max, 3)
        counts[bucket] += 1
    total = sum(counts.values())
    if total == 0:
        return DatasetStats(0, 0, 0, 0, 0.0, delta_defined=False)
    return DatasetStats(
        p1=counts[1],
        p2=counts[2],
        p3=counts[3],
        total=total,
        delta=counts[3] / total,
    )


def _sanitize_field(text: str) -> str:
    """Make a string safe for one TSV field (no tabs or line breaks)."""
    return re.sub(r"[\t\r\n]+", " ", text)


def save_corpus(passages: Iterable[Passage], path) -> None:
    """Write passages as ``id<TAB>text<TAB>title`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in passages:
            fh.write(f"{p.id}\t{_sanitize_field(p.body)}\t{_sanitize_field(p.title)}\n")


def load_corpus(path) -> list[Passage]:
    """Read a ``id<TAB>text<TAB>title`` corpus file."""
    path = Path(path)
    passages: list[Passage] = []
    seen: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DatasetParseError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, "
                    f"got {len(parts)}"
                )
            raw_id, body, title = parts
            try:
                pid = int(raw_id)
            except ValueError as exc:
                raise DatasetParseError(
                    f"{path}:{lineno}: passage id {raw_id!r} is not an integer"
                ) from exc
            if pid in seen:
                raise DatasetParseError(f"{path}:{lineno}: duplicate passage id {pid}")
            seen.add(pid)
            passages.append(Passage(id=pid, title=title, body=body))
    return passages
