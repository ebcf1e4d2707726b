"""Load FinQA-format records and flatten each document into one text stream.

Tables are linearized with a fixed sentence template so that narrative text
and table cells can be processed uniformly downstream.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

logger = logging.getLogger(__name__)


class MalformedRecord(ValueError):
    """Record is unusable (missing id or question text); caller should skip it."""


@dataclass(frozen=True)
class Table:
    """Header row plus data rows; every row has the same arity as the header."""

    header: tuple[str, ...] = ()
    rows: tuple[tuple[str, ...], ...] = ()

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if len(row) != len(self.header):
                raise ValueError(f"row {i} arity {len(row)} != header arity {len(self.header)}")

    def is_empty(self) -> bool:
        return not self.rows


@dataclass(frozen=True)
class QuestionRecord:
    text: str
    gold_answer: str
    gold_exe_answer: Decimal | None = None
    gold_program: str | None = None
    gold_inds: tuple[str, ...] = ()


@dataclass(frozen=True)
class FinDocument:
    """One report excerpt: narrative text around a table, plus its question."""

    id: str
    pre_text: tuple[str, ...] = ()
    post_text: tuple[str, ...] = ()
    table: Table = field(default_factory=Table)
    question: QuestionRecord | None = None


def _as_sentences(value) -> tuple[str, ...]:
    if not value:
        return ()
    if isinstance(value, str):
        value = [value]
    return tuple(str(s) for s in value if str(s).strip())


def _gold_inds_list(raw) -> tuple[str, ...]:
    # FinQA ships gold_inds as a key->sentence mapping; a plain list also works.
    if isinstance(raw, dict):
        return tuple(str(v) for v in raw.values())
    return _as_sentences(raw)


def _build_table(raw_table, doc_id: str) -> Table:
    rows = [[str(c) for c in row] for row in (raw_table or [])]
    if not rows:
        return Table()
    header = rows[0]
    width = len(header)
    data = []
    for i, row in enumerate(rows[1:]):
        if len(row) < width:
            logger.warning("doc %s: padding short table row %d (%d -> %d cells)",
                           doc_id, i, len(row), width)
            row = row + [""] * (width - len(row))
        elif len(row) > width:
            logger.warning("doc %s: truncating long table row %d (%d -> %d cells)",
                           doc_id, i, len(row), width)
            row = row[:width]
        data.append(tuple(row))
    return Table(header=tuple(header), rows=tuple(data))


def parse_record(raw_json: str | dict) -> FinDocument:
    """Parse one FinQA-format object into a FinDocument.

    Missing optional fields become empty; short table rows are padded with
    empty cells (logged). Raises MalformedRecord when the id or question text
    is missing, or when the record carries no content at all.
    """
    record = json.loads(raw_json) if isinstance(raw_json, str) else raw_json
    doc_id = str(record.get("id") or "").strip()
    if not doc_id:
        raise MalformedRecord("record has no id")

    qa = record.get("qa") or {}
    question_text = str(qa.get("question") or "").strip()
    if not question_text:
        raise MalformedRecord(f"record {doc_id} has no question text")

    answer = str(qa.get("answer") or "").strip()
    exe_raw = qa.get("exe_ans")
    exe_ans = None
    if exe_raw is not None and not isinstance(exe_raw, bool):
        try:
            exe_ans = Decimal(str(exe_raw))
        except InvalidOperation:
            exe_ans = None
    if not answer:
        if exe_ans is None:
            raise MalformedRecord(f"record {doc_id} has no gold answer")
        answer = str(exe_raw)

    question = QuestionRecord(
        text=question_text,
        gold_answer=answer,
        gold_exe_answer=exe_ans,
        gold_program=str(qa["program"]) if qa.get("program") else None,
        gold_inds=_gold_inds_list(qa.get("gold_inds")),
    )

    pre_text = _as_sentences(record.get("pre_text"))
    post_text = _as_sentences(record.get("post_text"))
    table = _build_table(record.get("table"), doc_id)
    if not pre_text and not post_text and table.is_empty():
        raise MalformedRecord(f"record {doc_id} has no text and no table")

    return FinDocument(id=doc_id, pre_text=pre_text, post_text=post_text,
                       table=table, question=question)


def load_split(path: str | Path) -> list[FinDocument]:
    """Load a JSON-array split file, skipping malformed records with a log line."""
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    docs: list[FinDocument] = []
    seen: set[str] = set()
    for i, record in enumerate(raw):
        try:
            doc = parse_record(record)
        except MalformedRecord as exc:
            logger.warning("skipping record %d of %s: %s", i, path, exc)
            continue
        if doc.id in seen:
            logger.warning("skipping record %d of %s: duplicate id %s", i, path, doc.id)
            continue
        seen.add(doc.id)
        docs.append(doc)
    return docs


_ACRONYM_RE = re.compile(r"[A-Z][A-Z0-9]+$")


def _column_phrase(header_cell: str) -> str:
    # Lowercase the header for the sentence, but leave all-caps tokens (EPS) alone.
    words = header_cell.split()
    return " ".join(w if _ACRONYM_RE.fullmatch(w) else w.lower() for w in words)


def linearize_table(table: Table) -> list[str]:
    """One sentence per (data row, data column) cell, row-major.

    Template: "For {row key}, {column header} is {cell value}." Cell values are
    reproduced verbatim; empty cells produce no sentence.
    """
    sentences = []
    for row in table.rows:
        row_key = row[0].strip() if row else ""
        for col in range(1, len(table.header)):
            cell = row[col].strip()
            if not cell:
                continue
            sentences.append(f"For {row_key}, {_column_phrase(table.header[col].strip())} is {cell}.")
    return sentences


def context_years(table: Table) -> list[int]:
    """Distinct years mentioned anywhere in the table, ascending."""
    years = set()
    for row in (table.header,) + table.rows:
        for cell in row:
            for m in re.finditer(r"\b(19\d{2}|20\d{2}|2100)\b", cell):
                years.add(int(m.group(0)))
    return sorted(years)


def assemble_text(doc: FinDocument) -> str:
    """Concatenate pre-text, linearized table sentences, and post-text.

    Single spaces between sentences, Unicode NFC, internal whitespace
    collapsed. Numerals are never altered.
    """
    parts = list(doc.pre_text) + linearize_table(doc.table) + list(doc.post_text)
    text = " ".join(p.strip() for p in parts if p.strip())
    text = unicodedata.normalize("NFC", text)
    return re.sub(r"\s+", " ", text).strip()
