"""Prompt the LLM with filtered facts (or raw text) and parse its final answer."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .kg_schema import NormalizedValue, NotNumeric, parse_numeric
from .llm_client import ChatClient
from .preprocess import QuestionRecord
from .kg_schema import Triplet


class NoAnswerLine(ValueError):
    """The response carries no ANSWER: line (handled via last-line fallback)."""


@dataclass(frozen=True)
class Answer:
    raw_text: str
    parsed_value: NormalizedValue | None = None
    kind: str = "TEXT"  # NUMERIC | BOOLEAN | TEXT
    fallback_used: bool = False


_INSTRUCTION = (
    "Work through the question step by step if needed, then finish your reply "
    "with a single line of the form:\nANSWER: <value>"
)


def _fact_line(idx: int, t: Triplet) -> str:
    period = t.period.canonical()
    return f"{idx}. {t.subject} {t.relation} {t.object} ({period})"


def build_reasoning_prompt(question: QuestionRecord | str,
                           triplets: list[Triplet]) -> str:
    """Numbered fact list, then the question, then the answer-line instruction."""
    q_text = question.text if isinstance(question, QuestionRecord) else question
    if triplets:
        facts = "\n".join(_fact_line(i + 1, t) for i, t in enumerate(triplets))
    else:
        facts = "(none)"
    return (
        "Answer the question using the numbered financial facts below.\n\n"
        f"Facts:\n{facts}\n\n"
        f"Question: {q_text}\n\n"
        f"{_INSTRUCTION}\n"
    )


def build_text_prompt(question: QuestionRecord | str, doc_text: str) -> str:
    """Baseline prompt: the raw document text instead of filtered facts."""
    q_text = question.text if isinstance(question, QuestionRecord) else question
    return (
        "Answer the question using the document below.\n\n"
        f"Document:\n{doc_text}\n\n"
        f"Question: {q_text}\n\n"
        f"{_INSTRUCTION}\n"
    )


_ANSWER_LINE_RE = re.compile(r"^\s*ANSWER:\s*(.*\S)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_answer(raw: str) -> Answer:
    """Extract the final ANSWER: line and classify it.

    Never raises: responses without the marker fall back to the last non-empty
    line with the fallback flag set.
    """
    matches = _ANSWER_LINE_RE.findall(raw or "")
    fallback = not matches
    if matches:
        text = matches[-1].strip()
    else:
        lines = [ln.strip() for ln in (raw or "").splitlines() if ln.strip()]
        text = lines[-1] if lines else ""

    if text.lower().rstrip(".") in ("yes", "no"):
        return Answer(raw_text=text, kind="BOOLEAN", fallback_used=fallback)
    try:
        value = parse_numeric(text)
    except NotNumeric:
        return Answer(raw_text=text, kind="TEXT", fallback_used=fallback)
    return Answer(raw_text=text, parsed_value=value, kind="NUMERIC",
                  fallback_used=fallback)


def answer_question(question: QuestionRecord | str, triplets: list[Triplet],
                    client: ChatClient) -> Answer:
    """Ask the model to answer from the filtered facts."""
    return parse_answer(client.complete(build_reasoning_prompt(question, triplets)).text)


def answer_from_text(question: QuestionRecord | str, doc_text: str,
                     client: ChatClient) -> Answer:
    """Baseline route: ask the model to answer from the raw document text."""
    return parse_answer(client.complete(build_text_prompt(question, doc_text)).text)
