"""Financial-fact triplet schema: periods, numeric values, validation, JSONL store.

Every fact extracted from a document is a subject/relation/object triplet with
typed attributes (metric, company, period, value, unit). This module owns the
canonical forms and keeps everything downstream of extraction schema-checked.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from enum import Enum


class NotNumeric(ValueError):
    """Raised when a value string contains no parseable number."""


class EmptyAfterNormalization(ValueError):
    """Raised when metric canonicalization leaves nothing."""


class TripletParseError(ValueError):
    """Raised by the triplet-store parser; carries the failing line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


METRIC_RE = re.compile(r"[A-Z][A-Z0-9_]*")
RELATION_RE = re.compile(r"HAS_VALUE_(IN|AS_OF|AFTER|BEFORE)_.+")

MIN_YEAR = 1900
MAX_YEAR = 2100

# Canonical field order of the JSONL triplet store.
TRIPLET_KEYS = (
    "subject", "relation", "object", "metric_type", "company",
    "period", "value", "unit", "source_doc", "triplet_id",
)


class PeriodKind(str, Enum):
    ANNUAL = "ANNUAL"
    QUARTER = "QUARTER"
    AS_OF = "AS_OF"
    AFTER = "AFTER"
    BEFORE = "BEFORE"
    UNKNOWN = "UNKNOWN"


@dataclass(frozen=True)
class Period:
    """Normalized temporal qualifier of a fact."""

    kind: PeriodKind = PeriodKind.UNKNOWN
    year: int | None = None
    quarter: int | None = None

    def __post_init__(self):
        if self.kind is not PeriodKind.UNKNOWN and self.year is None:
            raise ValueError(f"{self.kind.value} period requires a year")
        if self.year is not None and not MIN_YEAR <= self.year <= MAX_YEAR:
            raise ValueError(f"year {self.year} outside {MIN_YEAR}-{MAX_YEAR}")
        if self.kind is PeriodKind.QUARTER and self.quarter is None:
            raise ValueError("QUARTER period requires a quarter")
        if self.quarter is not None and not 1 <= self.quarter <= 4:
            raise ValueError(f"quarter {self.quarter} outside 1-4")

    def canonical(self) -> str:
        if self.kind is PeriodKind.UNKNOWN:
            return "UNKNOWN"
        if self.kind is PeriodKind.ANNUAL:
            return f"{self.year}"
        if self.kind is PeriodKind.QUARTER:
            return f"{self.year}-Q{self.quarter}"
        return f"{self.kind.value}_{self.year}"


UNKNOWN_PERIOD = Period()

_CANONICAL_PERIOD_RES: list[tuple[re.Pattern, PeriodKind]] = [
    (re.compile(r"(\d{4})-Q([1-4])$"), PeriodKind.QUARTER),
    (re.compile(r"AS_OF_(\d{4})$"), PeriodKind.AS_OF),
    (re.compile(r"AFTER_(\d{4})$"), PeriodKind.AFTER),
    (re.compile(r"BEFORE_(\d{4})$"), PeriodKind.BEFORE),
    (re.compile(r"(\d{4})$"), PeriodKind.ANNUAL),
]


def period_from_string(canonical: str) -> Period:
    """Strict inverse of Period.canonical(); raises ValueError on anything else."""
    s = canonical.strip()
    if s == "UNKNOWN":
        return UNKNOWN_PERIOD
    for pattern, kind in _CANONICAL_PERIOD_RES:
        m = pattern.fullmatch(s)
        if m:
            quarter = int(m.group(2)) if kind is PeriodKind.QUARTER else None
            return Period(kind, int(m.group(1)), quarter)
    raise ValueError(f"not a canonical period string: {canonical!r}")


def _safe_year(text: str) -> int | None:
    year = int(text)
    return year if MIN_YEAR <= year <= MAX_YEAR else None


def normalize_period(raw: str, context_years: list[int] | None = None) -> Period:
    """Map a free-text temporal expression to a canonical Period.

    Rule table: "YYYY" / "fiscal YYYY" / "FY YYYY" are annual; "YYYY-Qn" /
    "Qn YYYY" quarterly; "as of ... YYYY" point-in-time; "thereafter" /
    "after YYYY" open-ended forward ("thereafter" resolves against the latest
    context year); "prior to YYYY" / "before YYYY" backward. Anything else is
    UNKNOWN; canonical strings are fixed points.
    """
    s = (raw or "").strip()
    if not s:
        return UNKNOWN_PERIOD

    try:
        return period_from_string(s)
    except ValueError:
        pass

    low = re.sub(r"\s+", " ", s.lower())

    m = re.fullmatch(r"(?:fiscal(?: year)?|fy) ?(\d{4})", low)
    if m:
        year = _safe_year(m.group(1))
        return Period(PeriodKind.ANNUAL, year) if year else UNKNOWN_PERIOD

    m = re.fullmatch(r"q([1-4]) (\d{4})", low)
    if m:
        year = _safe_year(m.group(2))
        return Period(PeriodKind.QUARTER, year, int(m.group(1))) if year else UNKNOWN_PERIOD
    m = re.fullmatch(r"(\d{4})[ -]q([1-4])", low)
    if m:
        year = _safe_year(m.group(1))
        return Period(PeriodKind.QUARTER, year, int(m.group(2))) if year else UNKNOWN_PERIOD

    if low.startswith("as of"):
        m = re.search(r"(\d{4})", low)
        if m:
            year = _safe_year(m.group(1))
            return Period(PeriodKind.AS_OF, year) if year else UNKNOWN_PERIOD
        return UNKNOWN_PERIOD

    if "thereafter" in low:
        years = [y for y in (context_years or []) if MIN_YEAR <= y <= MAX_YEAR]
        return Period(PeriodKind.AFTER, max(years)) if years else UNKNOWN_PERIOD

    m = re.fullmatch(r"after (\d{4})", low)
    if m:
        year = _safe_year(m.group(1))
        return Period(PeriodKind.AFTER, year) if year else UNKNOWN_PERIOD

    m = re.fullmatch(r"(?:prior to|before) (\d{4})", low)
    if m:
        year = _safe_year(m.group(1))
        return Period(PeriodKind.BEFORE, year) if year else UNKNOWN_PERIOD

    return UNKNOWN_PERIOD


def relation_for_period(period: Period) -> str:
    """Canonical relation name for a period (HAS_VALUE when period is unknown)."""
    if period.kind is PeriodKind.UNKNOWN:
        return "HAS_VALUE"
    if period.kind is PeriodKind.ANNUAL:
        return f"HAS_VALUE_IN_{period.year}"
    if period.kind is PeriodKind.QUARTER:
        return f"HAS_VALUE_IN_{period.year}_Q{period.quarter}"
    return f"HAS_VALUE_{period.kind.value}_{period.year}"


@dataclass(frozen=True)
class NormalizedValue:
    """A parsed numeric value: exact magnitude plus a textual unit."""

    magnitude: Decimal
    unit: str = ""

    def render(self) -> str:
        text = render_decimal(self.magnitude)
        return f"{text} {self.unit}" if self.unit else text


def render_decimal(value: Decimal) -> str:
    """Plain (non-scientific) decimal string."""
    return format(value, "f")


_CURRENCY_SYMBOLS = {"$": "USD", "€": "EUR", "£": "GBP"}
_CURRENCY_CODES = {"usd": "USD", "eur": "EUR", "gbp": "GBP"}
_SCALE_WORDS = {
    "thousand": "thousand", "thousands": "thousand", "k": "thousand",
    "million": "million", "millions": "million", "m": "million",
    "mm": "million", "mn": "million",
    "billion": "billion", "billions": "billion", "b": "billion", "bn": "billion",
}
_PERCENT_WORDS = {"%", "percent", "percentage", "pct"}

_NUMBER_RE = re.compile(r"[-+]?(?:\d[\d,]*(?:\.\d+)?|\.\d+)")
_PAREN_NUMBER_RE = re.compile(r"\(\s*[^()]*\d[^()]*\)")
_UNIT_TOKEN_RE = re.compile(r"[A-Za-z%]+|[^\sA-Za-z\d.,()+\-]")


def parse_numeric(raw: str) -> NormalizedValue:
    """Parse a human-readable value string into magnitude and unit.

    Currency symbols and digit grouping are stripped, accounting parentheses
    negate, scale words and suffixes (thousand/K, million/M, billion/B) go into
    the unit alongside any currency, and "%" becomes the unit "percent". The
    stated scale is kept literally; nothing is rescaled.
    """
    s = str(raw)
    negative = False

    m = _PAREN_NUMBER_RE.search(s)
    if m:
        negative = True
        s = s[:m.start()] + m.group(0)[1:-1] + s[m.end():]

    currency = None
    for symbol, code in _CURRENCY_SYMBOLS.items():
        if symbol in s:
            currency = currency or code
            s = s.replace(symbol, " ")

    m = _NUMBER_RE.search(s)
    if m is None:
        raise NotNumeric(f"no number in {raw!r}")
    try:
        magnitude = Decimal(m.group(0).replace(",", ""))
    except InvalidOperation as exc:
        raise NotNumeric(f"unparseable number in {raw!r}") from exc
    if negative and magnitude >= 0:
        magnitude = -magnitude

    remainder = s[:m.start()] + " " + s[m.end():]
    scale = None
    percent = False
    leftovers: list[str] = []
    for token in _UNIT_TOKEN_RE.findall(remainder):
        low = token.lower()
        if low in _PERCENT_WORDS:
            percent = True
        elif low in _SCALE_WORDS and scale is None:
            scale = _SCALE_WORDS[low]
        elif low in _CURRENCY_CODES and currency is None:
            currency = _CURRENCY_CODES[low]
        else:
            leftovers.append(token)

    if percent:
        return NormalizedValue(magnitude, "percent")
    parts = [p for p in (scale, currency) if p] + leftovers
    return NormalizedValue(magnitude, " ".join(parts))


_SCALE_POWERS = {"": 0, "thousand": 3, "million": 6, "billion": 9}


def rescale_value(value: NormalizedValue, target_scale: str) -> NormalizedValue:
    """Re-express a value at another scale word, e.g. 100690000 USD as
    100.69 million USD. Opt-in only: nothing in the pipeline calls this
    implicitly, so stored values always keep their stated scale.
    """
    if target_scale not in _SCALE_POWERS:
        raise ValueError(f"unknown scale {target_scale!r}")
    tokens = value.unit.split()
    current = ""
    rest = tokens
    if tokens and tokens[0] in _SCALE_POWERS:
        current, rest = tokens[0], tokens[1:]
    shift = _SCALE_POWERS[current] - _SCALE_POWERS[target_scale]
    magnitude = value.magnitude.scaleb(shift)
    unit = " ".join(([target_scale] if target_scale else []) + rest)
    return NormalizedValue(magnitude, unit)


def canonical_metric(raw: str) -> str:
    """Uppercase a metric name, collapsing runs of non-alphanumerics to "_"."""
    text = re.sub(r"[^A-Za-z0-9]+", "_", raw).strip("_").upper()
    if not text:
        raise EmptyAfterNormalization(f"no metric content in {raw!r}")
    return text


def triplet_id_for(source_doc: str, subject: str, relation: str, obj: str) -> str:
    """Stable 128-bit content hash of a triplet's identifying fields."""
    payload = "\x1e".join((source_doc, subject, relation, obj)).encode("utf-8")
    return hashlib.blake2b(payload, digest_size=16).hexdigest()


@dataclass(frozen=True)
class Triplet:
    """One knowledge-graph fact with its typed attributes."""

    subject: str
    relation: str
    object: str
    metric_type: str
    company: str | None
    period: Period
    value: Decimal
    unit: str
    source_doc: str
    triplet_id: str

    def text(self) -> str:
        """Rendering used when the triplet is embedded or shown to a model."""
        return f"{self.subject} {self.relation} {self.object}"


def make_triplet(
    metric_type: str,
    value: Decimal,
    unit: str = "",
    company: str | None = None,
    period: Period = UNKNOWN_PERIOD,
    source_doc: str = "",
    subject: str | None = None,
    relation: str | None = None,
    obj: str | None = None,
) -> Triplet:
    """Build a triplet, deriving subject/relation/object and the content hash."""
    if subject is None:
        subject = f"{metric_type}:{company}" if company else metric_type
    if relation is None:
        relation = relation_for_period(period)
    if obj is None:
        obj = NormalizedValue(value, unit).render()
    return Triplet(
        subject=subject,
        relation=relation,
        object=obj,
        metric_type=metric_type,
        company=company or None,
        period=period,
        value=value,
        unit=unit,
        source_doc=source_doc,
        triplet_id=triplet_id_for(source_doc, subject, relation, obj),
    )


def validate_triplet(t: Triplet) -> list[str]:
    """Return the names of every violated invariant (empty list means valid)."""
    violations = []
    if not t.subject:
        violations.append("SubjectEmpty")
    if not METRIC_RE.fullmatch(t.metric_type or ""):
        violations.append("MetricNotCanonical")
    if t.relation != "HAS_VALUE" and not RELATION_RE.fullmatch(t.relation or ""):
        violations.append("RelationMalformed")
    if not t.object.startswith(render_decimal(t.value)):
        violations.append("ObjectValueMismatch")
    if t.triplet_id != triplet_id_for(t.source_doc, t.subject, t.relation, t.object):
        violations.append("TripletIdMismatch")
    return violations


def triplet_to_dict(t: Triplet) -> dict:
    return {
        "subject": t.subject,
        "relation": t.relation,
        "object": t.object,
        "metric_type": t.metric_type,
        "company": t.company,
        "period": t.period.canonical(),
        "value": render_decimal(t.value),
        "unit": t.unit,
        "source_doc": t.source_doc,
        "triplet_id": t.triplet_id,
    }


def triplet_from_dict(d: dict) -> Triplet:
    return Triplet(
        subject=d["subject"],
        relation=d["relation"],
        object=d["object"],
        metric_type=d["metric_type"],
        company=d.get("company") or None,
        period=period_from_string(d["period"]),
        value=Decimal(d["value"]),
        unit=d.get("unit", ""),
        source_doc=d.get("source_doc", ""),
        triplet_id=d["triplet_id"],
    )


def serialize_triplets(triplets: list[Triplet]) -> str:
    """Newline-delimited JSON, one triplet per line, canonical key order."""
    return "".join(json.dumps(triplet_to_dict(t)) + "\n" for t in triplets)


def parse_triplets_file(text: str) -> list[Triplet]:
    """Inverse of serialize_triplets; raises TripletParseError with line number."""
    triplets = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            triplets.append(triplet_from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError, InvalidOperation) as exc:
            raise TripletParseError(line_no, str(exc)) from exc
    return triplets
