from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from finkgqa.kg_schema import (
    EmptyAfterNormalization,
    NormalizedValue,
    NotNumeric,
    Period,
    PeriodKind,
    TripletParseError,
    UNKNOWN_PERIOD,
    canonical_metric,
    make_triplet,
    normalize_period,
    parse_numeric,
    parse_triplets_file,
    period_from_string,
    relation_for_period,
    render_decimal,
    rescale_value,
    serialize_triplets,
    triplet_id_for,
    validate_triplet,
)

# ---------------------------------------------------------------------------
# Period normalization


@pytest.mark.parametrize("raw,expected", [
    ("2007", Period(PeriodKind.ANNUAL, 2007)),
    ("AS_OF_2010", Period(PeriodKind.AS_OF, 2010)),
    ("fiscal 2015", Period(PeriodKind.ANNUAL, 2015)),
    ("FY 2015", Period(PeriodKind.ANNUAL, 2015)),
    ("FY2015", Period(PeriodKind.ANNUAL, 2015)),
    ("2007-Q4", Period(PeriodKind.QUARTER, 2007, 4)),
    ("Q2 2019", Period(PeriodKind.QUARTER, 2019, 2)),
    ("as of december 31, 2010", Period(PeriodKind.AS_OF, 2010)),
    ("after 2015", Period(PeriodKind.AFTER, 2015)),
    ("prior to 2012", Period(PeriodKind.BEFORE, 2012)),
    ("before 2012", Period(PeriodKind.BEFORE, 2012)),
    ("UNKNOWN", UNKNOWN_PERIOD),
    ("", UNKNOWN_PERIOD),
    ("total operating expenses", UNKNOWN_PERIOD),
    ("987", UNKNOWN_PERIOD),
    ("2500", UNKNOWN_PERIOD),
])
def test_normalize_period_rule_table(raw, expected):
    assert normalize_period(raw, [2014, 2015]) == expected


def test_thereafter_uses_latest_context_year():
    assert normalize_period("thereafter", [2013, 2015]) == Period(PeriodKind.AFTER, 2015)
    assert normalize_period("thereafter", []) == UNKNOWN_PERIOD
    assert normalize_period("thereafter") == UNKNOWN_PERIOD


ALL_CANONICAL_PERIODS = [
    Period(PeriodKind.ANNUAL, 2015),
    Period(PeriodKind.QUARTER, 2007, 4),
    Period(PeriodKind.QUARTER, 2022, 1),
    Period(PeriodKind.AS_OF, 2010),
    Period(PeriodKind.AFTER, 2015),
    Period(PeriodKind.BEFORE, 1999),
    UNKNOWN_PERIOD,
]


@pytest.mark.parametrize("period", ALL_CANONICAL_PERIODS)
def test_normalize_period_idempotent_on_canonical(period):
    assert normalize_period(period.canonical()) == period
    assert period_from_string(period.canonical()) == period


periods = st.one_of(
    st.just(UNKNOWN_PERIOD),
    st.builds(Period, st.just(PeriodKind.ANNUAL), st.integers(1900, 2100)),
    st.builds(Period, st.just(PeriodKind.AS_OF), st.integers(1900, 2100)),
    st.builds(Period, st.just(PeriodKind.AFTER), st.integers(1900, 2100)),
    st.builds(Period, st.just(PeriodKind.BEFORE), st.integers(1900, 2100)),
    st.builds(Period, st.just(PeriodKind.QUARTER), st.integers(1900, 2100),
              st.integers(1, 4)),
)


@given(periods)
def test_normalize_period_idempotence_property(period):
    assert normalize_period(period.canonical()) == period


def test_period_invariants_enforced():
    with pytest.raises(ValueError):
        Period(PeriodKind.ANNUAL, None)
    with pytest.raises(ValueError):
        Period(PeriodKind.QUARTER, 2020)
    with pytest.raises(ValueError):
        Period(PeriodKind.ANNUAL, 1066)
    with pytest.raises(ValueError):
        Period(PeriodKind.QUARTER, 2020, 5)


# ---------------------------------------------------------------------------
# Numeric parsing


@pytest.mark.parametrize("raw,magnitude,unit", [
    ("5829 million USD", Decimal("5829"), "million USD"),
    ("$100,690,000", Decimal("100690000"), "USD"),
    ("(12.5)%", Decimal("-12.5"), "percent"),
    ("$1.2M", Decimal("1.2"), "million USD"),
    ("3.4 billion", Decimal("3.4"), "billion"),
    ("12 thousand EUR", Decimal("12"), "thousand EUR"),
    ("£250", Decimal("250"), "GBP"),
    ("-7.5 percent", Decimal("-7.5"), "percent"),
    ("42", Decimal("42"), ""),
    ("158 shares", Decimal("158"), "shares"),
    (".5", Decimal("0.5"), ""),
])
def test_parse_numeric_cases(raw, magnitude, unit):
    value = parse_numeric(raw)
    assert value.magnitude == magnitude
    assert value.unit == unit


def test_parse_numeric_rejects_non_numbers():
    for raw in ("", "no digits here", "n/a", "$"):
        with pytest.raises(NotNumeric):
            parse_numeric(raw)


def test_unit_carries_no_sign_or_grouping():
    value = parse_numeric("($1,234.5) million")
    assert value.magnitude == Decimal("-1234.5")
    assert "-" not in value.unit and "," not in value.unit


def test_rescale_is_explicit_opt_in():
    # Parsing keeps the stated scale; rescaling only happens on request.
    value = parse_numeric("$100,690,000")
    assert value == NormalizedValue(Decimal("100690000"), "USD")
    scaled = rescale_value(value, "million")
    assert scaled.magnitude == Decimal("100.69")
    assert scaled.unit == "million USD"
    back = rescale_value(scaled, "")
    assert back.magnitude == Decimal("100690000")
    assert back.unit == "USD"
    up = rescale_value(NormalizedValue(Decimal("1.2"), "billion USD"), "million")
    assert up == NormalizedValue(Decimal("1200"), "million USD")


UNIT_VOCAB = ["", "USD", "percent", "million USD", "billion USD",
              "thousand GBP", "million EUR", "shares"]

normalized_values = st.builds(
    NormalizedValue,
    st.decimals(allow_nan=False, allow_infinity=False, places=4,
                min_value=Decimal("-1e12"), max_value=Decimal("1e12")),
    st.sampled_from(UNIT_VOCAB),
)


@given(normalized_values)
def test_parse_numeric_render_round_trip(value):
    assert parse_numeric(value.render()) == value


# ---------------------------------------------------------------------------
# Metric canonicalization


@pytest.mark.parametrize("raw,expected", [
    ("net revenue", "NET_REVENUE"),
    ("NET_REVENUE", "NET_REVENUE"),
    ("operating  expenses (total)", "OPERATING_EXPENSES_TOTAL"),
    ("earnings-per-share", "EARNINGS_PER_SHARE"),
    ("  total rental expense  ", "TOTAL_RENTAL_EXPENSE"),
])
def test_canonical_metric(raw, expected):
    assert canonical_metric(raw) == expected


def test_canonical_metric_empty():
    with pytest.raises(EmptyAfterNormalization):
        canonical_metric("  --  ")


# ---------------------------------------------------------------------------
# Triplet validation and serialization


def entergy_triplet():
    return make_triplet("NET_REVENUE", Decimal("5829"), "million USD",
                        company="Entergy", period=Period(PeriodKind.ANNUAL, 2015),
                        source_doc="doc-1")


def test_reference_triplet_is_valid():
    t = entergy_triplet()
    assert t.subject == "NET_REVENUE:Entergy"
    assert t.relation == "HAS_VALUE_IN_2015"
    assert t.object == "5829 million USD"
    assert validate_triplet(t) == []


def test_validate_flags_non_canonical_metric():
    t = entergy_triplet()
    bad = make_triplet("NET_REVENUE", t.value, t.unit, company=t.company,
                       period=t.period, source_doc=t.source_doc)
    bad = type(bad)(**{**bad.__dict__, "metric_type": "net revenue"})
    assert "MetricNotCanonical" in validate_triplet(bad)


def test_validate_flags_object_value_mismatch():
    t = entergy_triplet()
    bad = type(t)(**{**t.__dict__, "object": "approximately 5829 million USD"})
    assert "ObjectValueMismatch" in validate_triplet(bad)


def test_validate_flags_bad_relation_and_id():
    t = entergy_triplet()
    bad = type(t)(**{**t.__dict__, "relation": "VALUED_AT_2015"})
    assert "RelationMalformed" in validate_triplet(bad)
    bad = type(t)(**{**t.__dict__, "triplet_id": "0" * 32})
    assert "TripletIdMismatch" in validate_triplet(bad)


def test_has_value_relation_for_unknown_period():
    t = make_triplet("REVENUE", Decimal("10"), period=UNKNOWN_PERIOD)
    assert t.relation == "HAS_VALUE"
    assert validate_triplet(t) == []


def test_triplet_id_is_stable_content_hash():
    a = triplet_id_for("d", "S", "R", "O")
    assert a == triplet_id_for("d", "S", "R", "O")
    assert a != triplet_id_for("d", "S", "R", "O2")
    assert len(a) == 32
    int(a, 16)  # hex


def test_serialize_empty_is_empty_string():
    assert serialize_triplets([]) == ""
    assert parse_triplets_file("") == []


def test_entergy_round_trip():
    t = entergy_triplet()
    line = serialize_triplets([t])
    assert line.count("\n") == 1
    assert parse_triplets_file(line) == [t]


def test_parse_error_carries_line_number():
    good = serialize_triplets([entergy_triplet()])
    with pytest.raises(TripletParseError) as err:
        parse_triplets_file(good + "{broken\n")
    assert err.value.line_no == 2


metrics = st.from_regex(r"[A-Z][A-Z0-9_]{0,12}", fullmatch=True)
companies = st.one_of(st.none(), st.from_regex(r"[A-Za-z][A-Za-z0-9 ]{0,10}",
                                               fullmatch=True).map(str.strip))
values = st.decimals(allow_nan=False, allow_infinity=False, places=4,
                     min_value=Decimal("-1e12"), max_value=Decimal("1e12"))
triplets = st.builds(
    make_triplet,
    metric_type=metrics,
    value=values,
    unit=st.sampled_from(UNIT_VOCAB),
    company=companies,
    period=periods,
    source_doc=st.from_regex(r"[a-z0-9-]{1,16}", fullmatch=True),
)


@given(st.lists(triplets, max_size=20))
def test_serialize_parse_identity(ts):
    text = serialize_triplets(ts)
    back = parse_triplets_file(text)
    assert back == ts
    assert serialize_triplets(back) == text
    for t in back:
        assert validate_triplet(t) == []


@given(triplets)
def test_generated_triplets_are_valid(t):
    assert validate_triplet(t) == []
    assert relation_for_period(t.period) == t.relation
    assert t.object.startswith(render_decimal(t.value))
