import math
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from finkgqa.embedding import DimensionMismatch, LocalHashEmbedder
from finkgqa.kg_schema import Period, PeriodKind, UNKNOWN_PERIOD, make_triplet
from finkgqa.preprocess import QuestionRecord
from finkgqa.retriever import (
    DegenerateData,
    LengthMismatch,
    MlpModel,
    TrainConfig,
    bce_loss,
    build_features,
    feature_dim,
    filter_threshold,
    filter_topk,
    init_model,
    label_triplets,
    load_model,
    loss_and_gradients,
    metric_overlap,
    mlp_forward,
    question_year,
    save_model,
    train,
)

EMBEDDER = LocalHashEmbedder(dim=32)


def _question(text="what was net revenue in 2020?"):
    return QuestionRecord(text=text, gold_answer="x")


def _triplet(metric="NET_REVENUE", year=2020, unit="", company=None, value="5"):
    period = Period(PeriodKind.ANNUAL, year) if year else UNKNOWN_PERIOD
    return make_triplet(metric, Decimal(value), unit, company=company,
                        period=period, source_doc="d")


# ---------------------------------------------------------------------------
# Features


def test_equal_years_give_zero_distance():
    fv = build_features(_question(), _triplet(year=2020), EMBEDDER)
    assert fv.temporal_distance == 0.0
    assert fv.temporal_missing == 0.0


def test_missing_year_hits_cap_and_flag():
    fv = build_features(_question("what is the trend?"), _triplet(year=2020), EMBEDDER)
    assert fv.temporal_missing == 1.0
    assert fv.temporal_distance == 10.0
    fv = build_features(_question(), _triplet(year=None), EMBEDDER)
    assert fv.temporal_missing == 1.0
    assert fv.temporal_distance == 10.0


def test_distance_capped_at_ten():
    fv = build_features(_question("value in 1990?"), _triplet(year=2020), EMBEDDER)
    assert fv.temporal_distance == 10.0
    assert fv.temporal_missing == 0.0


def test_metric_overlap_hand_computed():
    # question tokens: what, is, net, revenue, of, alpha, corp, in, 2015 (9)
    # metric tokens: net, revenue; intersection 2, union 9 -> 2/9
    q = "what is net revenue of alpha corp in 2015"
    assert metric_overlap("NET_REVENUE", q) == pytest.approx(2 / 9)


def test_company_and_percent_flags():
    fv = build_features(_question("what did entergy report for 2020?"),
                        _triplet(company="Entergy", unit="percent"), EMBEDDER)
    assert fv.company_match == 1.0
    assert fv.unit_is_percent == 1.0
    fv = build_features(_question(), _triplet(company="Sysco"), EMBEDDER)
    assert fv.company_match == 0.0
    assert fv.unit_is_percent == 0.0


def test_feature_vector_length_constant():
    fvs = [
        build_features(_question(), _triplet(), EMBEDDER),
        build_features(_question("trend?"), _triplet(year=None, unit="percent"), EMBEDDER),
    ]
    for fv in fvs:
        assert fv.flatten().shape == (feature_dim(32),)


def test_features_pure():
    a = build_features(_question(), _triplet(), EMBEDDER).flatten()
    b = build_features(_question(), _triplet(), EMBEDDER).flatten()
    assert np.array_equal(a, b)


def test_question_year_first_token():
    assert question_year("change from 2019 to 2020") == 2019
    assert question_year("no year here") is None


# ---------------------------------------------------------------------------
# Forward pass


def test_zero_model_scores_half():
    model = MlpModel(W1=np.zeros((3, 4)), b1=np.zeros(3), W2=np.zeros(3), b2=0.0)
    assert mlp_forward(model, np.zeros(4)) == 0.5


def test_hand_computed_forward():
    model = MlpModel(W1=np.array([[1.0, 0.0], [0.0, 1.0]]),
                     b1=np.array([0.5, -0.5]),
                     W2=np.array([1.0, -1.0]), b2=0.25)
    x = np.array([0.2, 0.3])
    # z1 = [0.7, -0.2] -> relu [0.7, 0]; z2 = 0.7 + 0.25 = 0.95
    expected = 1.0 / (1.0 + math.exp(-0.95))
    assert mlp_forward(model, x) == pytest.approx(expected, abs=1e-12)


def test_score_strictly_inside_unit_interval():
    rng = np.random.default_rng(0)
    model = init_model(6, 4, seed=1)
    for _ in range(50):
        s = mlp_forward(model, rng.normal(size=6) * 100)
    assert 0.0 < s < 1.0


def test_forward_dimension_mismatch():
    model = init_model(4, 3, seed=0)
    with pytest.raises(DimensionMismatch):
        mlp_forward(model, np.zeros(5))


def test_monotone_in_logit():
    # Raising b2 raises the pre-sigmoid logit, so the score must rise.
    model = init_model(4, 3, seed=0)
    x = np.ones(4)
    scores = []
    for bump in (0.0, 0.5, 1.0, 2.0):
        m = MlpModel(W1=model.W1, b1=model.b1, W2=model.W2, b2=model.b2 + bump)
        scores.append(mlp_forward(m, x))
    assert scores == sorted(scores)
    assert len(set(scores)) == len(scores)


# ---------------------------------------------------------------------------
# Loss


def test_bce_half_score_is_ln2():
    assert bce_loss([0.5], [1], 1.0) == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_scores_tiny():
    assert bce_loss([1.0 - 1e-7, 1e-7], [1, 0], 1.0) <= 1e-6


def test_bce_mixed_batch_against_independent_computation():
    scores = [0.9, 0.2, 0.6]
    labels = [1, 0, 1]
    w = 2.0
    expected = (-(w * math.log(0.9)) - math.log(1 - 0.2) - (w * math.log(0.6))) / 3
    assert bce_loss(scores, labels, w) == pytest.approx(expected, abs=1e-12)


def test_bce_length_mismatch():
    with pytest.raises(LengthMismatch):
        bce_loss([0.5, 0.5], [1], 1.0)
    with pytest.raises(LengthMismatch):
        bce_loss([], [], 1.0)


# ---------------------------------------------------------------------------
# Gradients vs central finite differences


def _fd_gradients(model, X, y, w, eps=1e-4):
    """Finite-difference oracle over the public forward + loss path."""
    def loss_of(m):
        scores = np.array([mlp_forward(m, x) for x in X])
        return bce_loss(scores, y, w)

    grads = {}
    for name in ("W1", "b1", "W2"):
        param = getattr(model, name).astype(np.float64)
        grad = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = param.copy(); plus[idx] += eps
            minus = param.copy(); minus[idx] -= eps
            grad[idx] = (loss_of(_with(model, name, plus))
                         - loss_of(_with(model, name, minus))) / (2 * eps)
            it.iternext()
        grads[name] = grad
    plus = _with(model, "b2", model.b2 + eps)
    minus = _with(model, "b2", model.b2 - eps)
    grads["b2"] = (loss_of(plus) - loss_of(minus)) / (2 * eps)
    return grads


def _with(model, name, value):
    fields = {"W1": model.W1, "b1": model.b1, "W2": model.W2, "b2": model.b2}
    fields[name] = value
    return MlpModel(**fields)


def _max_rel_error(analytic, numeric):
    worst = 0.0
    for name in ("W1", "b1", "W2", "b2"):
        a = np.atleast_1d(np.asarray(analytic[name], dtype=np.float64))
        f = np.atleast_1d(np.asarray(numeric[name], dtype=np.float64))
        denom = np.maximum(np.abs(a) + np.abs(f), 1e-8)
        worst = max(worst, float((np.abs(a - f) / denom).max()))
    return worst


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(42)
    for trial in range(10):
        model = init_model(4, 3, seed=trial)
        X = rng.normal(size=(5, 4))
        y = rng.integers(0, 2, size=5).astype(np.float64)
        w = float(rng.uniform(0.5, 3.0))
        _, analytic = loss_and_gradients(model, X, y, w)
        numeric = _fd_gradients(model, X, y, w)
        assert _max_rel_error(analytic, numeric) < 1e-4


# ---------------------------------------------------------------------------
# Training


def _separable_set(n=500, seed=7):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(n, 2))
    margin = X[:, 0] + X[:, 1]
    X = X[np.abs(margin) > 0.05][:n]
    y = (X[:, 0] + X[:, 1] > 0).astype(np.float64)
    return X, y


def test_training_reaches_95_percent_on_separable_set():
    X, y = _separable_set()
    cfg = TrainConfig(learning_rate=0.01, epochs=200, batch_size=64, seed=3,
                      hidden_size=8, positive_weight=1.0)
    model, history = train(X, y, cfg)
    scores = np.array([mlp_forward(model, x) for x in X])
    accuracy = ((scores >= 0.5) == (y == 1)).mean()
    assert accuracy >= 0.95
    assert len(history) == 200
    assert history[-1] < history[0]


def test_training_bit_identical_for_same_seed():
    X, y = _separable_set(n=120)
    cfg = TrainConfig(learning_rate=0.01, epochs=20, batch_size=32, seed=11,
                      hidden_size=8, positive_weight=1.0)
    m1, h1 = train(X, y, cfg)
    m2, h2 = train(X, y, cfg)
    assert h1 == h2
    assert np.array_equal(m1.W1, m2.W1)
    assert np.array_equal(m1.b1, m2.b1)
    assert np.array_equal(m1.W2, m2.W2)
    assert m1.b2 == m2.b2


def test_single_class_rejected():
    X = np.zeros((4, 2))
    with pytest.raises(DegenerateData):
        train(X, np.ones(4), TrainConfig())


@settings(max_examples=15, deadline=None)
@given(st.integers(4, 24), st.integers(2, 5), st.integers(0, 1000))
def test_training_keeps_weights_finite(n, d, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=50.0, size=(n, d))
    y = np.zeros(n)
    y[: n // 2] = 1.0
    cfg = TrainConfig(learning_rate=0.05, epochs=3, batch_size=8,
                      seed=seed, hidden_size=4, positive_weight=2.0)
    model, history = train(X, y, cfg)
    for arr in (model.W1, model.b1, model.W2, [model.b2]):
        assert np.all(np.isfinite(arr))
    assert all(np.isfinite(h) for h in history)


def test_train_config_invariants():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


# ---------------------------------------------------------------------------
# Labeling


def test_label_triplets_hand_marked(corpus_docs):
    from finkgqa.extraction import extract_table_triplets

    doc = next(d for d in corpus_docs if d.id == "alpha-corp-2021")
    triplets = extract_table_triplets(doc)
    # gold sentence "the net revenue of 2021 is $120 ." marks only
    # NET_REVENUE@2021 positive: value 120 and year 2021 both present.
    assert [t.relation for t in triplets] == [
        "HAS_VALUE_IN_2020", "HAS_VALUE_IN_2020",
        "HAS_VALUE_IN_2021", "HAS_VALUE_IN_2021",
    ]
    assert label_triplets(doc, triplets) == [0, 0, 1, 0]


def test_label_year_mismatch_is_negative(corpus_docs):
    from finkgqa.extraction import extract_table_triplets

    doc = next(d for d in corpus_docs if d.id == "delta-group-assets")
    triplets = extract_table_triplets(doc)
    labels = dict(zip((t.relation for t in triplets), label_triplets(doc, triplets)))
    # 900 appears in the gold sentence, but its only year is 2010.
    assert labels["HAS_VALUE_IN_2009"] == 0
    assert labels["HAS_VALUE_IN_2010"] == 1


def test_label_grouped_digits_match(corpus_docs):
    from finkgqa.extraction import extract_table_triplets

    doc = next(d for d in corpus_docs if d.id == "delta-group-assets")
    triplets = extract_table_triplets(doc)
    by_rel = {t.relation: t for t in triplets}
    assert str(by_rel["HAS_VALUE_IN_2010"].value) == "1050"  # cell was "$1,050"


# ---------------------------------------------------------------------------
# Filtering


def _scored_fixture(n=20):
    question = _question()
    triplets = [_triplet(metric=f"METRIC_{i}", year=2000 + i, value=str(i + 1))
                for i in range(n)]
    model = init_model(feature_dim(32), 4, seed=5)
    return question, triplets, model


def test_topk_zero_and_total():
    question, triplets, model = _scored_fixture(5)
    assert filter_topk(question, triplets, model, EMBEDDER, 0) == []
    everything = filter_topk(question, triplets, model, EMBEDDER, 99)
    assert len(everything) == 5
    scores = [s for _, s in everything]
    assert scores == sorted(scores, reverse=True)


def test_topk_matches_brute_force_sort():
    question, triplets, model = _scored_fixture(20)
    top5 = filter_topk(question, triplets, model, EMBEDDER, 5)
    # independent full sort oracle
    scored = [(t, mlp_forward(model, build_features(question, t, EMBEDDER).flatten()))
              for t in triplets]
    oracle = sorted(scored, key=lambda pair: (-pair[1], pair[0].triplet_id))[:5]
    assert [(t.triplet_id, s) for t, s in top5] == [(t.triplet_id, s) for t, s in oracle]


def test_topk_subset_and_tie_determinism():
    question, triplets, model = _scored_fixture(8)
    zero = MlpModel(W1=np.zeros_like(model.W1), b1=np.zeros_like(model.b1),
                    W2=np.zeros_like(model.W2), b2=0.0)
    picked = filter_topk(question, triplets, zero, EMBEDDER, 3)
    ids = [t.triplet_id for t, _ in picked]
    assert ids == sorted(ids)  # all scores tie at 0.5; ids ascending
    assert {t.triplet_id for t, _ in picked} <= {t.triplet_id for t in triplets}


def test_threshold_mode():
    question, triplets, model = _scored_fixture(6)
    kept = filter_threshold(question, triplets, model, EMBEDDER, threshold=0.0)
    assert len(kept) == 6
    kept = filter_threshold(question, triplets, model, EMBEDDER, threshold=1.1)
    assert kept == []


# ---------------------------------------------------------------------------
# Model file


def test_model_save_load_round_trip(tmp_path):
    model = init_model(10, 4, seed=9)
    path = tmp_path / "model.json"
    save_model(model, path)
    loaded = load_model(path)
    assert np.array_equal(model.W1, loaded.W1)
    assert np.array_equal(model.b1, loaded.b1)
    assert np.array_equal(model.W2, loaded.W2)
    assert model.b2 == loaded.b2
    assert loaded.seed == 9


def test_model_loader_rejects_dimension_mismatch(tmp_path):
    import json

    model = init_model(10, 4, seed=9)
    path = tmp_path / "model.json"
    save_model(model, path)
    doc = json.loads(path.read_text())
    doc["hidden_size"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(DimensionMismatch):
        load_model(path)
