"""Question/triplet relevance filter: engineered features into a small MLP.

Features combine semantic signals (question embedding, triplet embedding,
their cosine) with structural ones (temporal distance, metric-token overlap,
company and unit flags). The two-layer network is trained from scratch with
weighted binary cross-entropy and Adam updates; everything is seeded and
bit-reproducible.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding import DimensionMismatch, Embedding, cosine, embed
from .kg_schema import Triplet, render_decimal
from .preprocess import FinDocument, QuestionRecord

TEMPORAL_CAP = 10.0
SCORE_EPS = 1e-12
LOSS_CLAMP = 1e-7


class LengthMismatch(ValueError):
    """Scores and labels differ in length."""


class DegenerateData(ValueError):
    """Training data contains a single class."""


@dataclass(frozen=True, eq=False)
class FeatureVector:
    q_emb: Embedding
    t_emb: Embedding
    cos_sim: float
    temporal_distance: float
    temporal_missing: float
    metric_overlap: float
    company_match: float
    unit_is_percent: float

    def flatten(self) -> np.ndarray:
        scalars = [self.cos_sim, self.temporal_distance, self.temporal_missing,
                   self.metric_overlap, self.company_match, self.unit_is_percent]
        return np.concatenate([self.q_emb.values, self.t_emb.values,
                               np.asarray(scalars, dtype=np.float64)])


N_STRUCTURAL = 6


def feature_dim(embedding_dim: int) -> int:
    return 2 * embedding_dim + N_STRUCTURAL


_YEAR_RE = re.compile(r"\b(19\d{2}|20\d{2}|2100)\b")


def question_year(text: str) -> int | None:
    """First four-digit year token in the question, if any."""
    m = _YEAR_RE.search(text)
    return int(m.group(0)) if m else None


def metric_overlap(metric_type: str, question_text: str) -> float:
    metric_tokens = {t for t in metric_type.lower().split("_") if t}
    question_tokens = set(re.findall(r"[a-z0-9]+", question_text.lower()))
    if not metric_tokens and not question_tokens:
        return 0.0
    union = metric_tokens | question_tokens
    return len(metric_tokens & question_tokens) / len(union)


def build_features(question: QuestionRecord, triplet: Triplet, provider) -> FeatureVector:
    """Assemble the semantic + structural feature block for one pair."""
    q_emb = embed(question.text, provider)
    t_emb = embed(triplet.text(), provider)

    q_year = question_year(question.text)
    t_year = triplet.period.year
    if q_year is None or t_year is None:
        distance, missing = TEMPORAL_CAP, 1.0
    else:
        distance, missing = min(abs(q_year - t_year), TEMPORAL_CAP), 0.0

    company_match = 0.0
    if triplet.company and triplet.company.lower() in question.text.lower():
        company_match = 1.0

    return FeatureVector(
        q_emb=q_emb,
        t_emb=t_emb,
        cos_sim=cosine(q_emb, t_emb),
        temporal_distance=float(distance),
        temporal_missing=missing,
        metric_overlap=metric_overlap(triplet.metric_type, question.text),
        company_match=company_match,
        unit_is_percent=1.0 if "percent" in triplet.unit.lower() else 0.0,
    )


@dataclass
class MlpModel:
    """Two-layer perceptron: ReLU hidden layer, sigmoid output."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: float
    seed: int = 0

    @property
    def input_dim(self) -> int:
        return int(self.W1.shape[1])

    @property
    def hidden_size(self) -> int:
        return int(self.W1.shape[0])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    seed: int = 13
    hidden_size: int = 64
    positive_weight: float = 1.0

    def __post_init__(self):
        for name in ("learning_rate", "epochs", "batch_size", "hidden_size",
                     "positive_weight"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def init_model(input_dim: int, hidden_size: int, seed: int) -> MlpModel:
    """Uniform init in +/- sqrt(6 / (fan_in + fan_out)) from a seeded generator."""
    rng = np.random.default_rng(seed)
    lim1 = np.sqrt(6.0 / (input_dim + hidden_size))
    lim2 = np.sqrt(6.0 / (hidden_size + 1))
    return MlpModel(
        W1=rng.uniform(-lim1, lim1, size=(hidden_size, input_dim)),
        b1=np.zeros(hidden_size),
        W2=rng.uniform(-lim2, lim2, size=hidden_size),
        b2=0.0,
        seed=seed,
    )


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500))),
                    np.exp(np.clip(z, -500, 500)) / (1.0 + np.exp(np.clip(z, -500, 500))))


def forward_batch(m: MlpModel, X: np.ndarray) -> np.ndarray:
    if X.shape[1] != m.input_dim:
        raise DimensionMismatch(f"input dim {X.shape[1]} != model dim {m.input_dim}")
    Z1 = X @ m.W1.T + m.b1
    H = np.maximum(Z1, 0.0)
    z2 = H @ m.W2 + m.b2
    return np.clip(_sigmoid(z2), SCORE_EPS, 1.0 - SCORE_EPS)


def mlp_forward(m: MlpModel, x: np.ndarray) -> float:
    """Score one flattened feature vector; always strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != m.input_dim:
        raise DimensionMismatch(f"input dim {x.shape} != model dim {m.input_dim}")
    return float(forward_batch(m, x[None, :])[0])


def bce_loss(scores, labels, positive_weight: float = 1.0) -> float:
    """Mean weighted binary cross-entropy with scores clamped away from 0 and 1."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape or s.size == 0:
        raise LengthMismatch(f"{s.shape} scores vs {y.shape} labels")
    s = np.clip(s, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    per_sample = -(positive_weight * y * np.log(s) + (1.0 - y) * np.log(1.0 - s))
    return float(per_sample.mean())


def loss_and_gradients(m: MlpModel, X: np.ndarray, y: np.ndarray,
                       positive_weight: float = 1.0):
    """Backprop through the weighted BCE; returns (loss, grads per parameter)."""
    n = X.shape[0]
    Z1 = X @ m.W1.T + m.b1
    H = np.maximum(Z1, 0.0)
    z2 = H @ m.W2 + m.b2
    s = np.clip(_sigmoid(z2), SCORE_EPS, 1.0 - SCORE_EPS)
    loss = bce_loss(s, y, positive_weight)

    # d(loss)/d(z2) for the weighted BCE, averaged over the batch.
    dz2 = ((1.0 - y) * s - positive_weight * y * (1.0 - s)) / n
    dW2 = H.T @ dz2
    db2 = float(dz2.sum())
    dH = np.outer(dz2, m.W2)
    dZ1 = dH * (Z1 > 0)
    dW1 = dZ1.T @ X
    db1 = dZ1.sum(axis=0)
    return loss, {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def train(X: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[MlpModel, list[float]]:
    """Seeded mini-batch training with Adam-style moment estimates.

    Identical (data, config) produces a bit-identical model; the returned
    history holds the mean per-sample loss of each epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    classes = set(np.unique(y).tolist())
    if not {0.0, 1.0} <= classes:
        raise DegenerateData(f"need both classes, got labels {sorted(classes)}")

    model = init_model(X.shape[1], cfg.hidden_size, cfg.seed)
    rng = np.random.default_rng(cfg.seed + 1)

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    moments = {k: (np.zeros_like(v), np.zeros_like(v))
               for k, v in (("W1", model.W1), ("b1", model.b1), ("W2", model.W2))}
    moments["b2"] = (0.0, 0.0)
    step = 0

    history: list[float] = []
    n = X.shape[0]
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grads = loss_and_gradients(model, X[batch], y[batch],
                                             cfg.positive_weight)
            epoch_loss += loss * len(batch)
            step += 1
            for name in ("W1", "b1", "W2"):
                m1, m2 = moments[name]
                g = grads[name]
                m1 = beta1 * m1 + (1 - beta1) * g
                m2 = beta2 * m2 + (1 - beta2) * g * g
                moments[name] = (m1, m2)
                m1_hat = m1 / (1 - beta1 ** step)
                m2_hat = m2 / (1 - beta2 ** step)
                param = getattr(model, name)
                setattr(model, name, param - cfg.learning_rate * m1_hat
                        / (np.sqrt(m2_hat) + eps))
            m1, m2 = moments["b2"]
            g = grads["b2"]
            m1 = beta1 * m1 + (1 - beta1) * g
            m2 = beta2 * m2 + (1 - beta2) * g * g
            moments["b2"] = (m1, m2)
            model.b2 = float(model.b2 - cfg.learning_rate * (m1 / (1 - beta1 ** step))
                             / (np.sqrt(m2 / (1 - beta2 ** step)) + eps))
        history.append(epoch_loss / n)
    return model, history


_NUMBER_TOKEN_RE = re.compile(r"[-+]?\d[\d,]*(?:\.\d+)?")


def label_triplets(doc: FinDocument, triplets: list[Triplet]) -> list[int]:
    """Weak labels from the gold supporting facts.

    A triplet is positive when its value (plain or digit-grouped) appears as a
    number token in a supporting sentence whose years do not contradict the
    triplet's period; everything else is negative.
    """
    labels = []
    for t in triplets:
        rendered = render_decimal(t.value)
        positive = False
        for sentence in (doc.question.gold_inds if doc.question else ()):
            numbers = {tok.replace(",", "") for tok in _NUMBER_TOKEN_RE.findall(sentence)}
            if rendered not in numbers and not _decimal_in(rendered, numbers):
                continue
            years = {int(y) for y in _YEAR_RE.findall(sentence)}
            if t.period.year is None or not years or t.period.year in years:
                positive = True
                break
        labels.append(1 if positive else 0)
    return labels


def _decimal_in(rendered: str, tokens: set[str]) -> bool:
    from decimal import Decimal, InvalidOperation

    try:
        target = Decimal(rendered)
    except InvalidOperation:
        return False
    for tok in tokens:
        try:
            if Decimal(tok) == target:
                return True
        except InvalidOperation:
            continue
    return False


def score_triplets(question: QuestionRecord, triplets: list[Triplet],
                   model: MlpModel, provider) -> list[tuple[Triplet, float]]:
    return [(t, mlp_forward(model, build_features(question, t, provider).flatten()))
            for t in triplets]


def filter_topk(question: QuestionRecord, triplets: list[Triplet], model: MlpModel,
                provider, k: int) -> list[tuple[Triplet, float]]:
    """The k best-scoring triplets, descending; ties break on ascending id."""
    if k <= 0:
        return []
    scored = score_triplets(question, triplets, model, provider)
    scored.sort(key=lambda pair: (-pair[1], pair[0].triplet_id))
    return scored[:k]


def filter_threshold(question: QuestionRecord, triplets: list[Triplet],
                     model: MlpModel, provider,
                     threshold: float = 0.5) -> list[tuple[Triplet, float]]:
    """Alternative selection mode: keep everything scoring at or above threshold."""
    scored = score_triplets(question, triplets, model, provider)
    scored = [pair for pair in scored if pair[1] >= threshold]
    scored.sort(key=lambda pair: (-pair[1], pair[0].triplet_id))
    return scored


def save_model(model: MlpModel, path: str | Path) -> None:
    doc = {
        "input_dim": model.input_dim,
        "hidden_size": model.hidden_size,
        "seed": model.seed,
        "W1": model.W1.tolist(),
        "b1": model.b1.tolist(),
        "W2": model.W2.tolist(),
        "b2": model.b2,
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path: str | Path) -> MlpModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    model = MlpModel(
        W1=np.asarray(doc["W1"], dtype=np.float64),
        b1=np.asarray(doc["b1"], dtype=np.float64),
        W2=np.asarray(doc["W2"], dtype=np.float64),
        b2=float(doc["b2"]),
        seed=int(doc.get("seed", 0)),
    )
    if model.W1.shape != (doc["hidden_size"], doc["input_dim"]) \
            or model.b1.shape != (doc["hidden_size"],) \
            or model.W2.shape != (doc["hidden_size"],):
        raise DimensionMismatch("model file dimensions are inconsistent")
    return model
