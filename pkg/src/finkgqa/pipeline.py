"""End-to-end pipeline commands behind the CLI.

Each command reads its upstream artifacts from the output directory, does one
stage of work, and atomically writes flat JSONL keyed by document id so any
stage can be re-run in isolation. With mock providers the whole chain is
deterministic: identical inputs produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluator, extraction, reasoner, retriever
from .embedding import EmbeddingConfig, LocalHashEmbedder, RemoteEmbedder
from .evaluator import EvalRecord, JudgeRules
from .extraction import DocumentExtractor
from .kg_schema import parse_triplets_file, serialize_triplets
from .llm_client import ChatClient, LlmConfig, MockChatTransport, ResponseCache
from .preprocess import FinDocument, assemble_text, linearize_table, load_split

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")


class MissingArtifact(FileNotFoundError):
    """An upstream artifact is absent; the message names the producing command."""


@dataclass
class ProviderConfig:
    kind: str = "mock"  # mock | http | local | none
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "FINKGQA_API_KEY"
    temperature: float = 0.2
    max_tokens: int = 2048
    max_retries: int = 3
    timeout: float = 60.0
    dim: int = 256
    answer_key: str = ""  # mock chat only: corpus file with gold answers
    scramble: bool = False


@dataclass
class PipelineConfig:
    seed: int = 13
    data: dict = field(default_factory=dict)  # split -> path
    output_dir: str = "out"
    cache_dir: str = "cache"
    chat: ProviderConfig = field(default_factory=ProviderConfig)
    embeddings: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="local"))
    judge: ProviderConfig = field(default_factory=lambda: ProviderConfig(kind="none"))
    extraction_backend: str = "llm"  # llm | table
    chunk_chars: int = extraction.DEFAULT_CHUNK_CHARS
    chunk_overlap: int = extraction.DEFAULT_CHUNK_OVERLAP
    max_inflight: int = 4
    prompt_asset: str = ""
    retriever_k: int = 10
    retriever_mode: str = "topk"  # topk | threshold
    retriever_threshold: float = 0.5
    hidden_size: int = 64
    learning_rate: float = 1e-3
    epochs: int = 20
    batch_size: int = 64
    baseline_label: str = "Llama (vanilla)"
    treatment_label: str = "Llama + KG"

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        cfg = cls()
        apply_overrides(cfg, _flatten(raw))
        base = path.parent
        cfg.data = {k: str(_resolve(base, v)) for k, v in cfg.data.items()}
        cfg.output_dir = str(_resolve(base, cfg.output_dir))
        cfg.cache_dir = str(_resolve(base, cfg.cache_dir))
        if cfg.prompt_asset:
            cfg.prompt_asset = str(_resolve(base, cfg.prompt_asset))
        if cfg.chat.answer_key:
            cfg.chat.answer_key = str(_resolve(base, cfg.chat.answer_key))
        return cfg


def _resolve(base: Path, value: str) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _flatten(raw: dict, prefix: str = "") -> dict:
    flat = {}
    for key, value in raw.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict) and key != "data":
            flat.update(_flatten(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def apply_overrides(cfg: PipelineConfig, overrides: dict) -> None:
    """Apply dotted-path overrides like retriever.k=5 onto the config."""
    aliases = {
        "retriever.k": "retriever_k",
        "retriever.mode": "retriever_mode",
        "retriever.threshold": "retriever_threshold",
        "retriever.hidden_size": "hidden_size",
        "retriever.learning_rate": "learning_rate",
        "retriever.epochs": "epochs",
        "retriever.batch_size": "batch_size",
        "extraction.backend": "extraction_backend",
        "extraction.chunk_chars": "chunk_chars",
        "extraction.chunk_overlap": "chunk_overlap",
        "extraction.max_inflight": "max_inflight",
        "extraction.prompt_asset": "prompt_asset",
        "report.baseline_label": "baseline_label",
        "report.treatment_label": "treatment_label",
    }
    for dotted, value in overrides.items():
        dotted = aliases.get(dotted, dotted)
        target = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part == "providers":
                continue
            if not hasattr(target, part):
                raise KeyError(f"unknown config key: {dotted}")
            target = getattr(target, part)
        name = parts[-1]
        if not hasattr(target, name):
            raise KeyError(f"unknown config key: {dotted}")
        current = getattr(target, name)
        if isinstance(current, bool) and isinstance(value, str):
            value = value.lower() in ("1", "true", "yes", "on")
        elif isinstance(current, (int, float)) and isinstance(value, str):
            value = type(current)(json.loads(value))
        setattr(target, name, value)


# ---------------------------------------------------------------------------
# Providers

def _mock_answer_key(path: str) -> dict[str, str]:
    key = {}
    if not path:
        return key
    for record in json.loads(Path(path).read_text(encoding="utf-8")):
        qa = record.get("qa") or {}
        question = str(qa.get("question") or "").strip()
        if question:
            key[question] = str(qa.get("answer") or qa.get("exe_ans") or "")
    return key


def build_chat_client(provider: ProviderConfig, cache_dir: str | None) -> ChatClient:
    cfg = LlmConfig(model_name=provider.model or "mock-chat",
                    temperature=provider.temperature,
                    max_tokens=provider.max_tokens,
                    endpoint=provider.endpoint,
                    api_key_env=provider.api_key_env,
                    max_retries=provider.max_retries,
                    timeout=provider.timeout)
    cache = ResponseCache(cache_dir)
    if provider.kind == "mock":
        transport = MockChatTransport(answer_key=_mock_answer_key(provider.answer_key),
                                      scramble=provider.scramble)
        return ChatClient(cfg, cache=cache, transport=transport)
    if provider.kind == "http":
        return ChatClient(cfg, cache=cache)
    raise ValueError(f"unsupported chat provider kind: {provider.kind}")


def build_embedder(provider: ProviderConfig, cache_dir: str | None):
    if provider.kind == "local":
        return LocalHashEmbedder(dim=provider.dim)
    if provider.kind == "http":
        cfg = EmbeddingConfig(endpoint=provider.endpoint, model_name=provider.model,
                              api_key_env=provider.api_key_env,
                              timeout=provider.timeout, max_retries=provider.max_retries)
        return RemoteEmbedder(cfg, cache=ResponseCache(cache_dir))
    raise ValueError(f"unsupported embeddings provider kind: {provider.kind}")


# ---------------------------------------------------------------------------
# Artifact paths and IO

def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def documents_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.output_dir) / f"documents_{split}.jsonl"


def triplets_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.output_dir) / f"triplets_{split}.jsonl"


def model_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "retriever_model.json"


def manifest_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "train_manifest.jsonl"


def rejected_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.output_dir) / f"rejected_{split}.jsonl"


def predictions_path(cfg: PipelineConfig, split: str, mode: str) -> Path:
    return Path(cfg.output_dir) / f"predictions_{split}_{mode}.jsonl"


def verdicts_path(cfg: PipelineConfig, split: str, mode: str) -> Path:
    return Path(cfg.output_dir) / f"verdicts_{split}_{mode}.jsonl"


def eval_summary_path(cfg: PipelineConfig, split: str, mode: str) -> Path:
    return Path(cfg.output_dir) / f"eval_{split}_{mode}.json"


def report_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.output_dir) / "report.txt"


def _configured_splits(cfg: PipelineConfig) -> list[str]:
    return [s for s in SPLITS if cfg.data.get(s)]


def _load_documents(cfg: PipelineConfig, split: str) -> list[FinDocument]:
    path = cfg.data.get(split)
    if not path or not Path(path).exists():
        raise MissingArtifact(f"dataset file for split {split!r} not found at {path!r}")
    return load_split(path)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path.name} not found; run `{producer}` first")
    return path


# ---------------------------------------------------------------------------
# Commands

def cmd_ingest(cfg: PipelineConfig) -> dict[str, int]:
    """Parse every configured split and write assembled document text."""
    counts = {}
    for split in _configured_splits(cfg):
        docs = _load_documents(cfg, split)
        lines = []
        for doc in docs:
            lines.append(json.dumps({
                "id": doc.id,
                "text": assemble_text(doc),
                "n_table_sentences": len(linearize_table(doc.table)),
            }))
        _write_atomic(documents_path(cfg, split), "".join(l + "\n" for l in lines))
        counts[split] = len(docs)
        logger.info("ingested %d documents for split %s", len(docs), split)
    return counts


def cmd_extract(cfg: PipelineConfig) -> dict[str, int]:
    """Extract triplets for every configured split into the triplet store."""
    counts = {}
    for split in _configured_splits(cfg):
        _require(documents_path(cfg, split), "ingest")
        docs = _load_documents(cfg, split)
        if cfg.extraction_backend == "table":
            per_doc = [extraction.extract_table_triplets(doc) for doc in docs]
        else:
            client = build_chat_client(cfg.chat, cfg.cache_dir)
            extractor = DocumentExtractor(client, asset_path=cfg.prompt_asset or None,
                                          chunk_chars=cfg.chunk_chars,
                                          chunk_overlap=cfg.chunk_overlap)
            with ThreadPoolExecutor(max_workers=max(cfg.max_inflight, 1)) as pool:
                results = list(pool.map(extractor.extract, docs))
            per_doc = [list(r.triplets) for r in results]
            # keep every rejected fragment on disk for auditing
            audit_lines = []
            for result in results:
                for fragment, violations in result.rejected:
                    audit_lines.append(json.dumps({
                        "doc_id": result.doc_id,
                        "fragment": fragment,
                        "violations": list(violations),
                    }))
            _write_atomic(rejected_path(cfg, split),
                          "".join(l + "\n" for l in audit_lines))
            if audit_lines:
                logger.info("split %s: %d fragments rejected by validation",
                            split, len(audit_lines))
        triplets = [t for group in per_doc for t in group]
        _write_atomic(triplets_path(cfg, split), serialize_triplets(triplets))
        counts[split] = len(triplets)
        logger.info("extracted %d triplets for split %s", len(triplets), split)
    return counts


def cmd_train_retriever(cfg: PipelineConfig) -> dict:
    """Label train-split triplets from gold supporting facts and fit the filter."""
    split = "train"
    store = _require(triplets_path(cfg, split), "extract")
    docs = _load_documents(cfg, split)
    triplets = parse_triplets_file(store.read_text(encoding="utf-8"))
    by_doc: dict[str, list] = {}
    for t in triplets:
        by_doc.setdefault(t.source_doc, []).append(t)

    embedder = build_embedder(cfg.embeddings, cfg.cache_dir)
    rows, labels, manifest = [], [], []
    for doc in docs:
        doc_triplets = by_doc.get(doc.id, [])
        doc_labels = retriever.label_triplets(doc, doc_triplets)
        for t, label in zip(doc_triplets, doc_labels):
            rows.append(retriever.build_features(doc.question, t, embedder).flatten())
            labels.append(label)
            manifest.append(json.dumps({"doc_id": doc.id, "triplet_id": t.triplet_id,
                                        "label": label}))
    if not rows:
        raise MissingArtifact("no training pairs; run `extract` on the train split first")

    X = np.stack(rows)
    y = np.asarray(labels, dtype=np.float64)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    train_cfg = retriever.TrainConfig(
        learning_rate=cfg.learning_rate,
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        hidden_size=cfg.hidden_size,
        positive_weight=(n_neg / n_pos) if n_pos and n_neg else 1.0,
    )
    model, history = retriever.train(X, y, train_cfg)
    retriever.save_model(model, model_path(cfg))
    _write_atomic(manifest_path(cfg), "".join(l + "\n" for l in manifest))
    logger.info("trained retriever on %d pairs (%d positive); final loss %.4f",
                len(y), n_pos, history[-1])
    return {"pairs": len(y), "positives": n_pos, "final_loss": history[-1]}


def cmd_answer(cfg: PipelineConfig, split: str, mode: str) -> int:
    """Answer the split's questions, from filtered facts (kg) or raw text (vanilla)."""
    if mode not in ("vanilla", "kg"):
        raise ValueError(f"mode must be vanilla or kg, got {mode!r}")
    docs = _load_documents(cfg, split)
    client = build_chat_client(cfg.chat, cfg.cache_dir)

    model = None
    embedder = None
    by_doc: dict[str, list] = {}
    if mode == "kg":
        store = _require(triplets_path(cfg, split), "extract")
        for t in parse_triplets_file(store.read_text(encoding="utf-8")):
            by_doc.setdefault(t.source_doc, []).append(t)
        model = retriever.load_model(_require(model_path(cfg), "train-retriever"))
        embedder = build_embedder(cfg.embeddings, cfg.cache_dir)

    def answer_one(doc: FinDocument) -> str:
        if mode == "vanilla":
            doc_text = assemble_text(doc)
            prompt = reasoner.build_text_prompt(doc.question, doc_text)
            answer = reasoner.answer_from_text(doc.question, doc_text, client)
            retrieved: list[str] = []
        else:
            candidates = by_doc.get(doc.id, [])
            if cfg.retriever_mode == "threshold":
                picked = retriever.filter_threshold(doc.question, candidates, model,
                                                    embedder, cfg.retriever_threshold)
            else:
                picked = retriever.filter_topk(doc.question, candidates, model,
                                               embedder, cfg.retriever_k)
            facts = [t for t, _ in picked]
            prompt = reasoner.build_reasoning_prompt(doc.question, facts)
            answer = reasoner.answer_question(doc.question, facts, client)
            retrieved = [t.triplet_id for t in facts]
        return json.dumps({
            "doc_id": doc.id,
            "question": doc.question.text,
            "answer": answer.raw_text,
            "kind": answer.kind,
            "fallback_used": answer.fallback_used,
            "retrieved": retrieved,
            "prompt": prompt,
        })

    # parallel per question, but written in document order for determinism
    with ThreadPoolExecutor(max_workers=max(cfg.max_inflight, 1)) as pool:
        lines = list(pool.map(answer_one, docs))
    _write_atomic(predictions_path(cfg, split, mode), "".join(l + "\n" for l in lines))
    logger.info("answered %d questions (%s, %s mode)", len(lines), split, mode)
    return len(lines)


def cmd_evaluate(cfg: PipelineConfig, split: str, mode: str) -> dict:
    """Judge predictions against gold answers and write verdicts plus a summary."""
    pred_file = _require(predictions_path(cfg, split, mode), "answer")
    docs = {doc.id: doc for doc in _load_documents(cfg, split)}

    records = []
    for line in pred_file.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        entry = json.loads(line)
        doc = docs.get(entry["doc_id"])
        if doc is None:
            logger.warning("prediction for unknown doc %s skipped", entry["doc_id"])
            continue
        raw_answer = str(entry["answer"])
        predicted = (reasoner.parse_answer(f"ANSWER: {raw_answer}")
                     if raw_answer.strip() else reasoner.Answer(raw_text=""))
        records.append(EvalRecord(
            doc_id=entry["doc_id"],
            predicted=predicted,
            gold=doc.question.gold_answer,
            gold_exe=doc.question.gold_exe_answer,
            retrieved=tuple(entry.get("retrieved", ())),
        ))

    judge_client = None
    if cfg.judge.kind in ("http", "mock"):
        judge_client = build_chat_client(cfg.judge, cfg.cache_dir)
    accuracy, judged = evaluator.evaluate_split(records, JudgeRules(),
                                                judge_client=judge_client)
    _write_atomic(verdicts_path(cfg, split, mode), evaluator.verdicts_jsonl(judged))
    summary = {
        "split": split,
        "mode": mode,
        "n": len(judged),
        "correct": sum(1 for r in judged if r.verdict == "CORRECT"),
        "accuracy": accuracy,
        "accuracy_pct": 100.0 * accuracy,
    }
    _write_atomic(eval_summary_path(cfg, split, mode),
                  json.dumps(summary, indent=2) + "\n")
    logger.info("evaluated %s/%s: accuracy %.4f", split, mode, accuracy)
    return summary


def _accuracy_pct(value: str | float, cfg: PipelineConfig) -> float:
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(value)
    except ValueError:
        pass
    path = Path(value)
    if not path.is_absolute():
        path = Path(cfg.output_dir) / path
    summary = json.loads(_require(path, "evaluate").read_text(encoding="utf-8"))
    return float(summary["accuracy_pct"])


def cmd_report(cfg: PipelineConfig, baseline: str | float, treatment: str | float) -> str:
    """Render the baseline-vs-treatment comparison table."""
    base = _accuracy_pct(baseline, cfg)
    treat = _accuracy_pct(treatment, cfg)
    table = evaluator.format_report(base, treat, cfg.baseline_label, cfg.treatment_label)
    _write_atomic(report_path(cfg), table)
    return table


def run_full_pipeline(cfg: PipelineConfig, split: str = "test") -> dict:
    """ingest -> extract -> train-retriever -> answer (both modes) -> evaluate -> report."""
    cmd_ingest(cfg)
    cmd_extract(cfg)
    cmd_train_retriever(cfg)
    cmd_answer(cfg, split, "vanilla")
    cmd_answer(cfg, split, "kg")
    vanilla = cmd_evaluate(cfg, split, "vanilla")
    kg = cmd_evaluate(cfg, split, "kg")
    if vanilla["accuracy_pct"] > 0:
        cmd_report(cfg, vanilla["accuracy_pct"], kg["accuracy_pct"])
    return {"vanilla": vanilla, "kg": kg}
