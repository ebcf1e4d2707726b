"""finkgqa: financial numerical QA with document-derived knowledge graphs.

Pipeline stages: preprocess (table linearization), extraction (LLM or
deterministic triplet extraction), retriever (MLP relevance filter), reasoner
(LLM answering), evaluator (execution-accuracy judging and reporting).
"""

__version__ = "0.1.0"
