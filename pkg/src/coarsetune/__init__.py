"""Coarse-tuning for ad-hoc document retrieval, at desk scale.

Pipeline: pre-train a small BERT-style encoder with MLM, coarse-tune it on a
click log with MLM plus query-document pair prediction, fine-tune it on qrels
and re-rank BM25 candidates.
"""

__version__ = "0.1.0"
