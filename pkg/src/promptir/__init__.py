"""Prompt-steered dense passage retrieval on a frozen transformer backbone.

A desk-scale retrieval stack: a from-scratch float64 autodiff engine, a
miniature transformer encoder steered by per-layer trainable prompt
matrices, contrastive pretraining, unified negative mining with BM25 and
dense retrievers, exact inner-product search with standard IR metrics,
and an HTTP encoding service that accepts prompts as request payloads.
"""

__version__ = "0.1.0"
