"""Token-embedding fusion with a span-ranking coreference probe head.

Combines frozen per-layer token embeddings exported from several source
models (truncation, layer windows, L2 normalization, mean/sum/attention
aggregation), trains a small coreference head on the fused vectors, and
scores predictions with MUC, B-cubed, CEAF and their CoNLL average.
"""

__version__ = "0.1.0"
