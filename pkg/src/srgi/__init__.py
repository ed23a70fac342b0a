"""Session-based recommendation with global co-occurrence information.

Three model variants share one pipeline: a session-graph GNN baseline,
a fusion variant that attends over global co-occurrence neighbors, and a
constrained variant that regularizes item embeddings with a graph
contrastive objective. Training runs on a small hand-rolled reverse-mode
autodiff engine; no deep-learning framework is required.
"""

__version__ = "0.1.0"
