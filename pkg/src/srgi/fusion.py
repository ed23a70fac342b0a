"""Fusion variant: session-aware attention over global co-occurrence
neighbors, stacked aggregation layers, and additive fusion with the
session-level item vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndiff
from .bgnn import (BGNN, ForwardContext, ModelParams, init_params,
                   session_aggregate, session_propagate)
from .graphs import GlobalGraph, SessionGraph, neighbor_lists
from .ndiff import Tensor


@dataclass
class FusionLayerParams:
    w_att: Tensor  # (d+1, d+1) attention transform over [affinity || edge weight]
    q_att: Tensor  # (d+1,)     attention readout
    w_agg: Tensor  # (d, 2d)    aggregation of [self || neighbor summary]


@dataclass
class FusionParams:
    layers: list[FusionLayerParams]
    dropout: float = 0.5

    @property
    def depth(self) -> int:
        return len(self.layers)


def init_fusion_params(rng: np.random.Generator, dim: int, depth: int,
                       dropout: float = 0.5) -> FusionParams:
    """Per-layer parameter draws, appended after the shared base block."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    from .bgnn import _gaussian
    layers = [
        FusionLayerParams(
            w_att=_gaussian(rng, dim + 1, dim + 1),
            q_att=_gaussian(rng, dim + 1),
            w_agg=_gaussian(rng, dim, 2 * dim),
        )
        for _ in range(depth)
    ]
    return FusionParams(layers=layers, dropout=dropout)


def global_attention_weights(sess_vec: Tensor, neigh_vecs: Tensor,
                             edge_weights, layer: FusionLayerParams) -> Tensor:
    """Softmax-normalized importance of each global neighbor for this session.

    Raw scores come from the session-affinity of each neighbor vector
    concatenated with the raw co-occurrence weight of its edge.
    """
    q = neigh_vecs.shape[0]
    if q == 0:
        raise ValueError("empty neighbor list")
    w_col = np.asarray(edge_weights, dtype=np.float64).reshape(q, 1)
    affinity = ndiff.mul(sess_vec, neigh_vecs)                 # (q, d)
    feats = ndiff.concat([affinity, Tensor(w_col)], axis=1)    # (q, d+1)
    hidden = ndiff.leaky_relu(ndiff.matmul(feats, ndiff.transpose(layer.w_att)))
    scores = ndiff.matmul(hidden, layer.q_att)                 # (q,)
    return ndiff.softmax(scores, axis=-1)


def global_propagate(reps: dict[int, Tensor], nbr_lists, items,
                     sess_vec: Tensor, layer: FusionLayerParams,
                     dim: int) -> dict[int, Tensor]:
    """Attention-weighted neighbor summaries for each requested item.

    ``reps`` must already hold the previous-layer vector of every neighbor.
    Items without global neighbors get a zero summary.
    """
    out: dict[int, Tensor] = {}
    for v in items:
        nbrs = nbr_lists[v]
        if not nbrs:
            out[v] = Tensor(np.zeros(dim))
            continue
        stacked = ndiff.stack_rows([reps[u] for u, _ in nbrs])
        pi = global_attention_weights(sess_vec, stacked,
                                      [w for _, w in nbrs], layer)
        out[v] = ndiff.matmul(pi, stacked)
    return out


def global_aggregate(h_self: Tensor, h_neigh: Tensor,
                     layer: FusionLayerParams) -> Tensor:
    """One aggregation step: relu of the transformed [self || neighbors] pair."""
    joint = ndiff.concat([h_self, h_neigh], axis=-1)
    return ndiff.relu(ndiff.matmul(joint, ndiff.transpose(layer.w_agg)))


def fuse_representations(h_global: Tensor, h_session: Tensor) -> Tensor:
    """Elementwise sum of the global and session branches."""
    return ndiff.add(h_global, h_session)


class FusionModel(BGNN):
    """Base model plus a k-layer global-neighbor encoder fused per item."""

    variant = "srgi-fm"

    def __init__(self, params: ModelParams, fusion: FusionParams,
                 graph: GlobalGraph | None, loss_kind: str = "bce"):
        super().__init__(params, loss_kind=loss_kind)
        self.fusion = fusion
        self.graph = graph
        self._nbrs = neighbor_lists(graph) if graph is not None else None

    @classmethod
    def create(cls, seed, n_items: int, dim: int, max_len: int = 50,
               logit_scale: float = 12.0, loss_kind: str = "bce",
               depth: int = 1, dropout: float = 0.5,
               graph: GlobalGraph | None = None, **kw):
        rng = np.random.default_rng(seed)
        base = init_params(rng, n_items, dim, max_len, logit_scale)
        fusion = init_fusion_params(rng, dim, depth, dropout)
        return cls(base, fusion, graph, loss_kind=loss_kind)

    def attach_graph(self, graph: GlobalGraph) -> None:
        self.graph = graph
        self._nbrs = neighbor_lists(graph)

    def named_params(self) -> list[tuple[str, Tensor]]:
        named = self.params.named()
        for i, layer in enumerate(self.fusion.layers):
            named.append((f"fusion_att_{i}", layer.w_att))
            named.append((f"fusion_q_{i}", layer.q_att))
            named.append((f"fusion_agg_{i}", layer.w_agg))
        return named

    def _frontiers(self, items: list[int]) -> list[list[int]]:
        """Node sets needed per layer; index 0 is the widest (input) set."""
        depth = self.fusion.depth
        needed: list[list[int]] = [[] for _ in range(depth + 1)]
        needed[depth] = sorted(set(items))
        for j in range(depth - 1, -1, -1):
            wider = set(needed[j + 1])
            for v in needed[j + 1]:
                wider.update(u for u, _ in self._nbrs[v])
            needed[j] = sorted(wider)
        return needed

    def global_reprs(self, items: list[int], sess_vec: Tensor,
                     ctx: ForwardContext) -> dict[int, Tensor]:
        """Depth-layer global encodings for ``items`` (and nothing else)."""
        if self._nbrs is None:
            raise ValueError("fusion model needs a global graph attached")
        dim = self.params.dim
        needed = self._frontiers(items)
        base = ndiff.gather(self.params.item_emb, np.asarray(needed[0]))
        reps = {v: ndiff.row(base, i) for i, v in enumerate(needed[0])}
        for depth_idx, layer in enumerate(self.fusion.layers, start=1):
            current = needed[depth_idx]
            summaries = global_propagate(reps, self._nbrs, current,
                                         sess_vec, layer, dim)
            new_reps = {}
            for v in current:
                h = global_aggregate(reps[v], summaries[v], layer)
                new_reps[v] = ndiff.dropout(h, self.fusion.dropout,
                                            ctx.train, ctx.rng)
            reps = new_reps
        return reps

    def item_reprs(self, prefix: list[int], graph: SessionGraph,
                   ctx: ForwardContext) -> Tensor:
        node_items = np.asarray(graph.nodes)
        h_nodes = ndiff.gather(self.params.item_emb, node_items)
        h_sess = session_aggregate(h_nodes, session_propagate(h_nodes, graph),
                                   self.params)
        # attention context: sum-pooled *initial* embeddings of the prefix
        sess_vec = ndiff.sum_axis(
            ndiff.gather(self.params.item_emb, np.asarray(prefix)), 0)
        greps = self.global_reprs(list(graph.nodes), sess_vec, ctx)
        h_glob = ndiff.stack_rows([greps[v] for v in graph.nodes])
        fused = fuse_representations(h_glob, h_sess)
        positions = np.asarray([graph.pos_of[it] for it in prefix])
        return ndiff.gather(fused, positions)
