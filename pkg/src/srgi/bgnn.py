"""Base session-graph model: typed-neighbor GNN layer, reversed-position
attention session encoder, scaled-cosine scoring, and the prediction loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ndiff
from .errors import DataError
from .graphs import SessionGraph, build_session_graph
from .ndiff import Tensor

PARAM_STD = 0.1
PROB_FLOOR = 1e-10
CKPT_MAGIC = b"SRGP"
CKPT_VERSION = 1

LOSS_KINDS = ("bce", "nll")


@dataclass
class ModelParams:
    """Trainable parameters of the base model.

    Weight matrices are stored (out_dim, in_dim) and applied to row vectors
    as ``x @ W.T``. ``logit_scale`` is a fixed constant, not trained.
    """

    item_emb: Tensor    # (n_items, d) initial item embeddings
    pos_emb: Tensor     # (max_len, d) learned position table
    w_self: Tensor      # (d, d)   item term in the aggregation layer
    w_neigh: Tensor     # (d, 3d)  typed-neighbor term
    b_agg: Tensor       # (d,)
    w_pos: Tensor       # (d, 2d)  position-fusion transform
    b_pos: Tensor       # (d,)
    w_att_item: Tensor  # (d, d)   attention: per-position term
    w_att_sess: Tensor  # (d, d)   attention: pooled-session term
    q_att: Tensor       # (d,)     attention readout vector
    b_att: Tensor       # (d,)
    logit_scale: float = 12.0

    # field order doubles as the parameter draw / checkpoint order
    NAMES = (
        "item_emb", "pos_emb", "w_self", "w_neigh", "b_agg", "w_pos", "b_pos",
        "w_att_item", "w_att_sess", "q_att", "b_att",
    )

    def named(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self.NAMES]

    @property
    def dim(self) -> int:
        return self.item_emb.shape[1]

    @property
    def n_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def max_len(self) -> int:
        return self.pos_emb.shape[0]


def _gaussian(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(0.0, PARAM_STD, size=shape), requires_grad=True)


def init_params(seed, n_items: int, dim: int, max_len: int = 50,
                logit_scale: float = 12.0) -> ModelParams:
    """Draw all trainables from N(0, 0.1^2) with a seeded generator.

    ``seed`` may also be an existing Generator so model variants can append
    their own parameter draws after the shared base block.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return ModelParams(
        item_emb=_gaussian(rng, n_items, dim),
        pos_emb=_gaussian(rng, max_len, dim),
        w_self=_gaussian(rng, dim, dim),
        w_neigh=_gaussian(rng, dim, 3 * dim),
        b_agg=_gaussian(rng, dim),
        w_pos=_gaussian(rng, dim, 2 * dim),
        b_pos=_gaussian(rng, dim),
        w_att_item=_gaussian(rng, dim, dim),
        w_att_sess=_gaussian(rng, dim, dim),
        q_att=_gaussian(rng, dim),
        b_att=_gaussian(rng, dim),
        logit_scale=logit_scale,
    )


def _mean_pool_matrix(neighbor_lists: list[list[int]], n: int) -> np.ndarray:
    m = np.zeros((n, n))
    for u, nbrs in enumerate(neighbor_lists):
        if nbrs:
            m[u, nbrs] = 1.0 / len(nbrs)
    return m


def session_propagate(h_nodes: Tensor, graph: SessionGraph) -> Tensor:
    """Mean-pool node embeddings over each typed neighbor set and concatenate.

    Returns an (n, 3d) tensor ordered [in || out || in-out]; an empty set
    contributes a zero block.
    """
    n = len(graph.nodes)
    if h_nodes.shape[0] != n:
        raise ValueError(
            f"embedding rows {h_nodes.shape[0]} != graph nodes {n}")
    pooled = [
        ndiff.matmul(Tensor(_mean_pool_matrix(lists, n)), h_nodes)
        for lists in (graph.in_neighbors, graph.out_neighbors, graph.inout_neighbors)
    ]
    return ndiff.concat(pooled, axis=1)


def session_aggregate(h_nodes: Tensor, h_neigh: Tensor, params: ModelParams) -> Tensor:
    """Combine each node with its typed-neighbor summary: tanh(self + neighbors + bias)."""
    return ndiff.tanh(ndiff.add(
        ndiff.add(ndiff.matmul(h_nodes, ndiff.transpose(params.w_self)),
                  ndiff.matmul(h_neigh, ndiff.transpose(params.w_neigh))),
        params.b_agg))


def encode_session(h_pos: Tensor, length: int, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Attention-pool per-position item vectors into the session representation.

    Each position is fused with the position vector counted from the end of
    the prefix (distance to the predicted slot), scored against the
    sum-pooled session vector through a sigmoid gate, and the raw
    (unnormalized) scores weight the positions. Returns (S, pooled).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    if length > params.max_len:
        raise ValueError("position table exhausted")
    if h_pos.shape[0] != length:
        raise ValueError(f"h_pos rows {h_pos.shape[0]} != length {length}")

    rev_rows = np.arange(length - 1, -1, -1)
    p_rev = ndiff.gather(params.pos_emb, rev_rows)
    z = ndiff.tanh(ndiff.add(
        ndiff.matmul(ndiff.concat([h_pos, p_rev], axis=1),
                     ndiff.transpose(params.w_pos)),
        params.b_pos))

    pooled = ndiff.sum_axis(h_pos, 0)
    gate = ndiff.sigmoid(ndiff.add(
        ndiff.add(ndiff.matmul(z, ndiff.transpose(params.w_att_item)),
                  ndiff.matmul(pooled, ndiff.transpose(params.w_att_sess))),
        params.b_att))
    beta = ndiff.matmul(gate, params.q_att)      # (length,), left raw
    s_repr = ndiff.matmul(beta, h_pos)           # (d,)
    return s_repr, pooled


def score_items(s_repr: Tensor, item_emb: Tensor, logit_scale: float) -> Tensor:
    """Softmax over scaled cosines between the session vector and every item."""
    s_hat = ndiff.l2_normalize(s_repr)
    h_hat = ndiff.l2_normalize(item_emb)
    logits = ndiff.scale(ndiff.matmul(h_hat, s_hat), logit_scale)
    return ndiff.softmax(logits, axis=-1)


def prediction_loss(probs: Tensor, label: int, kind: str = "bce") -> Tensor:
    """Loss of one prediction distribution against the target item.

    ``bce`` scores every item as an independent binary target (the default
    objective); ``nll`` is plain negative log-likelihood of the target.
    Probabilities are clamped away from 0 and 1 before the logs.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    m = probs.shape[0]
    if not 0 <= label < m:
        raise ValueError(f"label {label} out of range for {m} items")
    p = ndiff.clip(probs, PROB_FLOOR, 1.0 - PROB_FLOOR)
    onehot = np.zeros(m)
    onehot[label] = 1.0
    if kind == "nll":
        return ndiff.scale(ndiff.tsum(ndiff.mul(Tensor(onehot), ndiff.log(p))), -1.0)
    pos = ndiff.mul(Tensor(onehot), ndiff.log(p))
    neg = ndiff.mul(Tensor(1.0 - onehot), ndiff.log(ndiff.sub(1.0, p)))
    return ndiff.scale(ndiff.tsum(ndiff.add(pos, neg)), -1.0)


@dataclass
class ForwardContext:
    """Per-call mode switches: training toggles dropout, rng feeds it."""

    train: bool = False
    rng: np.random.Generator | None = None


class BGNN:
    """Session-graph-only model; the fusion and contrast variants extend it."""

    variant = "bgnn"

    def __init__(self, params: ModelParams, loss_kind: str = "bce"):
        if loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {loss_kind!r}")
        self.params = params
        self.loss_kind = loss_kind
        self._graph_cache: dict[tuple, SessionGraph] = {}

    @classmethod
    def create(cls, seed, n_items: int, dim: int, max_len: int = 50,
               logit_scale: float = 12.0, loss_kind: str = "bce", **kw):
        rng = np.random.default_rng(seed)
        return cls(init_params(rng, n_items, dim, max_len, logit_scale),
                   loss_kind=loss_kind)

    def named_params(self) -> list[tuple[str, Tensor]]:
        return self.params.named()

    def session_graph(self, prefix: list[int]) -> SessionGraph:
        key = tuple(prefix)
        g = self._graph_cache.get(key)
        if g is None:
            g = build_session_graph(prefix)
            self._graph_cache[key] = g
        return g

    def item_reprs(self, prefix: list[int], graph: SessionGraph,
                   ctx: ForwardContext) -> Tensor:
        """Per-position item vectors (length, d) for one prefix."""
        node_items = np.asarray(graph.nodes)
        h_nodes = ndiff.gather(self.params.item_emb, node_items)
        h_neigh = session_propagate(h_nodes, graph)
        h_sess = session_aggregate(h_nodes, h_neigh, self.params)
        positions = np.asarray([graph.pos_of[it] for it in prefix])
        return ndiff.gather(h_sess, positions)

    def instance_probs(self, prefix: list[int], ctx: ForwardContext) -> Tensor:
        graph = self.session_graph(prefix)
        h_pos = self.item_reprs(prefix, graph, ctx)
        s_repr, _ = encode_session(h_pos, len(prefix), self.params)
        return score_items(s_repr, self.params.item_emb, self.params.logit_scale)

    def instance_loss(self, prefix: list[int], label: int,
                      ctx: ForwardContext) -> Tensor:
        return prediction_loss(self.instance_probs(prefix, ctx), label,
                               kind=self.loss_kind)

    def batch_loss(self, batch, ctx: ForwardContext) -> tuple[Tensor, dict]:
        """Mean prediction loss over a batch of labeled instances."""
        losses = [self.instance_loss(inst.prefix, inst.label, ctx) for inst in batch]
        total = ndiff.scale(ndiff.tsum(ndiff.stack_rows(losses)), 1.0 / len(losses))
        return total, {"pred_loss": float(total.values)}

    def predict(self, prefix: list[int]) -> np.ndarray:
        """Evaluation-mode probabilities over the vocabulary (no recording)."""
        probs = self.instance_probs(prefix, ForwardContext(train=False))
        return probs.values


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, named_params: list[tuple[str, Tensor]],
                     dim: int, n_items: int, max_len: int,
                     logit_scale: float) -> None:
    """Binary checkpoint: ``SRGP`` magic, version, dims, named value blocks."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<III", dim, n_items, max_len))
        blocks = list(named_params) + [("logit_scale", Tensor([logit_scale]))]
        fh.write(struct.pack("<I", len(blocks)))
        for name, tensor in blocks:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", tensor.ndim))
            for d in tensor.shape:
                fh.write(struct.pack("<I", d))
            fh.write(tensor.values.astype("<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header dict, name -> array)."""
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise DataError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        dim, n_items, max_len = struct.unpack("<III", fh.read(12))
        (n_blocks,) = struct.unpack("<I", fh.read(4))
        blocks: dict[str, np.ndarray] = {}
        for _ in range(n_blocks):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            blocks[name] = data.astype(np.float64)
    header = {"dim": dim, "n_items": n_items, "max_len": max_len}
    return header, blocks


def params_from_blocks(header: dict, blocks: dict[str, np.ndarray]) -> ModelParams:
    missing = [n for n in ModelParams.NAMES if n not in blocks]
    if missing:
        raise DataError(f"checkpoint missing parameter blocks: {missing}")
    kwargs = {name: Tensor(blocks[name], requires_grad=True)
              for name in ModelParams.NAMES}
    scale_block = blocks.get("logit_scale")
    scale = float(scale_block[0]) if scale_block is not None else 12.0
    return ModelParams(logit_scale=scale, **kwargs)
