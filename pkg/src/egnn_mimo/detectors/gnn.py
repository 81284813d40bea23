"""Message-passing GNN detectors: the edge-weighted EGNN and the naive MLP-message GNN.

Both variants lift the raw node triple ``[y^T h_i, -h_i^T h_i, sigma2]`` with a
dense layer, run ``T`` rounds of message passing over the active directed
edges, update a per-node GRU state from ``[sum of messages, own state]`` (or the
message sum alone with ``gru_self_input=False``) followed by a dense layer, and classify each node with a two-layer readout.

Messages are computed per active edge, so the work of a round is
proportional to the number of active edges. Gradients are hand-derived.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..graph import VARIANTS
from ..nn_core import DenseLayer, GruCell, ParamVector, init_params, softmax, softmax_ce_from_labels
from .base import DetectorOutput, hard_decision

_GRU_KEYS = ("Wz", "bz", "Wr", "br", "Wc", "bc")


@dataclass(frozen=True)
class GnnArchitecture:
    variant: str = "egnn"
    node_dim: int = 32
    gru_hidden: int = 128
    readout_hidden: int = 64
    steps: int = 6
    K: int = 2
    gru_self_input: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if min(self.node_dim, self.gru_hidden, self.readout_hidden, self.K) < 1:
            raise ValueError("layer sizes must be positive")
        if self.steps < 1:
            raise ValueError("at least one message-passing step is required")

    def layout(self):
        S, D, R, K = self.node_dim, self.gru_hidden, self.readout_hidden, self.K
        out = [("mlp1.W", (S, 3)), ("mlp1.b", (S,))]
        if self.variant == "egnn":
            out += [("msg.W", (S, S)), ("msg.b", (S,))]
        else:
            out += [("msg1.W", (S, 2 * S + 2)), ("msg1.b", (S,)), ("msg2.W", (S, S)), ("msg2.b", (S,))]
        # GRU input is [aggregated message, own node state], or the message alone
        width = self.gru_input_dim + D
        for gate in "zrc":
            out += [(f"gru.W{gate}", (D, width)), (f"gru.b{gate}", (D,))]
        out += [
            ("post.W", (S, D)),
            ("post.b", (S,)),
            ("readout1.W", (R, S)),
            ("readout1.b", (R,)),
            ("readout2.W", (K, R)),
            ("readout2.b", (K,)),
        ]
        return out

    @property
    def gru_input_dim(self):
        return 2 * self.node_dim if self.gru_self_input else self.node_dim

    def as_meta(self):
        return {
            "arch.variant": VARIANTS.index(self.variant),
            "arch.node_dim": self.node_dim,
            "arch.gru_hidden": self.gru_hidden,
            "arch.readout_hidden": self.readout_hidden,
            "arch.steps": self.steps,
            "arch.K": self.K,
            "arch.gru_self_input": int(self.gru_self_input),
        }

    @classmethod
    def from_meta(cls, meta):
        return cls(
            VARIANTS[int(meta["arch.variant"])],
            int(meta["arch.node_dim"]),
            int(meta["arch.gru_hidden"]),
            int(meta["arch.readout_hidden"]),
            int(meta["arch.steps"]),
            int(meta["arch.K"]),
            bool(meta.get("arch.gru_self_input", 1)),
        )


class EgnnParams:
    """Architecture plus a flat parameter vector; layers are views into it."""

    def __init__(self, arch, vector):
        self.arch = arch
        self.vector = vector

    @classmethod
    def initialize(cls, arch, seed):
        return cls(arch, init_params(arch.layout(), seed))

    def copy(self):
        return EgnnParams(self.arch, self.vector.copy())

    def dense(self, name, activation="relu", source=None):
        src = self.vector if source is None else source
        return DenseLayer(src[f"{name}.W"], src[f"{name}.b"], activation)

    def gru(self, source=None):
        src = self.vector if source is None else source
        return GruCell(*(src[f"gru.{k}"] for k in _GRU_KEYS))

    def to_checkpoint(self):
        entries = {k: np.array([float(v)]) for k, v in self.arch.as_meta().items()}
        entries.update(self.vector.unpack())
        return entries

    @classmethod
    def from_checkpoint(cls, entries):
        meta_keys = [k for k in entries if k.startswith("arch.")]
        try:
            arch = GnnArchitecture.from_meta({k: entries[k][0] for k in meta_keys})
        except KeyError as exc:
            raise ValueError(f"checkpoint lacks architecture entry {exc}") from None
        vector = ParamVector(arch.layout())
        for name, shape in vector.shapes():
            if name not in entries:
                raise ValueError(f"checkpoint lacks parameter {name!r}")
            if entries[name].size != int(np.prod(shape)):
                raise ValueError(f"parameter {name!r} has {entries[name].size} values, expected shape {shape}")
            vector[name][...] = entries[name].reshape(shape)
        return cls(arch, vector)


@dataclass
class EdgeBatch:
    """Active directed edges of a batch of graphs, flattened to node ids ``b*n + i``."""

    n_nodes: int
    dst: np.ndarray
    src: np.ndarray
    eps: np.ndarray
    edge_feat: np.ndarray
    sum_to_dst: sp.csr_matrix
    weighted_sum_to_dst: sp.csr_matrix
    sum_to_src: sp.csr_matrix

    @property
    def n_edges(self):
        return len(self.dst)


def edge_batch(graph):
    edge_attr = graph.edge_attr
    mask = graph.active_mask
    sigma2 = np.asarray(graph.sigma2, dtype=np.float64)
    if edge_attr.ndim == 2:
        edge_attr, mask, sigma2 = edge_attr[None], mask[None], sigma2.reshape(1)
    B, n, _ = edge_attr.shape
    b, i, j = np.nonzero(mask)
    dst = b * n + i
    src = b * n + j
    eps = edge_attr[b, j, i]
    feat = np.stack([eps, sigma2[b]], axis=1)
    E, N = len(dst), B * n
    cols = np.arange(E)
    ones = np.ones(E)
    return EdgeBatch(
        N,
        dst,
        src,
        eps,
        feat,
        sp.csr_matrix((ones, (dst, cols)), shape=(N, E)),
        sp.csr_matrix((eps, (dst, cols)), shape=(N, E)),
        sp.csr_matrix((ones, (src, cols)), shape=(N, E)),
    )


def edge_messages(params, z, edges):
    """Per-edge messages ``(E, S)`` before aggregation, for node states ``z`` ``(N, S)``."""
    return _messages(params, z, edges)[0]


def _messages(params, z, edges):
    if params.arch.variant == "egnn":
        layer = params.dense("msg")
        u, cache = layer.forward(z[edges.src])
        return edges.eps[:, None] * u, (u, cache)
    inp = np.concatenate([z[edges.dst], z[edges.src], edges.edge_feat], axis=1)
    l1, l2 = params.dense("msg1"), params.dense("msg2")
    h1, c1 = l1.forward(inp)
    m, c2 = l2.forward(h1)
    return m, (c1, c2)


def _aggregate(params, z, edges):
    if params.arch.variant == "egnn":
        # eps folded into the scatter matrix: sum_j eps_ji * MLP2(z_j)
        layer = params.dense("msg")
        u, cache = layer.forward(z[edges.src])
        return edges.weighted_sum_to_dst @ u, cache
    m, cache = _messages(params, z, edges)
    return edges.sum_to_dst @ m, cache


def _aggregate_backward(params, dagg, cache, edges, grads):
    S = params.arch.node_dim
    if params.arch.variant == "egnn":
        du = edges.eps[:, None] * dagg[edges.dst]
        dzs = params.dense("msg").backward(du, cache, grads["msg.W"], grads["msg.b"])
        return edges.sum_to_src @ dzs
    c1, c2 = cache
    dm = dagg[edges.dst]
    dh1 = params.dense("msg2").backward(dm, c2, grads["msg2.W"], grads["msg2.b"])
    dinp = params.dense("msg1").backward(dh1, c1, grads["msg1.W"], grads["msg1.b"])
    return edges.sum_to_dst @ dinp[:, :S] + edges.sum_to_src @ dinp[:, S : 2 * S]


def _forward(params, graph, keep_cache=False):
    arch = params.arch
    edges = edge_batch(graph)
    raw = graph.raw_node_features.reshape(-1, 3)
    z, c_lift = params.dense("mlp1").forward(raw)
    g = np.zeros((edges.n_nodes, arch.gru_hidden))
    gru = params.gru()
    post = params.dense("post")
    steps = []
    for _ in range(arch.steps):
        agg, c_msg = _aggregate(params, z, edges)
        x = np.concatenate([agg, z], axis=1) if arch.gru_self_input else agg
        g, c_gru = gru.step(x, g)
        z, c_post = post.forward(g)
        if keep_cache:
            steps.append((c_msg, c_gru, c_post))
    r1, c_r1 = params.dense("readout1").forward(z)
    logits, c_r2 = params.dense("readout2", "identity").forward(r1)
    cache = (edges, c_lift, steps, c_r1, c_r2) if keep_cache else None
    return logits, cache


def gnn_logits(params, graph):
    """Readout logits, shaped ``(..., n, K)`` like the graph's node axis."""
    logits, _ = _forward(params, graph)
    return logits.reshape(graph.edge_attr.shape[:-1] + (params.arch.K,))


def _check_variant(params, graph, variant):
    variant = variant or params.arch.variant
    if variant != params.arch.variant or graph.variant != variant:
        raise ValueError(
            f"variant mismatch: params {params.arch.variant!r}, graph {graph.variant!r}, requested {variant!r}"
        )


def gnn_forward(graph, params, variant=None):
    """Posteriors and hard decisions for one graph or a batch of graphs."""
    _check_variant(params, graph, variant)
    if graph.raw_node_features.shape[-1] != 3:
        raise ValueError("raw node features must be triples")
    start = time.perf_counter()
    post = softmax(gnn_logits(params, graph))
    return DetectorOutput(
        post,
        hard_decision(post),
        {
            "detector": params.arch.variant,
            "iterations": params.arch.steps,
            "active_edges": int(np.count_nonzero(graph.active_mask)),
            "wall_time": time.perf_counter() - start,
        },
    )


def loss_and_grad(params, graph, labels):
    """Mean node cross-entropy and its exact gradient as a ParamVector."""
    _check_variant(params, graph, None)
    arch = params.arch
    labels = np.asarray(labels).reshape(-1)
    logits, (edges, c_lift, steps, c_r1, c_r2) = _forward(params, graph, keep_cache=True)
    loss, _, dlogits = softmax_ce_from_labels(logits, labels)

    grads = params.vector.zeros_like()
    dr1 = params.dense("readout2", "identity").backward(dlogits, c_r2, grads["readout2.W"], grads["readout2.b"])
    dz = params.dense("readout1").backward(dr1, c_r1, grads["readout1.W"], grads["readout1.b"])
    gru = params.gru()
    gru_grads = {k: grads[f"gru.{k}"] for k in _GRU_KEYS}
    post = params.dense("post")
    dg = np.zeros((edges.n_nodes, arch.gru_hidden))
    for c_msg, c_gru, c_post in reversed(steps):
        dg = dg + post.backward(dz, c_post, grads["post.W"], grads["post.b"])
        dx, dg = gru.step_backward(dg, c_gru, gru_grads)
        S = arch.node_dim
        dz = _aggregate_backward(params, dx[:, :S], c_msg, edges, grads)
        if arch.gru_self_input:
            dz += dx[:, S:]
    params.dense("mlp1").backward(dz, c_lift, grads["mlp1.W"], grads["mlp1.b"])
    return loss, grads


def loss_only(params, graph, labels):
    logits, _ = _forward(params, graph)
    return softmax_ce_from_labels(logits, np.asarray(labels).reshape(-1))[0]
