"""Graph encoder: shared feature embedding, then rounds of max-aggregated
message passing with skip connections and an attention-pooled global node.
Every round owns its parameters.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .graph import BatchedGraph, StateGraph, disjoint_union


@dataclass
class Embeddings:
    """Per-node and per-graph vectors, all of width emb_size."""

    nodes: Tensor   # (total_nodes, emb)
    glob: Tensor    # (num_graphs, emb)


def linear_named(view, name: str, x) -> Tensor:
    return ad.linear(view.tensor(f"{name}/W"), view.tensor(f"{name}/b"), x)


def add_mp_params(store, prefix: str, cfg, rng: np.random.Generator) -> None:
    """One message-passing round: msg, agg, att, feat, glb layers."""
    e = cfg.emb_size
    msg_in = cfg.num_edge_types + cfg.edge_feature_width + e
    store.add_linear(f"{prefix}/msg", msg_in, e, rng)
    store.add_linear(f"{prefix}/agg", 3 * e, e, rng)
    store.add_linear(f"{prefix}/att", e, 1, rng)
    store.add_linear(f"{prefix}/feat", e, e, rng)
    store.add_linear(f"{prefix}/glb", 2 * e, e, rng)


def init_encoder_params(store, cfg, rng: np.random.Generator) -> None:
    store.add_linear("embed", cfg.node_feature_width, cfg.emb_size, rng)
    for i in range(cfg.mp_steps):
        add_mp_params(store, f"gnn/s{i}", cfg, rng)


def embed_features(view, cfg, batch: BatchedGraph) -> Embeddings:
    """Shared non-linear embedding of raw node features; global slot init."""
    dtype = view.value("embed/W").dtype
    if batch.node_features.shape[1] != cfg.node_feature_width:
        raise DimensionError(
            f"node feature width {batch.node_features.shape[1]} != {cfg.node_feature_width}")
    x = ad.constant(batch.node_features.astype(dtype))
    nodes = ad.leaky_relu(linear_named(view, "embed", x))

    B = batch.num_graphs
    gw = batch.globals.shape[1]
    if gw == 0:
        glob = ad.constant(np.zeros((B, cfg.emb_size), dtype=dtype))
    elif gw <= cfg.emb_size:
        padded = np.zeros((B, cfg.emb_size), dtype=dtype)
        padded[:, :gw] = batch.globals
        glob = ad.constant(padded)
    elif gw == cfg.node_feature_width:
        glob = ad.leaky_relu(linear_named(view, "embed", ad.constant(batch.globals.astype(dtype))))
    else:
        raise DimensionError(f"global context width {gw} cannot be mapped to emb_size {cfg.emb_size}")
    return Embeddings(nodes, glob)


def message_pass_step(view, prefix: str, batch: BatchedGraph, emb: Embeddings) -> Embeddings:
    """One synchronous round; node updates read pre-step embeddings, the
    global update reads the already-updated nodes."""
    nodes, glob = emb.nodes, emb.glob
    dtype = nodes.data.dtype

    if batch.edge_count:
        sender = ad.gather_rows(nodes, batch.edge_src, seg=batch.seg_src)
        parts = [ad.constant(batch.type_onehot(dtype))]
        if batch.edge_features.shape[1]:
            parts.append(ad.constant(batch.edge_features.astype(dtype)))
        parts.append(sender)
        msgs = ad.leaky_relu(linear_named(view, f"{prefix}/msg", ad.concat_cols(parts)))
        m = ad.seg_max(msgs, batch.seg_dst, empty=0.0)
    else:
        m = ad.constant(np.zeros(nodes.data.shape, dtype=dtype))

    g_per_node = ad.gather_rows(glob, batch.graph_of_node, seg=batch.seg_node)
    upd = ad.leaky_relu(linear_named(view, f"{prefix}/agg", ad.concat_cols([nodes, m, g_per_node])))
    nodes2 = ad.add(nodes, upd)

    att_scores = ad.squeeze_col(linear_named(view, f"{prefix}/att", nodes2))
    all_valid = np.ones(batch.node_count, dtype=bool)
    att = ad.exp(ad.seg_masked_log_softmax(att_scores, all_valid, batch.seg_node))
    feat = ad.leaky_relu(linear_named(view, f"{prefix}/feat", nodes2))
    pooled = ad.seg_sum(ad.colmul(feat, att), batch.seg_node)
    glob2 = ad.add(glob, ad.leaky_relu(linear_named(view, f"{prefix}/glb", ad.concat_cols([glob, pooled]))))
    return Embeddings(nodes2, glob2)


def encode(view, cfg, batch: BatchedGraph) -> Embeddings:
    emb = embed_features(view, cfg, batch)
    for i in range(cfg.mp_steps):
        emb = message_pass_step(view, f"gnn/s{i}", batch, emb)
    return emb


def encode_graph(view, cfg, graph: StateGraph) -> Embeddings:
    return encode(view, cfg, disjoint_union([graph]))
