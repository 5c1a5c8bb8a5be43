"""Symbolic state graphs and their disjoint-union batching.

A state is a set of featured nodes, typed directed featured edges and an
optional global-context vector. Batches are plain disjoint unions with
per-graph bookkeeping so nothing ever crosses a graph boundary.
"""
from __future__ import annotations

import numpy as np

from .autodiff import SegmentIndex


class GraphValidationError(ValueError):
    pass


class StateGraph:
    """Immutable validated graph; build through ``build``."""

    __slots__ = ("node_features", "edge_src", "edge_dst", "edge_type",
                 "edge_features", "global_context", "num_edge_types")

    def __init__(self, node_features, edge_src, edge_dst, edge_type,
                 edge_features, global_context, num_edge_types):
        self.node_features = node_features
        self.edge_src = edge_src
        self.edge_dst = edge_dst
        self.edge_type = edge_type
        self.edge_features = edge_features
        self.global_context = global_context
        self.num_edge_types = num_edge_types

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]

    @property
    def edge_count(self) -> int:
        return self.edge_src.shape[0]


def build(node_features, edges, global_context=(), num_edge_types: int | None = None) -> StateGraph:
    """Validate and freeze a graph.

    ``edges`` is a sequence of (src, dst, type, features). Feature widths
    must be uniform; endpoints must be valid node indices.
    """
    src = np.asarray([e[0] for e in edges], dtype=np.int64)
    dst = np.asarray([e[1] for e in edges], dtype=np.int64)
    types = np.asarray([e[2] for e in edges], dtype=np.int64)
    feats = [np.asarray(e[3], dtype=np.float64) for e in edges]
    widths = {f.shape for f in feats}
    if len(widths) > 1:
        raise GraphValidationError(f"ragged edge feature widths: {sorted(widths)}")
    efw = feats[0].shape[0] if feats else 0
    ef = np.asarray(feats, dtype=np.float64).reshape(len(feats), efw)
    return build_arrays(np.asarray(node_features, dtype=np.float64), src, dst, types,
                        ef, global_context, num_edge_types)


def build_arrays(node_features, edge_src, edge_dst, edge_type, edge_features=None,
                 global_context=(), num_edge_types: int | None = None,
                 validate: bool = True) -> StateGraph:
    """Array-native construction path; same validation as ``build``."""
    nf = np.asarray(node_features, dtype=np.float64)
    src = np.asarray(edge_src, dtype=np.int64)
    dst = np.asarray(edge_dst, dtype=np.int64)
    types = np.asarray(edge_type, dtype=np.int64)
    if edge_features is None:
        ef = np.zeros((len(src), 0))
    else:
        ef = np.asarray(edge_features, dtype=np.float64)
    gc = np.asarray(global_context, dtype=np.float64).reshape(-1)
    if num_edge_types is None:
        num_edge_types = int(types.max()) + 1 if len(types) else 1

    if validate:
        if nf.ndim != 2:
            raise GraphValidationError("node features must be a rectangular (n, width) array")
        n = nf.shape[0]
        if n == 0:
            raise GraphValidationError("graph needs at least one node")
        if not (len(src) == len(dst) == len(types) == len(ef)):
            raise GraphValidationError("edge arrays disagree in length")
        if len(src) and (src.min() < 0 or src.max() >= n or dst.min() < 0 or dst.max() >= n):
            raise GraphValidationError("edge endpoint out of range")
        if len(types) and (types.min() < 0 or types.max() >= num_edge_types):
            raise GraphValidationError("edge type outside [0, num_edge_types)")

    g = StateGraph(nf, src, dst, types, ef, gc, num_edge_types)
    for arr in (g.node_features, g.edge_src, g.edge_dst, g.edge_type,
                g.edge_features, g.global_context):
        arr.setflags(write=False)
    return g


class BatchedGraph:
    """Disjoint union of B graphs, with cached segment indexes for the GNN."""

    def __init__(self, graphs: list[StateGraph]):
        if not graphs:
            raise GraphValidationError("empty batch")
        fw = {g.node_features.shape[1] for g in graphs}
        efw = {g.edge_features.shape[1] for g in graphs}
        gw = {g.global_context.shape[0] for g in graphs}
        vocab = {g.num_edge_types for g in graphs}
        if len(fw) > 1 or len(efw) > 1 or len(gw) > 1 or len(vocab) > 1:
            raise GraphValidationError("graphs in a batch must share feature widths and edge vocabulary")

        self.graphs = list(graphs)
        self.num_graphs = len(graphs)
        self.num_edge_types = graphs[0].num_edge_types
        counts = np.array([g.node_count for g in graphs], dtype=np.int64)
        self.node_offsets = np.concatenate([[0], np.cumsum(counts)])
        self.node_count = int(self.node_offsets[-1])

        self.node_features = np.concatenate([g.node_features for g in graphs], axis=0)
        self.edge_src = np.concatenate([g.edge_src + off for g, off in zip(graphs, self.node_offsets)])
        self.edge_dst = np.concatenate([g.edge_dst + off for g, off in zip(graphs, self.node_offsets)])
        self.edge_type = np.concatenate([g.edge_type for g in graphs])
        self.edge_features = np.concatenate([g.edge_features for g in graphs], axis=0)
        self.globals = np.stack([_pad_to(g.global_context, max(gw)) for g in graphs])
        self.graph_of_node = np.repeat(np.arange(self.num_graphs), counts)
        self.edge_count = self.edge_src.shape[0]

        self._seg_node = None
        self._seg_src = None
        self._seg_dst = None
        self._type_onehot = None

    @property
    def seg_node(self) -> SegmentIndex:
        if self._seg_node is None:
            self._seg_node = SegmentIndex(self.graph_of_node, self.num_graphs)
        return self._seg_node

    @property
    def seg_src(self) -> SegmentIndex:
        if self._seg_src is None:
            self._seg_src = SegmentIndex(self.edge_src, self.node_count)
        return self._seg_src

    @property
    def seg_dst(self) -> SegmentIndex:
        if self._seg_dst is None:
            self._seg_dst = SegmentIndex(self.edge_dst, self.node_count)
        return self._seg_dst

    def type_onehot(self, dtype) -> np.ndarray:
        if self._type_onehot is None or self._type_onehot.dtype != dtype:
            oh = np.zeros((self.edge_count, self.num_edge_types), dtype=dtype)
            oh[np.arange(self.edge_count), self.edge_type] = 1.0
            self._type_onehot = oh
        return self._type_onehot

    def node_slice(self, i: int) -> slice:
        return slice(int(self.node_offsets[i]), int(self.node_offsets[i + 1]))

    def unbatch(self, i: int) -> StateGraph:
        return self.graphs[i]


def _pad_to(vec: np.ndarray, width: int) -> np.ndarray:
    if vec.shape[0] == width:
        return vec
    out = np.zeros(width, dtype=vec.dtype)
    out[: vec.shape[0]] = vec
    return out


def disjoint_union(graphs: list[StateGraph]) -> BatchedGraph:
    return BatchedGraph(graphs)


def dump(graph: StateGraph) -> str:
    """Plain-text debug form: node feature block, then one line per edge."""
    lines = [f"nodes {graph.node_count} features {graph.node_features.shape[1]}"]
    for row in graph.node_features:
        lines.append(" ".join(_fmt(x) for x in row))
    lines.append(f"edges {graph.edge_count} types {graph.num_edge_types}")
    for s, d, t, f in zip(graph.edge_src, graph.edge_dst, graph.edge_type, graph.edge_features):
        parts = [str(s), str(d), str(t)]
        parts.extend(_fmt(x) for x in f)
        lines.append(" ".join(parts))
    if graph.global_context.shape[0]:
        lines.append("global " + " ".join(_fmt(x) for x in graph.global_context))
    return "\n".join(lines) + "\n"


def _fmt(x: float) -> str:
    return f"{x:g}"
