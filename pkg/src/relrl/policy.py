"""Auto-regressive action selection over graph embeddings.

The action identifier is drawn from the global context; parameters are drawn
node-by-node, each conditioned on the previous picks through a one-hot
augmentation followed by two dedicated message passes. Set actions draw every
node independently through a shared sigmoid head. Preconditions mask the
softmax; a fully masked level triggers backtracking.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NoValidChoiceError, Tensor
from .encoder import Embeddings, add_mp_params, encode, linear_named, message_pass_step
from .graph import BatchedGraph, StateGraph, disjoint_union

ELEMENTARY = "elementary"
PARAMETRIC = "parametric"
SET = "set"


class NoValidActionError(RuntimeError):
    """Sampling found no satisfiable grounded action anywhere."""


class InconsistentActionError(RuntimeError):
    """An action being replayed violates the masks it claims to satisfy."""


@dataclass(frozen=True)
class ActionSchema:
    """Declarative action template.

    ``precondition(state, level, chosen)`` returns a bool (level 0,
    availability) or a per-node bool mask (parameter levels, and level 1 of
    set actions). ``None`` means everything is allowed.
    """

    id: int
    name: str
    kind: str
    arity: int = 0
    precondition: Callable | None = None

    def __post_init__(self):
        if self.kind not in (ELEMENTARY, PARAMETRIC, SET):
            raise ValueError(f"unknown schema kind {self.kind!r}")
        if self.kind == PARAMETRIC and self.arity < 1:
            raise ValueError("parametric schema needs arity >= 1")
        if self.kind == ELEMENTARY and self.arity != 0:
            raise ValueError("elementary schema has no parameters")


@dataclass
class ActionChoice:
    """A concrete sampled action with its joint log-probability.

    ``level_masks`` stores the masks in effect when each level was finally
    selected (index 0 over schemas, then per-node); replay applies exactly
    these so the scored distribution matches the behaviour policy.
    """

    schema_id: int
    params: tuple[int, ...] = ()
    subset: frozenset[int] | None = None
    log_prob: float = 0.0
    level_log_probs: tuple[float, ...] = ()
    level_masks: tuple[np.ndarray, ...] | None = None


def init_decoder_params(store, cfg, rng: np.random.Generator) -> None:
    e = cfg.emb_size
    store.add_linear("dec/act0", e, len(cfg.schemas), rng)
    for s in cfg.schemas:
        if s.kind == PARAMETRIC:
            for level in range(1, s.arity + 1):
                store.add_linear(f"dec/{s.name}/l{level}/score", e, 1, rng)
                if level >= 2:
                    store.add_linear(f"dec/{s.name}/l{level}/aug", e + level - 1, e, rng)
                    for j in (0, 1):
                        add_mp_params(store, f"dec/{s.name}/l{level}/mp{j}", cfg, rng)
        elif s.kind == SET:
            store.add_linear(f"dec/{s.name}/set", e, 1, rng)
    store.add_linear("value", e, 1, rng)


def value(view, emb: Embeddings) -> Tensor:
    """State-value estimate from the global context, one per graph."""
    return ad.squeeze_col(linear_named(view, "value", emb.glob))


def schema_available(schema: ActionSchema, state) -> bool:
    if schema.precondition is None:
        return True
    return bool(schema.precondition(state, 0, ()))


def param_mask(schema: ActionSchema, state, level: int, chosen: tuple[int, ...], n: int) -> np.ndarray:
    if schema.precondition is None:
        return np.ones(n, dtype=bool)
    return np.asarray(schema.precondition(state, level, tuple(chosen)), dtype=bool)


def condition_on_selection(view, cfg, batch: BatchedGraph, emb: Embeddings,
                           schema: ActionSchema, level: int,
                           chosen_per_graph: list[tuple[int, ...]]) -> Embeddings:
    """Augment nodes with the one-hot of previous picks, map back to emb_size,
    then run the two per-(schema, level) conditioning passes. The input
    embeddings are left untouched."""
    dtype = emb.nodes.data.dtype
    z = np.zeros((batch.node_count, level - 1), dtype=dtype)
    for b, chosen in enumerate(chosen_per_graph):
        off = int(batch.node_offsets[b])
        for i, c in enumerate(chosen[: level - 1]):
            z[off + c, i] = 1.0
    aug_in = ad.concat_cols([emb.nodes, ad.constant(z)])
    nodes = ad.leaky_relu(linear_named(view, f"dec/{schema.name}/l{level}/aug", aug_in))
    out = Embeddings(nodes, emb.glob)
    for j in (0, 1):
        out = message_pass_step(view, f"dec/{schema.name}/l{level}/mp{j}", batch, out)
    return out


def _draw(p: np.ndarray, rng: np.random.Generator) -> int:
    total = p.sum()
    u = rng.random() * total
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    if p[idx] <= 0.0:
        idx = int(np.argmax(p))
    return idx


def _pick_row(logp_row: np.ndarray, mask: np.ndarray, rng, greedy: bool) -> int:
    if greedy:
        return int(np.argmax(np.where(mask, logp_row, -np.inf)))
    return _draw(np.where(mask, np.exp(logp_row), 0.0), rng)


def _segment_choices(logp: np.ndarray, mask: np.ndarray, starts: np.ndarray,
                     ends: np.ndarray, rngs, greedy: bool) -> np.ndarray:
    """One categorical draw (or argmax) per [start, end) slice of a flat
    log-probability vector; draw k consumes one uniform from rngs[k]."""
    scores = np.where(mask, logp, -np.inf)
    if greedy:
        return np.array([starts[k] + int(np.argmax(scores[starts[k]:ends[k]]))
                         for k in range(len(starts))], dtype=np.int64)
    p = np.where(mask, np.exp(logp), 0.0)
    cum = np.cumsum(p)
    base = np.where(starts > 0, cum[starts - 1], 0.0)
    us = np.array([rng.random() for rng in rngs])
    targets = base + us * (cum[ends - 1] - base)
    idx = np.searchsorted(cum, targets, side="right")
    idx = np.clip(idx, starts, ends - 1)
    for k in np.flatnonzero(p[idx] <= 0.0):  # fully underflowed slice
        idx[k] = starts[k] + int(np.argmax(scores[starts[k]:ends[k]]))
    return idx


# ---------------------------------------------------------------------------
# spec-level single-graph selection pieces


def select_action_id(view, emb: Embeddings, availability_mask, rng,
                     greedy: bool = False) -> tuple[int, float]:
    mask = np.asarray(availability_mask, dtype=bool)
    if not mask.any():
        raise NoValidActionError("every action schema is masked")
    logits = linear_named(view, "dec/act0", emb.glob)
    logp = ad.masked_log_softmax_rows(logits, mask[None, :])
    idx = _pick_row(logp.data[0], mask, rng, greedy)
    return idx, float(logp.data[0, idx])


def select_parameter(view, emb: Embeddings, batch: BatchedGraph, schema: ActionSchema,
                     level: int, mask, rng, greedy: bool = False) -> tuple[int, float]:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise NoValidChoiceError(f"no valid candidate at level {level} of {schema.name}")
    scores = ad.squeeze_col(linear_named(view, f"dec/{schema.name}/l{level}/score", emb.nodes))
    logp = ad.seg_masked_log_softmax(scores, mask, batch.seg_node)
    idx = _pick_row(logp.data, mask, rng, greedy)
    return idx, float(logp.data[idx])


def select_set(view, emb: Embeddings, batch: BatchedGraph, schema: ActionSchema,
               rng, allowed=None, greedy: bool = False) -> tuple[frozenset, float]:
    scores = ad.squeeze_col(linear_named(view, f"dec/{schema.name}/set", emb.nodes))
    p = 1.0 / (1.0 + np.exp(-scores.data))
    if allowed is not None:
        p = np.where(np.asarray(allowed, dtype=bool), p, 0.0)
    member = p > 0.5 if greedy else rng.random(len(p)) < p
    lp = ad.bernoulli_logp(scores, member, allowed)
    return frozenset(int(i) for i in np.flatnonzero(member)), float(lp.data.sum())


# ---------------------------------------------------------------------------
# single-graph sampler with backtracking


@dataclass
class _Frame:
    level: int
    disabled: np.ndarray
    chosen: int
    logp: float
    mask: np.ndarray


def sample_action(graph: StateGraph, view, cfg, schemas, rng, state=None,
                  greedy: bool = False, _resume=None, _resume_batch=None) -> ActionChoice:
    """Draw one precondition-satisfying action for a single graph.

    Dead ends disable the offending previous choice and reselect, recursively
    up to the schema level; exhausting every schema is an error.
    """
    batch = _resume_batch if _resume_batch is not None else disjoint_union([graph])
    emb = encode(view, cfg, batch)
    n = graph.node_count
    disabled0 = np.zeros(len(schemas), dtype=bool)
    avail = np.array([schema_available(s, state) for s in schemas], dtype=bool)
    logits0 = linear_named(view, "dec/act0", emb.glob)

    while True:
        mask0 = avail & ~disabled0
        if not mask0.any():
            raise NoValidActionError("no satisfiable grounded action in this state")
        logp0 = ad.masked_log_softmax_rows(logits0, mask0[None, :])
        if _resume is not None:
            a0, frames = _resume
            _resume = None
            if not mask0[a0]:
                raise InconsistentActionError("resumed schema is masked")
        else:
            a0 = _pick_row(logp0.data[0], mask0, rng, greedy)
            frames = []
        lp0 = float(logp0.data[0, a0])
        schema = schemas[a0]

        if schema.kind == ELEMENTARY:
            return ActionChoice(a0, (), None, lp0, (lp0,), (mask0.copy(),))

        if schema.kind == SET:
            allowed = param_mask(schema, state, 1, (), n)
            subset, lp_set = select_set(view, emb, batch, schema, rng, allowed, greedy)
            return ActionChoice(a0, (), subset, lp0 + lp_set, (lp0, lp_set),
                                (mask0.copy(), allowed))

        frames = _descend(batch, emb, view, cfg, schema, state, rng, frames, greedy, n)
        if frames is not None:
            lps = (lp0,) + tuple(f.logp for f in frames)
            masks = (mask0.copy(),) + tuple(f.mask for f in frames)
            return ActionChoice(a0, tuple(f.chosen for f in frames), None,
                                float(sum(lps)), lps, masks)
        disabled0[a0] = True


def _descend(batch, emb, view, cfg, schema, state, rng, frames, greedy, n):
    """Iterative parameter selection; returns completed frames or None when
    the whole schema is unsatisfiable."""
    pending: dict[int, np.ndarray] = {}
    level = len(frames) + 1
    while level <= schema.arity:
        prefix = tuple(f.chosen for f in frames)
        emb_l = emb if level == 1 else condition_on_selection(
            view, cfg, batch, emb, schema, level, [prefix])
        scores = ad.squeeze_col(linear_named(view, f"dec/{schema.name}/l{level}/score", emb_l.nodes))
        pre = param_mask(schema, state, level, prefix, n)
        disabled = pending.pop(level, None)
        if disabled is None:
            disabled = np.zeros(n, dtype=bool)
        mask = pre & ~disabled
        if not mask.any():
            if not frames:
                return None
            f = frames.pop()
            f.disabled[f.chosen] = True
            pending[f.level] = f.disabled
            level = f.level
            continue
        logp = ad.seg_masked_log_softmax(scores, mask, batch.seg_node)
        pick = _pick_row(logp.data, mask, rng, greedy)
        frames.append(_Frame(level, disabled, pick, float(logp.data[pick]), mask.copy()))
        level += 1
    return frames


# ---------------------------------------------------------------------------
# batched decode: shared by sampling (rngs given) and replay (actions given)


@dataclass
class DecodeResult:
    choices: list
    log_probs: Tensor          # (B,), differentiable when recording is on
    emb: Embeddings            # encoder output, reusable for the value head
    used_fallback: bool = False


def decode_batch(batch: BatchedGraph, view, cfg, schemas, states=None, rngs=None,
                 actions=None, greedy: bool = False) -> DecodeResult:
    """Run the selection pipeline for every graph of a batch at once.

    Sample mode (``rngs``): per-graph draws come from each graph's own rng;
    graphs that dead-end fall back to the backtracking sampler. Replay mode
    (``actions``): log-probs are computed under the actions' recorded masks.
    """
    B = batch.num_graphs
    if states is None:
        states = [None] * B
    replay = actions is not None
    if not replay and rngs is None:
        raise ValueError("need rngs to sample or actions to replay")

    emb = encode(view, cfg, batch)
    S = len(schemas)

    static_schemas = all(s.precondition is None for s in schemas)
    if static_schemas and not replay:
        mask0 = np.ones((B, S), dtype=bool)
    else:
        mask0 = np.ones((B, S), dtype=bool)
        for b in range(B):
            if replay and actions[b].level_masks is not None:
                mask0[b] = actions[b].level_masks[0]
            else:
                mask0[b] = [schema_available(s, states[b]) for s in schemas]
            if not mask0[b].any():
                raise NoValidActionError(f"graph {b}: every action schema is masked")
    logits0 = linear_named(view, "dec/act0", emb.glob)
    logp0 = ad.masked_log_softmax_rows(logits0, mask0)

    if replay:
        a0 = np.array([a.schema_id for a in actions], dtype=np.int64)
        bad = ~mask0[np.arange(B), a0]
        if bad.any():
            raise InconsistentActionError(f"masked schema replayed in graphs {np.flatnonzero(bad)}")
    elif S == 1:
        a0 = np.zeros(B, dtype=np.int64)
    else:
        flat = _segment_choices(logp0.data.reshape(-1), mask0.reshape(-1),
                                np.arange(B, dtype=np.int64) * S,
                                np.arange(1, B + 1, dtype=np.int64) * S,
                                rngs, greedy)
        a0 = flat - np.arange(B, dtype=np.int64) * S
    total = ad.gather_rc(logp0, a0)

    params_by_graph: list[list[int]] = [[] for _ in range(B)]
    masks_by_graph: list[list[np.ndarray]] = [[mask0[b].copy()] for b in range(B)]
    lps_by_graph: list[list[float]] = [[float(total.data[b])] for b in range(B)]
    subset_by_graph: list[frozenset | None] = [None] * B
    dead: list[int] = []

    max_arity = max((s.arity for s in schemas if s.kind == PARAMETRIC), default=0)
    for level in range(1, max_arity + 1):
        for schema in schemas:
            if schema.kind != PARAMETRIC or schema.arity < level:
                continue
            group = [b for b in range(B)
                     if a0[b] == schema.id and b not in dead]
            if not group:
                continue
            if level == 1:
                emb_l = emb
            else:
                chosen_per_graph = [tuple(params_by_graph[b]) if b in group else ()
                                    for b in range(B)]
                emb_l = condition_on_selection(view, cfg, batch, emb, schema, level,
                                               chosen_per_graph)
            scores = ad.squeeze_col(
                linear_named(view, f"dec/{schema.name}/l{level}/score", emb_l.nodes))
            node_mask = np.ones(batch.node_count, dtype=bool)
            live = []
            for b in group:
                sl = batch.node_slice(b)
                if replay and actions[b].level_masks is not None:
                    m_b = np.asarray(actions[b].level_masks[level], dtype=bool)
                else:
                    m_b = param_mask(schema, states[b], level,
                                     tuple(params_by_graph[b]), sl.stop - sl.start)
                if not m_b.any():
                    if replay:
                        raise InconsistentActionError(f"graph {b}: replayed level {level} fully masked")
                    dead.append(b)
                    continue
                node_mask[sl] = m_b
                masks_by_graph[b].append(m_b.copy())
                live.append(b)
            if not live:
                continue
            logp_nodes = ad.seg_masked_log_softmax(scores, node_mask, batch.seg_node)
            if replay:
                chosen_glob = np.empty(len(live), dtype=np.int64)
                for k, b in enumerate(live):
                    sl = batch.node_slice(b)
                    local = actions[b].params[level - 1]
                    if not node_mask[sl.start + local]:
                        raise InconsistentActionError(
                            f"graph {b}: parameter {local} at level {level} violates its mask")
                    chosen_glob[k] = sl.start + local
            else:
                starts = batch.node_offsets[live]
                ends = batch.node_offsets[np.asarray(live) + 1]
                chosen_glob = _segment_choices(logp_nodes.data, node_mask, starts, ends,
                                               [rngs[b] for b in live], greedy)
            for k, b in enumerate(live):
                params_by_graph[b].append(int(chosen_glob[k] - batch.node_offsets[b]))
            lp_lvl = ad.gather_vec(logp_nodes, chosen_glob)
            for k, b in enumerate(live):
                lps_by_graph[b].append(float(lp_lvl.data[k]))
            total = ad.add(total, ad.scatter_vec(lp_lvl, np.array(live), B))

    for schema in schemas:
        if schema.kind != SET:
            continue
        group = [b for b in range(B) if a0[b] == schema.id]
        if not group:
            continue
        scores = ad.squeeze_col(linear_named(view, f"dec/{schema.name}/set", emb.nodes))
        allowed = np.ones(batch.node_count, dtype=bool)
        member = np.zeros(batch.node_count, dtype=bool)
        indicator = np.zeros(batch.node_count, dtype=scores.data.dtype)
        for b in group:
            sl = batch.node_slice(b)
            if replay and actions[b].level_masks is not None:
                allowed[sl] = np.asarray(actions[b].level_masks[1], dtype=bool)
            else:
                allowed[sl] = param_mask(schema, states[b], 1, (), sl.stop - sl.start)
            masks_by_graph[b].append(allowed[sl].copy())
            if replay:
                local = np.array(sorted(actions[b].subset), dtype=np.int64)
                member[sl.start + local] = True
            else:
                p = 1.0 / (1.0 + np.exp(-scores.data[sl]))
                p = np.where(allowed[sl], p, 0.0)
                member[sl] = p > 0.5 if greedy else rngs[b].random(len(p)) < p
            indicator[sl] = 1.0
            subset_by_graph[b] = frozenset(
                int(i) for i in np.flatnonzero(member[sl]))
        lp_nodes = ad.mul(ad.bernoulli_logp(scores, member, allowed), ad.constant(indicator))
        per_graph = ad.seg_sum(lp_nodes, batch.seg_node)
        lp_set = ad.gather_vec(per_graph, np.array(group))
        for k, b in enumerate(group):
            lps_by_graph[b].append(float(lp_set.data[k]))
        total = ad.add(total, ad.scatter_vec(lp_set, np.array(group), B))

    if replay:
        return DecodeResult(list(actions), total, emb)

    choices: list[ActionChoice | None] = [None] * B
    for b in range(B):
        if b in dead:
            frames = [
                _Frame(j + 1, np.zeros(batch.graphs[b].node_count, dtype=bool),
                       params_by_graph[b][j], lps_by_graph[b][j + 1],
                       masks_by_graph[b][j + 1])
                for j in range(len(params_by_graph[b]))
            ]
            choices[b] = sample_action(batch.graphs[b], view, cfg, schemas, rngs[b],
                                       state=states[b], greedy=greedy,
                                       _resume=(int(a0[b]), frames))
            continue
        lps = tuple(lps_by_graph[b])
        choices[b] = ActionChoice(int(a0[b]), tuple(params_by_graph[b]),
                                  subset_by_graph[b], float(total.data[b]), lps,
                                  tuple(masks_by_graph[b]))
    return DecodeResult(choices, total, emb, used_fallback=bool(dead))


def sample_actions_batch(batch, view, cfg, schemas, rngs, states=None,
                         greedy: bool = False) -> list[ActionChoice]:
    with ad.no_grad():
        result = decode_batch(batch, view, cfg, schemas, states=states,
                              rngs=rngs, greedy=greedy)
    return result.choices


def action_log_probs(batch, view, cfg, schemas, actions, states=None) -> Tensor:
    return decode_batch(batch, view, cfg, schemas, states=states,
                        actions=actions).log_probs


def action_log_prob(graph: StateGraph, view, cfg, schemas, action: ActionChoice,
                    state=None) -> Tensor:
    total = action_log_probs(disjoint_union([graph]), view, cfg, schemas,
                             [action], states=[state])
    return ad.vsum(total)
