"""Reverse-mode tape over numpy arrays.

Small by design: only the operations that the graph encoder, the policy
decoder and the A2C losses need. Everything is define-by-run; calling
``backward`` on a scalar walks the recorded graph once and releases it.
"""
from __future__ import annotations

import contextlib

import numpy as np


class AutodiffError(RuntimeError):
    pass


class DimensionError(AutodiffError):
    pass


class NoValidChoiceError(AutodiffError):
    """Raised when a masked softmax has no unmasked entry."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (sampling, target-net evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """One node of the recorded computation. Treat ``.data`` as read-only."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "requires_grad", "_released")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._bwd = bwd
        self.requires_grad = requires_grad
        self._released = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def backward(self, seed=None):
        backward(self, seed)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def constant(x, dtype=None) -> Tensor:
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, bwd) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, tuple(parents), bwd, requires_grad=True)
    return Tensor(data)


def _acc(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # copy: g may be a view into a consumer's buffer
    else:
        t.grad += g


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate d(loss)/dx into every recorded ancestor of ``loss``.

    The graph is released afterwards; a second backward through it is a
    state error.
    """
    if loss._released:
        raise AutodiffError("backward through an already-released graph")
    if seed is None:
        if loss.data.shape != ():
            raise AutodiffError("backward without a seed needs a scalar loss")
        seed = np.ones((), dtype=loss.data.dtype)
    if not loss.requires_grad:
        return  # constant loss: nothing depends on parameters
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.asarray(seed, dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
        node._released = True
    for node in topo:
        node._parents = ()
        node._bwd = None


class SegmentIndex:
    """Sorted-scatter helper for segment reductions over an id vector.

    Precomputes an argsort of ``ids`` so repeated segment sums and maxes run
    through ``reduceat`` instead of ``np.add.at``.
    """

    __slots__ = ("ids", "size", "order", "uniq", "starts", "sorted_ids", "uniq_inverse")

    def __init__(self, ids: np.ndarray, size: int):
        ids = np.asarray(ids, dtype=np.int64)
        self.ids = ids
        self.size = size
        self.order = np.argsort(ids, kind="stable")
        sorted_ids = ids[self.order]
        self.sorted_ids = sorted_ids
        uniq, inverse, counts = np.unique(sorted_ids, return_inverse=True,
                                          return_counts=True)
        self.uniq = uniq
        self.uniq_inverse = inverse
        starts = np.zeros(len(uniq), dtype=np.int64)
        if len(uniq) > 1:
            np.cumsum(counts[:-1], out=starts[1:])
        self.starts = starts

    def sum(self, values: np.ndarray) -> np.ndarray:
        out_shape = (self.size,) + values.shape[1:]
        out = np.zeros(out_shape, dtype=values.dtype)
        if len(self.uniq):
            out[self.uniq] = np.add.reduceat(values[self.order], self.starts, axis=0)
        return out

    def max(self, values: np.ndarray, empty: float = 0.0) -> np.ndarray:
        out_shape = (self.size,) + values.shape[1:]
        out = np.full(out_shape, empty, dtype=values.dtype)
        if len(self.uniq):
            out[self.uniq] = np.maximum.reduceat(values[self.order], self.starts, axis=0)
        return out


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"add shape mismatch {a.data.shape} vs {b.data.shape}")
    out_data = a.data + b.data

    def bwd(g):
        _acc(a, g)
        _acc(b, g)

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise DimensionError(f"mul shape mismatch {a.data.shape} vs {b.data.shape}")
    ad, bd = a.data, b.data
    out_data = ad * bd

    def bwd(g):
        _acc(a, g * bd)
        _acc(b, g * ad)

    return _make(out_data, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    out_data = a.data * a.data.dtype.type(c)

    def bwd(g):
        _acc(a, g * a.data.dtype.type(c))

    return _make(out_data, (a,), bwd)


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        _acc(a, g * (2.0 * ad))

    return _make(ad * ad, (a,), bwd)


def vsum(a) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        _acc(a, np.full(shape, g, dtype=a.data.dtype))

    return _make(a.data.sum(), (a,), bwd)


def dot_const(a, coeff: np.ndarray) -> Tensor:
    """sum(a * coeff) with coeff held constant."""
    a = as_tensor(a)
    coeff = np.asarray(coeff, dtype=a.data.dtype)
    if coeff.shape != a.data.shape:
        raise DimensionError("dot_const shape mismatch")

    def bwd(g):
        _acc(a, g * coeff)

    return _make((a.data * coeff).sum(), (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _acc(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data

    def bwd(g):
        _acc(a, g / ad)

    return _make(np.log(ad), (a,), bwd)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), bwd)


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    """x for x >= 0, slope*x otherwise, elementwise."""
    a = as_tensor(a)
    ad = a.data
    pos = ad >= 0
    out_data = np.where(pos, ad, ad * ad.dtype.type(slope))

    def bwd(g):
        _acc(a, np.where(pos, g, g * ad.dtype.type(slope)))

    return _make(out_data, (a,), bwd)


def linear(W, b, x) -> Tensor:
    """x @ W.T + b for a weight of shape (out, in); accepts (n, in) or (in,)."""
    W, b, x = as_tensor(W), as_tensor(b), as_tensor(x)
    wd, bd, xd = W.data, b.data, x.data
    if wd.ndim != 2 or bd.ndim != 1 or wd.shape[0] != bd.shape[0]:
        raise DimensionError(f"linear expects W (out,in) and b (out,), got {wd.shape} {bd.shape}")
    single = xd.ndim == 1
    x2 = xd[None, :] if single else xd
    if x2.ndim != 2 or x2.shape[1] != wd.shape[1]:
        raise DimensionError(f"linear input width {xd.shape} does not match W {wd.shape}")
    y = x2 @ wd.T + bd
    out_data = y[0] if single else y

    def bwd(g):
        g2 = g[None, :] if single else g
        _acc(W, g2.T @ x2)
        _acc(b, g2.sum(axis=0))
        _acc(x, (g2 @ wd)[0] if single else g2 @ wd)

    return _make(out_data, (W, b, x), bwd)


def concat_cols(parts: list) -> Tensor:
    """Concatenate (n, d_i) blocks along axis 1."""
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[1] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _acc(p, g[:, lo:hi])

    return _make(out_data, tuple(parts), bwd)


def gather_rows(x, idx: np.ndarray, seg: SegmentIndex | None = None) -> Tensor:
    """Row gather x[idx]; scatter-add on the way back (via seg when given)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def bwd(g):
        if not x.requires_grad:
            return
        if seg is not None:
            _acc(x, seg.sum(g))
        else:
            gx = np.zeros_like(xd)
            np.add.at(gx, idx, g)
            _acc(x, gx)

    return _make(xd[idx], (x,), bwd)


def gather_vec(x, idx: np.ndarray) -> Tensor:
    """1-D gather; idx is small (one entry per graph)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    xd = x.data

    def bwd(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, idx, g)
        _acc(x, gx)

    return _make(xd[idx], (x,), bwd)


def scatter_vec(x, idx: np.ndarray, size: int) -> Tensor:
    """Place a (k,) vector into a zero (size,) vector at idx; duplicates add."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    data = np.zeros(size, dtype=x.data.dtype)
    np.add.at(data, idx, x.data)

    def bwd(g):
        _acc(x, g[idx])

    return _make(data, (x,), bwd)


def gather_rc(x, cols: np.ndarray) -> Tensor:
    """Pick x[i, cols[i]] for every row i of a (B, S) tensor."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    rows = np.arange(x.data.shape[0])
    xd = x.data

    def bwd(g):
        gx = np.zeros_like(xd)
        np.add.at(gx, (rows, cols), g)
        _acc(x, gx)

    return _make(xd[rows, cols], (x,), bwd)


def colmul(x, w) -> Tensor:
    """(n, d) scaled per row by a length-n vector."""
    x, w = as_tensor(x), as_tensor(w)
    xd, wd = x.data, w.data

    def bwd(g):
        _acc(x, g * wd[:, None])
        _acc(w, (g * xd).sum(axis=1))

    return _make(xd * wd[:, None], (x, w), bwd)


def squeeze_col(x) -> Tensor:
    """(n, 1) -> (n,)."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != 1:
        raise DimensionError(f"squeeze_col expects (n, 1), got {x.data.shape}")

    def bwd(g):
        _acc(x, g[:, None])

    return _make(x.data[:, 0], (x,), bwd)


def seg_sum(x, seg: SegmentIndex) -> Tensor:
    """Per-segment sum of rows (or of a 1-D vector)."""
    x = as_tensor(x)
    ids = seg.ids

    def bwd(g):
        _acc(x, g[ids])

    return _make(seg.sum(x.data), (x,), bwd)


def seg_max(x, seg: SegmentIndex, empty: float = 0.0) -> Tensor:
    """Per-segment elementwise max; empty segments produce ``empty``.

    The gradient routes to a single maximal entry per (segment, column);
    ties are common here (symmetric nodes produce identical messages) and
    splitting across them would double-count.
    """
    x = as_tensor(x)
    out_data = seg.max(x.data, empty=empty)
    xd = x.data

    def bwd(g):
        if not len(seg.order):
            return
        order = seg.order
        ids_sorted = seg.sorted_ids
        m = len(order)
        pos = np.arange(m, dtype=np.int32)[:, None]
        cand = np.where(xd[order] == out_data[ids_sorted], pos, np.int32(m))
        first = np.minimum.reduceat(cand, seg.starts, axis=0)
        winner = pos == first[seg.uniq_inverse]
        gx = np.empty_like(xd)
        gx[order] = np.where(winner, g[ids_sorted], 0.0)
        _acc(x, gx)

    return _make(out_data, (x,), bwd)


# ---------------------------------------------------------------------------
# softmax family


def softmax_masked(logits, mask) -> Tensor:
    """Probabilities over the unmasked entries of a vector; masked are exact 0."""
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.data.shape:
        raise DimensionError("mask shape mismatch")
    if not mask.any():
        raise NoValidChoiceError("softmax over a fully masked vector")
    ld = logits.data
    m = ld[mask].max()
    z = np.exp(np.where(mask, ld - m, -np.inf))
    total = z.sum()
    p = z / total

    def bwd(g):
        _acc(logits, p * (g - (g * p).sum()))

    return _make(p, (logits,), bwd)


def masked_log_softmax_rows(logits, mask) -> Tensor:
    """Row-wise log-softmax of (B, S) with a boolean mask; masked -> -inf.

    Rows with no unmasked entry are tolerated (all -inf output, zero
    gradient); callers must not select from them.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    ld = logits.data
    neg = np.array(-np.inf, dtype=ld.dtype)
    valid_rows = mask.any(axis=1)
    m = np.where(valid_rows, np.where(mask, ld, neg).max(axis=1), 0.0)
    shifted = np.where(mask, ld - m[:, None], -np.inf)
    z = np.exp(shifted)
    s = z.sum(axis=1)
    s_safe = np.where(s > 0, s, 1.0)
    out_data = np.where(mask, shifted - np.log(s_safe)[:, None], -np.inf)
    p = np.where(mask, z / s_safe[:, None], 0.0)

    def bwd(g):
        g = np.where(mask, g, 0.0)
        _acc(logits, (g - p * g.sum(axis=1)[:, None]).astype(ld.dtype, copy=False))

    return _make(out_data, (logits,), bwd)


def seg_masked_log_softmax(logits, mask, seg: SegmentIndex) -> Tensor:
    """Per-segment log-softmax of a flat score vector with a boolean mask.

    Segments whose mask is entirely false yield -inf everywhere and no
    gradient, mirroring the row variant.
    """
    logits = as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    ld = logits.data
    ids = seg.ids
    neg = np.array(-np.inf, dtype=ld.dtype)
    masked_vals = np.where(mask, ld, neg)
    m = seg.max(masked_vals, empty=0.0)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = np.where(mask, ld - m[ids], -np.inf)
    z = np.exp(shifted)
    s = seg.sum(z)
    s_safe = np.where(s > 0, s, 1.0)
    out_data = np.where(mask, shifted - np.log(s_safe)[ids], -np.inf)
    p = np.where(mask, z / s_safe[ids], 0.0)

    def bwd(g):
        g = np.where(mask, g, 0.0)
        gs = seg.sum(g)
        _acc(logits, (g - p * gs[ids]).astype(ld.dtype, copy=False))

    return _make(out_data, (logits,), bwd)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def bernoulli_logp(scores, member, allowed=None) -> Tensor:
    """Per-entry log-probability of independent Bernoulli draws.

    ``member`` marks selected entries: log sigmoid(s) when selected,
    log(1 - sigmoid(s)) otherwise. Entries with ``allowed`` false are forced
    to probability zero and contribute exactly 0 when unselected.
    """
    scores = as_tensor(scores)
    member = np.asarray(member, dtype=bool)
    sd = scores.data
    logp_on = -_softplus(-sd)
    logp_off = -_softplus(sd)
    out_data = np.where(member, logp_on, logp_off)
    sig = 1.0 / (1.0 + np.exp(-sd))
    d = member.astype(sd.dtype) - sig
    if allowed is not None:
        allowed = np.asarray(allowed, dtype=bool)
        if (member & ~allowed).any():
            raise AutodiffError("selected entry is precondition-forbidden")
        out_data = np.where(allowed, out_data, 0.0)
        d = np.where(allowed, d, 0.0)

    def bwd(g):
        _acc(scores, g * d)

    return _make(out_data, (scores,), bwd)
