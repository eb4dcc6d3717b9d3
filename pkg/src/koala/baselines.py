"""Temporal aggregation baselines: average, concatenation and a two-level memory.

Each takes per-segment key-frames tokens F_key(S_i) and returns one
TokenSet for the language model.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import RejectedInput
from .numerics import Tensor
from .numerics.tensor import make_node
from .qformer import TokenSet


def _values(segments):
    if not segments:
        raise RejectedInput("no segments to aggregate")
    vals = [s.values if isinstance(s, TokenSet) else nx.as_tensor(s) for s in segments]
    shape = vals[0].shape
    if any(v.shape != shape for v in vals):
        raise RejectedInput("segment token sets differ in shape")
    return vals


def aggregate_average(segments, role="inter"):
    """Elementwise mean over segments; order-blind by construction.

    Values are sorted along the segment axis before summing so the result is
    bitwise identical under any segment permutation (float addition is not
    associative).
    """
    vals = _values(segments)
    k = len(vals)
    data = np.sort(np.stack([v.data for v in vals]), axis=0).sum(axis=0) * (1.0 / k)
    data = data.astype(vals[0].data.dtype, copy=False)

    def backward(g):
        return [g * (1.0 / k)] * k

    return TokenSet(role, make_node(data, vals, backward, "average"))


def aggregate_concat(segments, role="inter"):
    """Row-wise concatenation in segment order (S * N rows)."""
    return TokenSet(role, nx.concat(_values(segments), axis=-2))


@dataclass
class MemoryState:
    short_capacity: int
    long_capacity: int
    short_term: deque = field(default_factory=deque)
    long_term: list = field(default_factory=list)
    merges: int = 0

    def push(self, tokens):
        self.short_term.append(np.asarray(tokens))
        if len(self.short_term) > self.short_capacity:
            self._consolidate(self.short_term.popleft())

    def flush(self):
        while self.short_term:
            self._consolidate(self.short_term.popleft())

    def _consolidate(self, tokens):
        self.long_term.extend(list(tokens))
        while len(self.long_term) > self.long_capacity:
            self._merge_most_similar()

    def _merge_most_similar(self):
        toks = np.stack(self.long_term)
        unit = toks / np.maximum(np.linalg.norm(toks, axis=-1, keepdims=True), 1e-12)
        sims = np.sum(unit[:-1] * unit[1:], axis=-1)
        i = int(np.argmax(sims))
        merged = 0.5 * (self.long_term[i] + self.long_term[i + 1])
        self.long_term[i:i + 2] = [merged]
        self.merges += 1


def memory_aggregate(segments, short_capacity, long_capacity, out_rows=None, role="inter",
                     return_state=False):
    """Stream segments through a FIFO short-term memory into a merged long-term store.

    Evicted (and, at the end, remaining) short-term tokens join the long-term
    store; while it exceeds ``long_capacity`` the most cosine-similar adjacent
    pair is replaced by its mean. The long-term tokens are returned, zero
    padded or truncated to ``out_rows`` when given. Works on a single video
    (2-D token sets); upstream tokens are treated as constants.
    """
    if short_capacity < 1 or long_capacity < 1:
        raise RejectedInput("memory capacities must be >= 1")
    vals = _values(segments)
    state = MemoryState(short_capacity, long_capacity)
    for v in vals:
        if v.ndim != 2:
            raise RejectedInput("memory_aggregate expects per-video (N, D) token sets")
        state.push(v.data)
    state.flush()
    out = np.stack(state.long_term)
    if out_rows is not None:
        if len(out) >= out_rows:
            out = out[:out_rows]
        else:
            out = np.concatenate([out, np.zeros((out_rows - len(out), out.shape[1]), out.dtype)])
    ts = TokenSet(role, Tensor(out, dtype=out.dtype))
    return (ts, state) if return_state else ts


def extend_positions(table, alpha=None):
    """Hierarchical extension of an n-row position table to n*n rows.

    By default position p = a*n + b maps to table[a] + table[b]. This map is
    symmetric in (a, b), so only n(n+1)/2 rows are distinct. With ``alpha``
    the weighted decomposition u = (table - alpha*table[0]) / (1 - alpha),
    row a*n + b = alpha*u[a] + (1 - alpha)*u[b] is used instead: rows are
    distinct for generic tables and the first n rows reproduce the table.
    """
    if not isinstance(table, Tensor):
        table = np.asarray(table)
        table = Tensor(table, dtype=table.dtype if table.dtype.kind == "f" else None)
    n = table.shape[0]
    if n < 2:
        raise RejectedInput("need at least two positions to extend")
    coarse, fine = table, table
    if alpha is not None:
        if not 0.0 < alpha < 1.0 or alpha == 0.5:
            raise RejectedInput("alpha must be in (0, 1) and differ from 0.5")
        u = (table - table[0:1] * alpha) * (1.0 / (1.0 - alpha))
        coarse, fine = u * alpha, u * (1.0 - alpha)
    coarse = nx.reshape(coarse, (n, 1, table.shape[1]))
    fine = nx.reshape(fine, (1, n, table.shape[1]))
    return nx.reshape(coarse + fine, (n * n, table.shape[1]))
