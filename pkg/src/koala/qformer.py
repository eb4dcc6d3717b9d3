"""Video query transformer (frozen after base pretraining) and the key-frames tokenizer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, RejectedInput, WindowLengthError
from .frame_encoder import FrameFeatures
from .numerics import Tensor

ROLES = ("key", "segment", "inter", "q_final")
POS = "qformer.pos"
Q_VIDEO = "qformer.Q_video"


@dataclass
class TokenSet:
    role: str
    values: Tensor  # (..., count, D)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractViolation(f"unknown token role {self.role!r}")

    @property
    def count(self):
        return self.values.shape[-2]

    @property
    def width(self):
        return self.values.shape[-1]


def _linear(store, rng, name, n_in, n_out, scale=None):
    scale = scale if scale is not None else 1.0 / np.sqrt(n_in)
    store.add(f"{name}.W", scale * rng.standard_normal((n_in, n_out)))
    store.add(f"{name}.b", np.zeros(n_out))


def _norm(store, name, width):
    store.add(f"{name}.gain", np.ones(width))
    store.add(f"{name}.bias", np.zeros(width))


def init_params(store, cfg, rng):
    m = cfg.model
    D, Din = m.width, m.input_width
    store.add(POS, 0.5 * rng.standard_normal((m.max_frames, Din)))
    store.add(Q_VIDEO, rng.standard_normal((m.n_queries, D)))
    _norm(store, "qformer.kv_ln", Din)
    for l in range(m.qformer_layers):
        p = f"qformer.{l}"
        _norm(store, f"{p}.sa_ln", D)
        for proj in ("q", "k", "v"):
            _linear(store, rng, f"{p}.sa_{proj}", D, D)
        _linear(store, rng, f"{p}.sa_o", D, D, scale=0.5 / np.sqrt(D))
        _norm(store, f"{p}.ca_ln", D)
        _linear(store, rng, f"{p}.ca_q", D, D)
        _linear(store, rng, f"{p}.ca_k", Din, D)
        _linear(store, rng, f"{p}.ca_v", Din, D)
        _linear(store, rng, f"{p}.ca_o", D, D, scale=0.5 / np.sqrt(D))
        _norm(store, f"{p}.ff_ln", D)
        _linear(store, rng, f"{p}.ff1", D, m.ff_mult * D)
        _linear(store, rng, f"{p}.ff2", m.ff_mult * D, D, scale=0.5 / np.sqrt(m.ff_mult * D))


class QFormer:
    def __init__(self, store, cfg):
        self.store = store
        self.layers = cfg.model.qformer_layers
        self.heads = cfg.model.heads
        self.width = cfg.model.width
        self.max_frames = cfg.model.max_frames

    def _lin(self, x, name):
        return nx.affine(x, self.store[f"{name}.W"], self.store[f"{name}.b"])

    def _ln(self, x, name):
        return nx.layer_norm(x, self.store[f"{name}.gain"], self.store[f"{name}.bias"])

    def apply_temporal_positions(self, feat, table=None):
        """Add the position row of frame t to each of its patches, then flatten frames x patches."""
        values = feat.values if isinstance(feat, FrameFeatures) else nx.as_tensor(feat)
        *lead, frames, patches, width = values.shape
        table = self.store[POS] if table is None else nx.as_tensor(table)
        if frames > table.shape[0]:
            raise WindowLengthError(f"{frames} frames exceed the {table.shape[0]}-entry position table")
        pos = table[:frames] if frames < table.shape[0] else table
        out = values + nx.reshape(pos, (frames, 1, width))
        return nx.reshape(out, (*lead, frames * patches, width))

    def forward(self, input_seq, query_tokens, attn_out=None):
        """Run the query stack; one output row per query row, order preserved.

        ``input_seq`` (..., m, D_in); ``query_tokens`` (..., q, D). When
        ``attn_out`` is a list, per-layer cross-attention weights are appended.
        """
        input_seq = nx.as_tensor(input_seq)
        x = nx.as_tensor(query_tokens)
        if input_seq.shape[-2] == 0:
            raise RejectedInput("empty input sequence")
        if x.shape[-1] != self.width:
            raise RejectedInput(f"query width {x.shape[-1]} != {self.width}")
        if self.layers == 0:
            return x
        kv = self._ln(input_seq, "qformer.kv_ln")
        for l in range(self.layers):
            p = f"qformer.{l}"
            h = self._ln(x, f"{p}.sa_ln")
            sa = nx.attention(self._lin(h, f"{p}.sa_q"), self._lin(h, f"{p}.sa_k"),
                              self._lin(h, f"{p}.sa_v"), self.heads)
            x = x + self._lin(sa, f"{p}.sa_o")
            h = self._ln(x, f"{p}.ca_ln")
            weights = [] if attn_out is not None else None
            ca = nx.attention(self._lin(h, f"{p}.ca_q"), self._lin(kv, f"{p}.ca_k"),
                              self._lin(kv, f"{p}.ca_v"), self.heads, weights_out=weights)
            if attn_out is not None:
                attn_out.append(weights[0])
            x = x + self._lin(ca, f"{p}.ca_o")
            h = self._ln(x, f"{p}.ff_ln")
            x = x + self._lin(nx.gelu(self._lin(h, f"{p}.ff1")), f"{p}.ff2")
        return x

    def tokenize_features(self, features, queries=None, table=None, attn_out=None):
        """F_VQT(features; queries) on (..., frames, P, D_in) features."""
        q = self.store[Q_VIDEO] if queries is None else queries
        seq = self.apply_temporal_positions(features, table=table)
        return self.forward(seq, q, attn_out=attn_out)


def key_frames_tokenize(qformer, encoder, frames, expected=None, table=None):
    """z_key = F_VQT(F_frame(V_key); Q_video) for a list of Frame records."""
    if expected is not None and len(frames) != expected:
        raise RejectedInput(f"expected {expected} key frames, got {len(frames)}")
    feats = encoder.encode_frames(frames)
    return TokenSet("key", qformer.tokenize_features(feats, table=table))
