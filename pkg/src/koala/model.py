"""Key-frame-conditioned segment (CS) and video (CV) tokenizers.

CS runs the frozen query transformer over one segment's frames with the
query side ``concat{Q_video, z_key + Q_segs}`` and keeps only the outputs
at the Q_video positions. CV treats the segment tokens, tagged with a
per-segment temporal query and a per-token concept query, as the input
sequence of a second pass whose query side is ``concat{Q_video,
z_key + Q_inter}``, and returns ``z_key + w * (kept outputs)``.

All tokenizers accept leading batch axes: z_key is (..., N, D) and segment
tokens are stacked as (..., S, N, D).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import baselines, frame_encoder, llm_bridge, numerics as nx, qformer
from .config import AblationFlags
from .errors import ContractViolation, RejectedInput
from .frame_encoder import FrameEncoder, FrameFeatures
from .llm_bridge import Bridge
from .numerics import ParamStore, Tensor
from .qformer import Q_VIDEO, QFormer, TokenSet
from .vocab import Vocab

Q_SEGS = "koala.Q_segs"
Q_TEMP = "koala.Q_temp"
Q_CONCEPTS = "koala.Q_concepts"
Q_INTER = "koala.Q_inter"
W = "koala.w"
KOALA_PARAMS = (Q_SEGS, Q_TEMP, Q_CONCEPTS, Q_INTER, W,
                f"{llm_bridge.PHI_INTER}.W", f"{llm_bridge.PHI_INTER}.b")
# parameter groups as reported in manifests and acceptance checks
LEARNABLE_GROUPS = {
    "Q_segs": (Q_SEGS,), "Q_temp": (Q_TEMP,), "Q_concepts": (Q_CONCEPTS,),
    "Q_inter": (Q_INTER,), "w": (W,),
    "phi_inter": (f"{llm_bridge.PHI_INTER}.W", f"{llm_bridge.PHI_INTER}.b"),
}
FROZEN_GROUPS = {
    "Q_video": (Q_VIDEO,), "qformer": "qformer.", "frame_encoder": "frame_encoder.",
    "lm": "lm.", "phi_key": f"{llm_bridge.PHI_KEY}.",
}


def group_names(store, spec):
    if isinstance(spec, tuple):
        return [n for n in spec if n in store]
    return [n for n in store.names(spec) if n != Q_VIDEO]


def init_base_params(cfg, seed):
    """Frame encoder, query transformer, Q_video, phi_key and the LM."""
    rng = np.random.default_rng([seed, 0xBA5E])
    store = ParamStore()
    frame_encoder.init_params(store, cfg, np.random.default_rng([seed, 0xF4A3]))
    qformer.init_params(store, cfg, rng)
    llm_bridge.init_params(store, cfg, rng)
    return store


def add_koala_params(store, cfg):
    """Zero-initialised learnable query banks and w; phi_inter copied from phi_key."""
    m = cfg.model
    N, D = m.n_queries, m.width
    store.add(Q_SEGS, np.zeros((N, D)))
    store.add(Q_TEMP, np.zeros((m.s_max, D)))
    store.add(Q_CONCEPTS, np.zeros((N, D)))
    store.add(Q_INTER, np.zeros((N, D)))
    store.add(W, np.zeros(1))
    llm_bridge.init_phi_inter(store, cfg)
    return store


@dataclass
class QueryBank:
    """View of the query parameters inside a ParamStore."""
    store: ParamStore

    @property
    def Q_video(self):
        return self.store[Q_VIDEO]

    @property
    def Q_segs(self):
        return self.store[Q_SEGS]

    @property
    def Q_temp(self):
        return self.store[Q_TEMP]

    @property
    def Q_concepts(self):
        return self.store[Q_CONCEPTS]

    @property
    def Q_inter(self):
        return self.store[Q_INTER]

    @property
    def w(self):
        return self.store[W]


def _stack_segments(z_segs):
    """Accept a list of TokenSets or one (..., S, n, D) tensor; return the tensor."""
    if isinstance(z_segs, TokenSet):
        return z_segs.values
    if isinstance(z_segs, Tensor):
        return z_segs
    if not z_segs:
        raise RejectedInput("no segment tokens")
    counts = {z.count for z in z_segs}
    if len(counts) != 1:
        raise ContractViolation(f"ragged segment token counts {sorted(counts)}")
    return nx.stack([z.values for z in z_segs], axis=-3)


def _prepend_video_queries(q_video, cond):
    """concat{Q_video, cond} along rows, broadcasting Q_video over cond's batch axes."""
    if cond.ndim > 2:
        q_video = nx.broadcast_to(q_video, (*cond.shape[:-2], *q_video.shape))
    return nx.concat([q_video, cond], axis=-2)


class KoalaModel:
    def __init__(self, store, cfg, vocab=None, flags=None):
        self.store = store
        self.cfg = cfg
        self.flags = flags or cfg.model.flags
        self.vocab = vocab or Vocab.for_size(cfg.model.vocab)
        self.encoder = FrameEncoder(store, cfg)
        self.qformer = QFormer(store, cfg)
        self.bridge = Bridge(store, cfg, self.vocab)
        self.bank = QueryBank(store)
        self.n = cfg.model.n_queries

    # features

    def features(self, actions, seeds):
        return Tensor(self.encoder.encode_ids(actions, seeds))

    def _as_features(self, frames):
        if isinstance(frames, FrameFeatures):
            return frames.values
        if isinstance(frames, Tensor):
            return frames
        return self.encoder.encode_frames(list(frames)).values

    # tokenizers

    def key_frames_tokenize(self, frames, table=None, attn_out=None):
        feats = self._as_features(frames)
        if not isinstance(frames, (Tensor, FrameFeatures)) and len(frames) != self.cfg.model.key_frames:
            raise RejectedInput(f"expected {self.cfg.model.key_frames} key frames, got {len(frames)}")
        return TokenSet("key", self.qformer.tokenize_features(feats, table=table, attn_out=attn_out))

    def cs_tokenize(self, segment, z_key, attn_out=None):
        """F_CS(S_i | z_key); ``segment`` may carry extra leading axes (..., S, T_seg, P, D_in)."""
        feats = self._as_features(segment)
        zk = z_key.values if isinstance(z_key, TokenSet) else z_key
        if zk.shape[-2] != self.n:
            raise ContractViolation(f"z_key has {zk.shape[-2]} rows, expected {self.n}")
        q_video = self.bank.Q_video
        if self.flags.condition_on_zkey:
            if self.bank.Q_segs.shape != zk.shape[-2:]:
                raise ContractViolation("z_key and Q_segs row counts differ")
            queries = _prepend_video_queries(q_video, zk + self.bank.Q_segs)
            # align z_key's batch axes with the per-segment axis of the features
            extra = feats.ndim - 3 - (queries.ndim - 2)
            if extra > 0:
                queries = nx.reshape(queries, (*queries.shape[:-2], *([1] * extra), *queries.shape[-2:]))
        else:
            queries = q_video
        out = self.qformer.forward(self.qformer.apply_temporal_positions(feats), queries,
                                   attn_out=attn_out)
        if not (self.flags.condition_on_zkey and self.flags.keep_zkey_output):
            out = out[..., :self.n, :]
        return TokenSet("segment", out)

    def build_q_final(self, z_segs):
        """Q_final[i, t] = z_segs[i, t] + Q_temp[i] + Q_concepts[t], flattened segment-major."""
        z = _stack_segments(z_segs)
        *lead, S, n, D = z.shape
        if S > self.bank.Q_temp.shape[0]:
            raise ContractViolation(f"{S} segments exceed the {self.bank.Q_temp.shape[0]} temporal queries")
        if self.flags.temporal_concept_queries:
            temp = self.bank.Q_temp[:S] if S < self.bank.Q_temp.shape[0] else self.bank.Q_temp
            concepts = self.bank.Q_concepts
            if n != concepts.shape[0]:
                # kept conditioning rows reuse the concept queries of their position
                concepts = nx.concat([concepts] * (n // concepts.shape[0]), axis=0)
            z = z + nx.reshape(temp, (S, 1, D)) + concepts
        return TokenSet("q_final", nx.reshape(z, (*lead, S * n, D)))

    def cv_tokenize(self, z_segs, z_key, attn_out=None):
        """z_inter = z_key + w * F_VQT(Q_final; concat{Q_video, z_key + Q_inter})[:N]."""
        z = _stack_segments(z_segs)
        if z.shape[-3] == 0:
            raise RejectedInput("no segments")
        zk = z_key.values if isinstance(z_key, TokenSet) else z_key
        if zk.shape[-2] != self.n:
            raise ContractViolation(f"z_key has {zk.shape[-2]} rows, expected {self.n}")
        q_final = self.build_q_final(z).values
        queries = _prepend_video_queries(self.bank.Q_video, zk + self.bank.Q_inter)
        out = self.qformer.forward(q_final, queries, attn_out=attn_out)[..., :self.n, :]
        return TokenSet("inter", zk + self.bank.w * out)

    # composition

    def segment_key_tokens(self, seg_feats):
        """F_key applied independently to each segment (the baselines' encoder)."""
        return self.qformer.tokenize_features(seg_feats)

    def encode(self, key_feats, seg_feats=None, z_key=None, attn=None):
        """(z_key, z_inter) for the configured aggregation; z_inter is None for the base pathway.

        For the average / concat / memory variants z_key is returned as None
        and z_inter holds the aggregated segment tokens.
        """
        agg = self.cfg.model.aggregation
        f = self.flags
        if z_key is None:
            z_key = self.key_frames_tokenize(key_feats).values
        zk = TokenSet("key", z_key)
        if agg == "base" or (agg == "koala" and not f.enable_cs and not f.enable_cv):
            return zk, None
        if seg_feats is None:
            raise RejectedInput("segment frames are required for this aggregation")
        if agg == "koala":
            cs_attn = [] if attn is not None else None
            if f.enable_cs:
                z_segs = self.cs_tokenize(seg_feats, z_key, attn_out=cs_attn).values
            else:
                z_segs = self.segment_key_tokens(seg_feats)
            if f.enable_cv:
                cv_attn = [] if attn is not None else None
                z_inter = self.cv_tokenize(z_segs, z_key, attn_out=cv_attn)
                if attn is not None:
                    attn["cv"] = cv_attn
            else:
                z_inter = TokenSet("inter", nx.mean(z_segs, axis=-3))
            if attn is not None:
                attn["cs"] = cs_attn
            return zk, z_inter
        with nx.no_grad():
            per_seg = self.segment_key_tokens(seg_feats)
        segs = [per_seg[..., i, :, :] for i in range(per_seg.shape[-3])]
        if agg == "average":
            return None, baselines.aggregate_average(segs)
        if agg == "concat":
            return None, baselines.aggregate_concat(segs)
        m = self.cfg.model
        if per_seg.ndim == 3:
            return None, baselines.memory_aggregate(segs, m.memory_short, m.c_long, out_rows=self.n)
        rows = [baselines.memory_aggregate([s.data[b] for s in segs], m.memory_short, m.c_long,
                                           out_rows=self.n).values
                for b in range(per_seg.shape[0])]
        return None, TokenSet("inter", nx.stack(rows, axis=0))

    def forward(self, sample):
        """(z_key, z_inter) TokenSets for one VideoSample."""
        key = self.features(sample.key_actions, sample.key_seeds)
        seg = None
        if sample.seg_actions is not None:
            seg = self.features(sample.seg_actions, sample.seg_seeds)
        return self.encode(key, seg)

    def visual(self, z_key, z_inter, mode):
        if mode == "base_only" and z_key is None:
            raise RejectedInput("base_only mode needs key-frame tokens")
        if mode == "base_only":
            return self.bridge.visual_rows(z_key, None, mode)
        if z_key is None:
            return self.bridge.visual_rows(None, z_inter, mode) if mode != "no_visual" else None
        return self.bridge.visual_rows(z_key, z_inter, mode)


def koala_forward(model, sample):
    return model.forward(sample)


def build_model(cfg, seed=0, with_koala=True, vocab=None):
    store = init_base_params(cfg, seed)
    if with_koala:
        store.freeze_all()
        add_koala_params(store, cfg)
    return KoalaModel(store, cfg, vocab)


def default_flags():
    return AblationFlags()
