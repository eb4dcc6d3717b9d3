"""Projections into the language model, the tiny frozen decoder, and everything
that turns token sequences into losses, option scores and greedy text.

Visual rows are spliced in place of the ``<imagehere>`` placeholder,
framed by ``<video>`` / ``</video>``. Text tokens take positional
embeddings by their index among text tokens only, so the number of
visual rows never shifts text positions. Visual rows take part in causal
attention like any other position but are never scored.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import MODES
from .errors import ContractViolation, MalformedPrompt, RejectedInput
from .numerics import Tensor
from .qformer import TokenSet
from .vocab import PromptPair, mc_prompt

PHI_KEY = "phi_key"
PHI_INTER = "koala.phi_inter"
NEG = -1e9


def init_params(store, cfg, rng):
    m = cfg.model
    D, Df, V = m.width, m.lm_width, m.vocab
    store.add(f"{PHI_KEY}.W", rng.standard_normal((D, Df)) / np.sqrt(D))
    store.add(f"{PHI_KEY}.b", np.zeros(Df))
    store.add("lm.tok", 0.3 * rng.standard_normal((V, Df)))
    store.add("lm.pos", 0.1 * rng.standard_normal((m.lm_max_text, Df)))
    for l in range(m.lm_layers):
        p = f"lm.{l}"
        for ln in ("ln1", "ln2"):
            store.add(f"{p}.{ln}.gain", np.ones(Df))
            store.add(f"{p}.{ln}.bias", np.zeros(Df))
        for proj in ("q", "k", "v"):
            store.add(f"{p}.{proj}.W", rng.standard_normal((Df, Df)) / np.sqrt(Df))
            store.add(f"{p}.{proj}.b", np.zeros(Df))
        store.add(f"{p}.o.W", 0.5 * rng.standard_normal((Df, Df)) / np.sqrt(Df))
        store.add(f"{p}.o.b", np.zeros(Df))
        store.add(f"{p}.ff1.W", rng.standard_normal((Df, 2 * Df)) / np.sqrt(Df))
        store.add(f"{p}.ff1.b", np.zeros(2 * Df))
        store.add(f"{p}.ff2.W", 0.5 * rng.standard_normal((2 * Df, Df)) / np.sqrt(2 * Df))
        store.add(f"{p}.ff2.b", np.zeros(Df))
    store.add("lm.ln_f.gain", np.ones(Df))
    store.add("lm.ln_f.bias", np.zeros(Df))


def init_phi_inter(store, cfg, frozen=False):
    """phi_inter starts as a copy of phi_key (or the identity for square widths)."""
    m = cfg.model
    if m.phi_inter_init == "identity":
        W, b = np.eye(m.width), np.zeros(m.lm_width)
    else:
        W, b = store[f"{PHI_KEY}.W"].data.copy(), store[f"{PHI_KEY}.b"].data.copy()
    store.add(f"{PHI_INTER}.W", W, frozen=frozen)
    store.add(f"{PHI_INTER}.b", b, frozen=frozen)


@dataclass
class Assembled:
    embeds: Tensor           # (B, T, Df)
    tokens: np.ndarray       # (B, T) token ids, -1 at visual rows and padding
    response_mask: np.ndarray  # (B, T) 1 at response token positions
    n_visual: int
    lengths: np.ndarray      # (B,) unpadded lengths

    @property
    def targets(self):
        """Next-token targets and their mask for every predicting position."""
        tgt = np.zeros_like(self.tokens)
        tgt[:, :-1] = np.maximum(self.tokens[:, 1:], 0)
        mask = np.zeros(self.tokens.shape, dtype=np.float64)
        mask[:, :-1] = self.response_mask[:, 1:]
        return tgt, mask


class Bridge:
    def __init__(self, store, cfg, vocab):
        self.store = store
        self.cfg = cfg
        self.vocab = vocab
        self.layers = cfg.model.lm_layers
        self.heads = cfg.model.lm_heads
        self.max_text = cfg.model.lm_max_text
        if len(vocab) != cfg.model.vocab:
            raise ContractViolation(f"vocab has {len(vocab)} entries, config says {cfg.model.vocab}")

    # projections
    def project_key(self, z_key):
        if z_key.role != "key":
            raise ContractViolation(f"project_key needs role 'key', got {z_key.role!r}")
        return nx.affine(z_key.values, self.store[f"{PHI_KEY}.W"], self.store[f"{PHI_KEY}.b"])

    def project_inter(self, z_inter):
        if z_inter.role != "inter":
            raise ContractViolation(f"project_inter needs role 'inter', got {z_inter.role!r}")
        return nx.affine(z_inter.values, self.store[f"{PHI_INTER}.W"], self.store[f"{PHI_INTER}.b"])

    def visual_rows(self, z_key, z_inter, mode):
        """Projected visual block for a mode; None for ``no_visual``."""
        if mode not in MODES:
            raise RejectedInput(f"unknown mode {mode!r}")
        if mode == "no_visual":
            return None
        if mode == "base_only" or z_inter is None:
            return self.project_key(z_key)
        if z_key is None:
            return self.project_inter(z_inter)
        return nx.concat([self.project_key(z_key), self.project_inter(z_inter)], axis=-2)

    # sequence assembly
    def assemble(self, pairs, visual):
        """Batch assembly; every prompt must hold the placeholder at the same index."""
        vocab = self.vocab
        if not pairs:
            raise RejectedInput("empty batch")
        for p in pairs:
            p.validate(vocab)
        k = pairs[0].placeholder_index(vocab)
        if any(p.placeholder_index(vocab) != k for p in pairs):
            raise MalformedPrompt("placeholder position differs within a batch")
        B = len(pairs)
        texts = [p.prompt[:k] + [vocab.vid_open, vocab.vid_close] + p.prompt[k + 1:] + p.response
                 for p in pairs]
        t_len = max(len(t) for t in texts)
        if t_len > self.max_text:
            raise RejectedInput(f"text length {t_len} exceeds lm_max_text={self.max_text}")
        ids = np.full((B, t_len), vocab.pad, dtype=np.int64)
        resp = np.zeros((B, t_len), dtype=np.float64)
        for b, (t, p) in enumerate(zip(texts, pairs)):
            ids[b, :len(t)] = t
            resp[b, len(t) - len(p.response):len(t)] = 1.0
        emb = nx.take_rows(self.store["lm.tok"], ids) + self.store["lm.pos"][:t_len]
        if visual is not None:
            visual = nx.as_tensor(visual)
            nv = visual.shape[-2]
            if visual.ndim == 2:
                visual = nx.broadcast_to(visual, (B, *visual.shape))
            elif visual.shape[0] != B:
                raise RejectedInput("visual batch size does not match prompt batch")
            emb = nx.concat([emb[:, :k + 1], visual, emb[:, k + 1:]], axis=1)
        else:
            nv = 0
        tokens = np.concatenate([ids[:, :k + 1], np.full((B, nv), -1), ids[:, k + 1:]], axis=1)
        rmask = np.concatenate([resp[:, :k + 1], np.zeros((B, nv)), resp[:, k + 1:]], axis=1)
        lengths = np.array([len(t) + nv for t in texts])
        for b in range(B):
            tokens[b, lengths[b]:] = -1
        return Assembled(emb, tokens, rmask, nv, lengths)

    def assemble_sequence(self, pair, z_key, z_inter, mode):
        return self.assemble([pair], self.visual_rows(z_key, z_inter, mode))

    # decoder
    def logits(self, embeds):
        s = self.store
        x = embeds
        T = x.shape[-2]
        causal = np.triu(np.full((T, T), NEG), k=1)
        for l in range(self.layers):
            p = f"lm.{l}"
            h = nx.layer_norm(x, s[f"{p}.ln1.gain"], s[f"{p}.ln1.bias"])
            q = nx.affine(h, s[f"{p}.q.W"], s[f"{p}.q.b"])
            k = nx.affine(h, s[f"{p}.k.W"], s[f"{p}.k.b"])
            v = nx.affine(h, s[f"{p}.v.W"], s[f"{p}.v.b"])
            a = nx.attention(q, k, v, self.heads, mask=causal)
            x = x + nx.affine(a, s[f"{p}.o.W"], s[f"{p}.o.b"])
            h = nx.layer_norm(x, s[f"{p}.ln2.gain"], s[f"{p}.ln2.bias"])
            h = nx.gelu(nx.affine(h, s[f"{p}.ff1.W"], s[f"{p}.ff1.b"]))
            x = x + nx.affine(h, s[f"{p}.ff2.W"], s[f"{p}.ff2.b"])
        x = nx.layer_norm(x, s["lm.ln_f.gain"], s["lm.ln_f.bias"])
        return nx.matmul(x, nx.swapaxes(s["lm.tok"], 0, 1))

    def response_nll(self, assembled):
        """Per-example -sum_j log p(r_j | r_<j, visual, prompt), shape (B,)."""
        tgt, mask = assembled.targets
        return nx.nll_rows(self.logits(assembled.embeds), tgt, mask)

    def sequence_nll(self, pairs, visual):
        return self.response_nll(self.assemble(pairs, visual))

    def training_loss(self, pair, z_key, z_inter, mode="full"):
        """Teacher-forced cross-entropy summed over the response tokens of one sample."""
        nll = self.response_nll(self.assemble_sequence(pair, z_key, z_inter, mode))
        return nx.sum(nll)

    # multiple choice
    def option_pairs(self, question, options):
        prompt = mc_prompt(self.vocab, question)
        pairs = []
        for opt in options:
            ids = self.vocab.encode(opt) if isinstance(opt, str) else list(opt)
            if not ids:
                raise RejectedInput("empty option")
            pairs.append(PromptPair(prompt, ids))
        return pairs

    def score_options(self, question, options, visual=None, length_normalize=False):
        """Log-likelihood of each option's tokens after the question prompt."""
        pairs = self.option_pairs(question, options)
        if visual is not None:
            visual = nx.as_tensor(visual)
            if visual.ndim == 3:
                visual = visual[0]
        with nx.no_grad():
            nll = self.sequence_nll(pairs, visual).data.astype(np.float64)
        scores = -nll
        if length_normalize:
            scores = scores / np.array([len(p.response) for p in pairs], dtype=np.float64)
        return scores

    def score_option(self, question, option, visual=None, length_normalize=False):
        return float(self.score_options(question, [option], visual, length_normalize)[0])

    def generate_greedy(self, prompt, visual, max_len):
        """Argmax decoding until EOS or ``max_len`` tokens."""
        if max_len < 1:
            raise RejectedInput("max_len must be >= 1")
        if visual is not None:
            visual = nx.as_tensor(visual)
            if visual.ndim == 3:
                visual = visual[0]
        out = []
        with nx.no_grad():
            for _ in range(max_len):
                pair = PromptPair(list(prompt), out + [self.vocab.pad])
                asm = self.assemble([pair], visual)
                last = int(asm.lengths[0]) - 2
                nxt = int(np.argmax(self.logits(asm.embeds).data[0, last]))
                out.append(nxt)
                if nxt == self.vocab.eos:
                    break
        return out


def predict_mc(scores):
    """Index of the highest score; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size < 2:
        raise RejectedInput("need at least two options")
    return int(np.flatnonzero(scores == scores.max())[0])
