import math

import numpy as np
import pytest

from koala import numerics as nx
from koala.errors import ContractViolation, MalformedPrompt, RejectedInput
from koala.llm_bridge import predict_mc
from koala.model import build_model
from koala.numerics import Tensor
from koala.qformer import TokenSet
from koala.vocab import (LABELS, SPECIALS, TEMPLATES, PromptPair, Vocab, encode_pair, mc_prompt,
                         questions, render_template, split_words)

from conftest import small_config


def f64_model(seed=0, **overrides):
    with nx.precision("test"):
        return build_model(small_config(**overrides), seed=seed)


def visual_block(model, rows, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(rows, model.cfg.model.lm_width))


# vocabulary and templates

def test_templates_fit_desk_vocabulary():
    v = Vocab.for_size(64)
    assert v.has_templates and len(v) == 64
    for i in range(len(TEMPLATES)):
        for label in LABELS:
            pair = encode_pair(v, *render_template(i, label))
            pair.validate(v)
            assert v.decode(pair.response[:-1]).endswith(label + ".")


def test_small_vocab_falls_back_to_generic_words():
    v = Vocab.for_size(16)
    assert not v.has_templates and len(v) == 16
    assert v.words[:len(SPECIALS)] == list(SPECIALS)
    with pytest.raises(RejectedInput):
        Vocab.for_size(len(SPECIALS))


def test_split_words_handles_markers():
    assert split_words("[INST] <ImageHere> What is it? [/INST]") == \
        ["[inst]", "<imagehere>", "what", "is", "it", "?", "[/inst]"]


def test_oov_rejected():
    with pytest.raises(RejectedInput):
        Vocab.for_size(64).encode("a zebra")


# sequence assembly

def test_assembly_layout(model):
    v = model.vocab
    prompt = mc_prompt(v, questions()[0])
    pair = PromptPair(prompt, v.encode("fix a lamp") + [v.eos])
    vis = Tensor(visual_block(model, 2 * model.n))
    asm = model.bridge.assemble([pair], vis)
    k = prompt.index(v.placeholder)
    n_text = len(prompt) + 1 + len(pair.response)
    assert asm.embeds.shape == (1, n_text + 2 * model.n, model.cfg.model.lm_width)
    toks = asm.tokens[0]
    assert toks[k] == v.vid_open and toks[k + 1 + 2 * model.n] == v.vid_close
    assert np.all(toks[k + 1:k + 1 + 2 * model.n] == -1)
    assert asm.response_mask[0].sum() == len(pair.response)
    # visual rows carry no positional embedding
    np.testing.assert_array_equal(asm.embeds.data[0, k + 1:k + 1 + 2 * model.n], vis.data)
    # text positions count text tokens only
    tok, pos = model.store["lm.tok"].data, model.store["lm.pos"].data
    after = k + 1 + 2 * model.n
    np.testing.assert_allclose(asm.embeds.data[0, after], tok[v.vid_close] + pos[k + 1], rtol=1e-6)


def test_placeholder_contract(model):
    v = model.vocab
    with pytest.raises(MalformedPrompt):
        model.bridge.assemble([PromptPair([v.bos, 9], [9])], None)
    with pytest.raises(MalformedPrompt):
        model.bridge.assemble([PromptPair([v.placeholder, v.placeholder], [9])], None)
    with pytest.raises(MalformedPrompt):
        model.bridge.assemble([PromptPair([v.placeholder, 9], [9]),
                               PromptPair([9, v.placeholder], [9])], None)
    with pytest.raises(RejectedInput):
        model.bridge.assemble([PromptPair([v.placeholder], [])], None)


def test_text_budget_enforced(model):
    v = model.vocab
    long = PromptPair([v.placeholder] + [9] * model.cfg.model.lm_max_text, [9])
    with pytest.raises(RejectedInput):
        model.bridge.assemble([long], None)


def test_projection_roles(model):
    z = TokenSet("segment", Tensor(np.zeros((model.n, model.cfg.model.width))))
    with pytest.raises(ContractViolation):
        model.bridge.project_key(z)
    with pytest.raises(ContractViolation):
        model.bridge.project_inter(z)


def test_visual_modes(model):
    D = model.cfg.model.width
    zk = TokenSet("key", Tensor(np.ones((model.n, D))))
    zi = TokenSet("inter", Tensor(np.ones((model.n, D))))
    b = model.bridge
    assert b.visual_rows(zk, zi, "full").shape[0] == 2 * model.n
    assert b.visual_rows(zk, zi, "base_only").shape[0] == model.n
    assert b.visual_rows(zk, zi, "no_visual") is None
    with pytest.raises(RejectedInput):
        b.visual_rows(zk, zi, "audio")


# losses and scoring

def test_uniform_head_gives_log_vocab_per_token():
    model = f64_model()
    model.store["lm.tok"].data[...] = 0.0
    v = model.vocab
    resp = v.encode("the person is trying to fix a lamp .") + [v.eos]
    pair = PromptPair(mc_prompt(v, questions()[2]), resp)
    nll = model.bridge.sequence_nll([pair], Tensor(visual_block(model, model.n))).data[0]
    assert nll == pytest.approx(len(resp) * math.log(64), rel=1e-12)


def _manual_logprobs(model, text, visual):
    """log softmax at the last position of one unpadded sequence, built by hand."""
    v = model.vocab
    s = model.store
    k = text.index(v.placeholder)
    ids = text[:k] + [v.vid_open, v.vid_close] + text[k + 1:]
    emb = s["lm.tok"].data[ids] + s["lm.pos"].data[:len(ids)]
    emb = np.concatenate([emb[:k + 1], visual, emb[k + 1:]])[None]
    logits = model.bridge.logits(Tensor(emb)).data[0, -1].astype(np.float64)
    m = logits.max()
    return logits - m - math.log(np.exp(logits - m).sum())


def test_score_option_matches_exhaustive_enumeration():
    with nx.precision("test"):
        _check_enumeration()


def _check_enumeration():
    model = f64_model(seed=3)
    v = model.vocab
    vis = visual_block(model, 2 * model.n, seed=1)
    prompt = mc_prompt(v, questions()[0])
    first = _manual_logprobs(model, prompt, vis)
    alphabet = v.encode("make fix clean pack")   # four-token option alphabet
    total = 0.0
    for a in range(len(v)):
        second = _manual_logprobs(model, prompt + [a], vis)
        total += float(np.exp(first[a] + second).sum())
        if a in alphabet:
            for b in alphabet:
                expected = first[a] + second[b]
                got = model.bridge.score_option(questions()[0], [a, b], vis)
                assert abs(got - expected) <= 1e-8
    assert total == pytest.approx(1.0, abs=1e-10)


def test_batched_scores_match_single(model):
    v = model.vocab
    vis = visual_block(model, 2 * model.n)
    opts = list(LABELS[:4])
    batch = model.bridge.score_options(questions()[1], opts, vis)
    for i, o in enumerate(opts):
        assert batch[i] == pytest.approx(model.bridge.score_option(questions()[1], o, vis), abs=1e-4)


def test_length_normalisation(model):
    vis = visual_block(model, model.n)
    raw = model.bridge.score_options(questions()[0], ["fix a lamp", "pack"], vis)
    norm = model.bridge.score_options(questions()[0], ["fix a lamp", "pack"], vis, length_normalize=True)
    np.testing.assert_allclose(norm, raw / np.array([3, 1]), rtol=1e-12)


def test_causal_mask_hides_later_tokens():
    model = f64_model()
    v = model.vocab
    p = mc_prompt(v, questions()[0])
    a = model.bridge.assemble([PromptPair(p, [20, 21, 22])], None)
    b = model.bridge.assemble([PromptPair(p, [20, 21, 30])], None)
    la, lb = model.bridge.logits(a.embeds).data, model.bridge.logits(b.embeds).data
    np.testing.assert_array_equal(la[0, :-1], lb[0, :-1])


def test_right_padding_does_not_change_scores(model):
    v = model.vocab
    p = mc_prompt(v, questions()[0])
    short, long = PromptPair(p, [20]), PromptPair(p, [20, 21, 22, 23])
    alone = model.bridge.sequence_nll([short], None).data[0]
    padded = model.bridge.sequence_nll([short, long], None).data[0]
    assert alone == pytest.approx(padded, abs=1e-5)


def test_predict_mc_ties_and_order():
    assert predict_mc([0.5, 0.5, 0.1]) == 0
    assert predict_mc([-3.0, -3.0]) == 0
    assert predict_mc([-3.0, -1.0, -1.0]) == 1
    with pytest.raises(RejectedInput):
        predict_mc([1.0])


def test_greedy_decode_stops_at_eos():
    model = f64_model()
    v = model.vocab
    # make EOS the argmax everywhere by biasing the final norm toward its embedding
    model.store["lm.ln_f.gain"].data[...] = 0.0
    model.store["lm.ln_f.bias"].data[...] = model.store["lm.tok"].data[v.eos]
    out = model.bridge.generate_greedy(mc_prompt(v, questions()[0]), None, 5)
    assert out == [v.eos]
    with pytest.raises(RejectedInput):
        model.bridge.generate_greedy([v.placeholder], None, 0)
