"""Multiple-choice evaluation by option log-likelihood, plus decode checks."""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .datapipe import make_sample, short_clip
from .errors import RejectedInput
from .llm_bridge import predict_mc
from .numerics import Tensor
from .training import batch_from_samples, batch_visual
from .vocab import LABELS, PromptPair, questions


def _visuals(model, samples, mode):
    if mode == "no_visual":
        return None
    with nx.no_grad():
        batch = batch_from_samples(model, samples)
        v = batch_visual(model, batch, mode)
    return None if v is None else v.data


def score_items(model, items, records, mode="full", length_normalize=False, chunk=32):
    """Score every option of every item; returns a list of (item, scores) in input order."""
    out = []
    for start in range(0, len(items), chunk):
        part = items[start:start + chunk]
        with_video = [it for it in part if it.get("video_id") and mode != "no_visual"]
        visual = {}
        if with_video:
            samples = []
            for it in with_video:
                if it["video_id"] not in records:
                    raise RejectedInput(f"item {it['id']}: unknown video {it['video_id']}")
                samples.append(make_sample(records[it["video_id"]], model.cfg, model.vocab,
                                           pair=PromptPair([model.vocab.placeholder], [0])))
            vis = _visuals(model, samples, mode)
            visual = {it["id"]: vis[i] for i, it in enumerate(with_video)}
        pairs, rows, counts = [], [], []
        for it in part:
            if len(it["options"]) < 2:
                raise RejectedInput(f"item {it['id']}: needs >= 2 options")
            p = model.bridge.option_pairs(it["question"], it["options"])
            pairs += p
            counts.append(len(p))
            v = visual.get(it["id"])
            rows += [v] * len(p)
        groups = {}
        for i, v in enumerate(rows):
            groups.setdefault(None if v is None else v.shape, []).append(i)
        nll = np.zeros(len(pairs))
        for key, idx in groups.items():
            vis = None if key is None else Tensor(np.stack([rows[i] for i in idx]))
            with nx.no_grad():
                nll[idx] = model.bridge.sequence_nll([pairs[i] for i in idx], vis).data
        scores = -nll
        if length_normalize:
            scores = scores / np.array([len(p.response) for p in pairs], dtype=np.float64)
        pos = 0
        for it, c in zip(part, counts):
            out.append((it, scores[pos:pos + c]))
            pos += c
    return out


def evaluate_items(model, items, records, mode="full", length_normalize=False):
    """Predictions plus accuracy (None when any item lacks an answer)."""
    results = []
    correct, answered = 0, 0
    for it, scores in score_items(model, items, records, mode, length_normalize):
        pred = predict_mc(scores)
        results.append({"id": it["id"], "pred": pred, "scores": [float(s) for s in scores]})
        if it.get("answer") is not None:
            answered += 1
            correct += int(pred == it["answer"])
    acc = correct / answered if answered == len(items) and items else None
    return results, acc


def twin_accuracy(model, corpus, mode="full"):
    """Two-way discrimination between twin labels, averaged over both videos of each pair."""
    _, acc = evaluate_items(model, corpus.items["twins"], corpus.records(), mode)
    return acc


def clip_accuracy(model, seed=1, n=200, n_options=4, mode="base_only"):
    """Held-out short-clip MC accuracy for a base model."""
    from .datapipe import VideoSample
    cfg = model.cfg
    rng = np.random.default_rng([seed, 0xC11F])
    qs = questions()
    samples, items = [], []
    for i in range(n):
        cid, acts, seeds, label, _ = short_clip(cfg, rng, f"heldout{i}")
        samples.append(VideoSample(cid, list(range(cfg.model.key_frames)), [], acts, seeds,
                                   None, None, None, label))
        others = [l for l in LABELS if l != label]
        opts = [label] + [others[j] for j in rng.choice(len(others), n_options - 1, replace=False)]
        perm = rng.permutation(n_options)
        opts = [opts[j] for j in perm]
        items.append((qs[int(rng.integers(len(qs)))], opts, opts.index(label)))
    correct = 0
    for start in range(0, n, 50):
        part = samples[start:start + 50]
        with nx.no_grad():
            batch = batch_from_samples(model, part)
            z_key = model.key_frames_tokenize(batch.key_feats)
            vis = model.bridge.visual_rows(z_key, None, mode)
            vis = None if vis is None else vis.data
        for j, s in enumerate(part):
            q, opts, ans = items[start + j]
            sc = model.bridge.score_options(q, opts, None if vis is None else vis[j])
            correct += int(predict_mc(sc) == ans)
    return correct / n


def greedy_matches(model, samples, max_len=None):
    """Number of samples whose greedy decode reproduces the response exactly."""
    max_len = max_len or model.cfg.eval.max_new_tokens
    hits = 0
    decoded = []
    with nx.no_grad():
        batch = batch_from_samples(model, samples)
        vis = batch_visual(model, batch, "full").data
    for s, v in zip(samples, vis):
        out = model.bridge.generate_greedy(s.pair.prompt, v, max(max_len, len(s.pair.response)))
        decoded.append(out)
        hits += int(out == list(s.pair.response))
    return hits, decoded
