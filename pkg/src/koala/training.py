"""Base pretraining and key-frame-conditioned finetuning loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .datapipe import (make_sample, render_instruction, render_mc_answer, short_clip,
                       similarity_filter)
from .errors import ContractViolation, NonFiniteError
from .model import (FROZEN_GROUPS, KOALA_PARAMS, KoalaModel, add_koala_params, group_names,
                    init_base_params)
from .numerics import OptimState, Tensor, adamw_step
from .vocab import Vocab, questions

log = logging.getLogger(__name__)


@dataclass
class Batch:
    key_feats: Tensor
    seg_feats: Tensor | None
    pairs: list
    labels: list
    video_ids: list
    z_key: np.ndarray | None = None


@dataclass
class TrainResult:
    store: object
    rows: list = field(default_factory=list)   # (step, loss, lr)
    metrics: dict = field(default_factory=dict)


def batch_from_samples(model, samples, z_key_cache=None):
    key = np.stack([s.key_actions for s in samples]), np.stack([s.key_seeds for s in samples])
    key_feats = model.features(*key)
    seg_feats = None
    if samples[0].seg_actions is not None:
        seg_feats = model.features(np.stack([s.seg_actions for s in samples]),
                                   np.stack([s.seg_seeds for s in samples]))
    z_key = None
    if z_key_cache is not None:
        z_key = np.stack([z_key_cache[s.video_id] for s in samples])
    return Batch(key_feats, seg_feats, [s.pair for s in samples], [s.label for s in samples],
                 [s.video_id for s in samples], z_key)


def batch_visual(model, batch, mode):
    z_key = Tensor(batch.z_key, dtype=batch.z_key.dtype) if batch.z_key is not None else None
    zk, zi = model.encode(batch.key_feats, batch.seg_feats, z_key=z_key)
    return model.visual(zk, zi, mode)


def batch_loss(model, batch, mode="full"):
    """Mean over the batch of each sample's summed response cross-entropy."""
    visual = batch_visual(model, batch, mode)
    nll = model.bridge.sequence_nll(batch.pairs, visual)
    return nx.mean(nll)


def _check_finite(loss, step):
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss", f"diverged at step {step}")


def _train_loop(store, loss_fn, steps, lr, warmup_frac, weight_decay, log_every=0):
    opt = OptimState(lr=lr, total_steps=steps, warmup_frac=warmup_frac, weight_decay=weight_decay)
    rows = []
    for step in range(steps):
        store.zero_grad()
        loss = loss_fn(step)
        _check_finite(loss, step)
        loss.backward()
        used = adamw_step(opt, store, store.grads())
        rows.append((step, float(loss.data), used))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step, float(loss.data), used)
    return rows


# base pretraining

def clip_samples(cfg, vocab, rng, n):
    """Short single-window clips rendered half as instructions, half as MC answers."""
    from .datapipe import VideoSample
    qs = questions()
    out = []
    for i in range(n):
        cid, acts, seeds, label, _ = short_clip(cfg, rng, f"clip{i}")
        if rng.random() < 0.5:
            pair = render_instruction(label, vocab, rng=rng)
        else:
            pair = render_mc_answer(label, vocab, qs[int(rng.integers(len(qs)))])
        idx = list(range(cfg.model.key_frames))
        out.append(VideoSample(cid, idx, [], acts, seeds, None, None, pair, label))
    return out


def pretrain_base(cfg, seed=None, steps=None, log_every=0):
    """Stage-0: train the query transformer, Q_video, phi_key and the LM on short clips, then freeze.

    Visual layouts are mixed so the frozen LM later accepts both the
    key-frames-only block and the two-block (key + inter) layout.
    """
    seed = cfg.seed if seed is None else seed
    steps = cfg.train.pretrain_steps if steps is None else steps
    store = init_base_params(cfg, seed)
    model = KoalaModel(store, cfg)
    vocab = model.vocab
    rng = np.random.default_rng([seed, 0x57A6E0])
    B = cfg.train.pretrain_batch

    def loss_fn(step):
        samples = clip_samples(cfg, vocab, rng, B)
        batch = batch_from_samples(model, samples)
        z_key = model.key_frames_tokenize(batch.key_feats)
        r = rng.random()
        if r < 0.1:
            visual = None
        elif r < 0.55:
            visual = model.bridge.project_key(z_key)
        else:
            pk = model.bridge.project_key(z_key)
            visual = nx.concat([pk, pk], axis=-2)
        return nx.mean(model.bridge.sequence_nll(batch.pairs, visual))

    t0 = time.time()
    rows = _train_loop(store, loss_fn, steps, cfg.train.pretrain_lr, cfg.train.warmup_frac,
                       cfg.train.weight_decay, log_every)
    store.freeze_all()
    from .evaluation import clip_accuracy
    metrics = {"train_seconds": time.time() - t0, "steps": steps,
               "final_loss": rows[-1][1] if rows else float("nan"),
               "clip_mc_accuracy": clip_accuracy(KoalaModel(store, cfg), seed=seed + 1)}
    return TrainResult(store, rows, metrics)


# finetuning

def frozen_checksums(store):
    return store.checksums(store.frozen_names())


def prepare_koala_store(cfg, base_store):
    store = nx.ParamStore()
    store.update(base_store, frozen=True)
    add_koala_params(store, cfg)
    return store


def training_samples(cfg, records, vocab, seed):
    """Filter by relevance, optionally truncate, and fix one template per video."""
    d = cfg.data
    kept = [r for r in records if r.relevance_scores is None
            or similarity_filter(r, d.filter_tau, d.filter_frames)]
    if cfg.train.n_samples:
        kept = kept[:cfg.train.n_samples]
    rng = np.random.default_rng([seed, 0x7E4A])
    return [make_sample(r, cfg, vocab, rng=rng) for r in kept]


def key_cache(model, samples, chunk=64):
    cache = {}
    with nx.no_grad():
        for i in range(0, len(samples), chunk):
            part = samples[i:i + chunk]
            feats = model.features(np.stack([s.key_actions for s in part]),
                                   np.stack([s.key_seeds for s in part]))
            z = model.key_frames_tokenize(feats).values.data
            for s, zz in zip(part, z):
                cache[s.video_id] = zz
    return cache


def finetune(cfg, base_store, records, seed=None, steps=None, log_every=0, store=None):
    """Optimise exactly the Koala parameters on instruction-rendered videos.

    Returns a TrainResult whose rows are (step, loss, lr). Raises
    ContractViolation if any frozen parameter changed.
    """
    seed = cfg.seed if seed is None else seed
    steps = cfg.train.steps if steps is None else steps
    store = store if store is not None else prepare_koala_store(cfg, base_store)
    model = KoalaModel(store, cfg)
    samples = training_samples(cfg, records, model.vocab, seed)
    if not samples:
        raise ContractViolation("no training samples survive filtering")
    if cfg.train.epochs:
        steps = cfg.train.epochs * int(np.ceil(len(samples) / cfg.train.batch_size))
    before = frozen_checksums(store)
    cache = key_cache(model, samples)
    B = min(cfg.train.batch_size, len(samples))
    rng = np.random.default_rng([seed, 0xF17E])
    order, pos = rng.permutation(len(samples)), 0

    def loss_fn(step):
        nonlocal order, pos
        if pos + B > len(order):
            order, pos = rng.permutation(len(samples)), 0
        idx = order[pos:pos + B]
        pos += B
        batch = batch_from_samples(model, [samples[i] for i in idx], cache)
        return batch_loss(model, batch, "full")

    t0 = time.time()
    rows = []
    if cfg.model.aggregation != "base":
        rows = _train_loop(store, loss_fn, steps, cfg.train.lr, cfg.train.warmup_frac,
                           cfg.train.weight_decay, log_every)
    after = frozen_checksums(store)
    drift = [n for n in before if before[n] != after[n]]
    if drift:
        raise ContractViolation(f"frozen parameters changed during finetuning: {drift[:5]}")
    metrics = {"train_seconds": time.time() - t0, "steps": len(rows), "n_samples": len(samples),
               "first_loss": rows[0][1] if rows else float("nan"),
               "final_loss": rows[-1][1] if rows else float("nan")}
    return TrainResult(store, rows, metrics)


def learnable_groups(store):
    from .model import LEARNABLE_GROUPS
    return {g for g, names in LEARNABLE_GROUPS.items()
            if any(n in store and not store.is_frozen(n) for n in names)}


def frozen_group_checksums(store):
    return {g: {n: store.checksum(n) for n in group_names(store, spec)}
            for g, spec in FROZEN_GROUPS.items()}


# gradient check on the full objective

def koala_gradcheck(cfg, seed=0, n_videos=2, max_coords=None, h=1e-5):
    """Central-difference check of the finetuning loss over every learnable Koala parameter.

    Runs in 64-bit mode. Learnable parameters are randomised away from their
    zero init (at w = 0 the query gradients vanish identically).
    """
    from .datapipe import all_tuples, make_video
    from .vocab import SPECIALS, PromptPair
    with nx.precision("test"):
        store = init_base_params(cfg, seed)
        store.freeze_all()
        add_koala_params(store, cfg)
        rng = np.random.default_rng([seed, 0x6C4E])
        for name, t in store.learnable_items():
            t.data[...] = rng.normal(0.0, 0.5, size=t.data.shape)
        model = KoalaModel(store, cfg)
        v = model.vocab
        tuples = all_tuples(cfg.model.n_actions, cfg.model.segments)
        samples = []
        for i in range(n_videos):
            rec = make_video(f"gc{i}", tuples[int(rng.integers(len(tuples)))], cfg, rng)
            words = [int(x) for x in rng.integers(len(SPECIALS), len(v), size=3)]
            pair = PromptPair([v.bos, v.placeholder, words[0]], words[1:] + [v.eos])
            samples.append(make_sample(rec, cfg, v, pair=pair))
        batch = batch_from_samples(model, samples)
        return nx.grad_check(lambda: batch_loss(model, batch), store, h=h, max_coords=max_coords,
                             seed=seed)
