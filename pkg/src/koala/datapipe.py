"""Frame sampling, instruction rendering, relevance filtering and the synthetic corpus.

Synthetic videos are sequences of action ids. Action 0 is background; a
video is split into S segments and segment i shows its dominant action
d_i on each frame with probability ``dominance`` (background otherwise).
The task label is a hash of the ordered tuple (d_1, ..., d_S), so telling
labels apart needs cross-segment order.
"""
from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RejectedInput
from .frame_encoder import Frame
from .vocab import LABELS, TEMPLATES, encode_pair, questions, render_template

PAPER_TAU = 0.26
PAPER_FILTER_FRAMES = 128


@dataclass
class VideoRecord:
    video_id: str
    length: int
    actions: list
    noise_seeds: list
    task_label: str
    relevance_scores: list | None = None
    dominant: tuple = ()

    def frame(self, i):
        return Frame(self.video_id, int(i), int(self.actions[i]), int(self.noise_seeds[i]))

    def to_json(self):
        d = {"video_id": self.video_id, "length": self.length,
             "frames": {"action_id": list(map(int, self.actions)),
                        "noise_seed": list(map(int, self.noise_seeds))},
             "task_label": self.task_label, "dominant": list(self.dominant)}
        if self.relevance_scores is not None:
            d["relevance_scores"] = [round(float(s), 6) for s in self.relevance_scores]
        return d

    @classmethod
    def from_json(cls, d):
        try:
            frames = d["frames"]
            rec = cls(d["video_id"], int(d["length"]), list(frames["action_id"]),
                      list(frames["noise_seed"]), d["task_label"],
                      d.get("relevance_scores"), tuple(d.get("dominant", ())))
        except (KeyError, TypeError) as exc:
            raise RejectedInput(f"malformed video record: {exc}") from exc
        if len(rec.actions) != rec.length or len(rec.noise_seeds) != rec.length:
            raise RejectedInput(f"{rec.video_id}: frame arrays disagree with length")
        if rec.task_label not in LABELS:
            raise RejectedInput(f"{rec.video_id}: unknown task label {rec.task_label!r}")
        return rec


@dataclass
class VideoSample:
    video_id: str
    key_frame_indices: list
    segment_indices: list          # S lists of T_seg indices
    key_actions: np.ndarray        # (T_key,)
    key_seeds: np.ndarray
    seg_actions: np.ndarray | None  # (S, T_seg)
    seg_seeds: np.ndarray | None
    pair: object                   # PromptPair
    label: str

    def key_frames(self):
        return [Frame(self.video_id, int(i), int(a), int(s)) for i, a, s in
                zip(self.key_frame_indices, self.key_actions, self.key_seeds)]

    def segments(self):
        return [[Frame(self.video_id, int(i), int(a), int(s)) for i, a, s in zip(idx, acts, seeds)]
                for idx, acts, seeds in zip(self.segment_indices, self.seg_actions, self.seg_seeds)]


# sampling

def sample_key_frames(length, t_key):
    """k -> floor(k * length / t_key): uniform coarse sampling over the whole video."""
    if t_key < 1 or t_key > length:
        raise RejectedInput(f"cannot sample {t_key} key frames from {length} frames")
    return [(k * length) // t_key for k in range(t_key)]


def segment_spans(length, s):
    bounds = [(i * length) // s for i in range(s + 1)]
    return list(zip(bounds[:-1], bounds[1:]))


def sample_segments(length, s, t_seg):
    """Split into ``s`` contiguous equal spans and sample ``t_seg`` frames uniformly in each."""
    if s < 1 or t_seg < 1 or s * t_seg > length:
        raise RejectedInput(f"cannot sample {s} segments of {t_seg} frames from {length} frames")
    return [[start + (k * (end - start)) // t_seg for k in range(t_seg)]
            for start, end in segment_spans(length, s)]


def uniform_indices(length, n):
    if n >= length:
        return list(range(length))
    return sample_key_frames(length, n)


def similarity_filter(record, tau=PAPER_TAU, n_sampled=PAPER_FILTER_FRAMES):
    """Keep a video iff its best-scoring uniformly sampled frame reaches ``tau``."""
    scores = record.relevance_scores
    if scores is None or len(scores) != record.length:
        raise RejectedInput(f"{record.video_id}: relevance scores missing")
    idx = uniform_indices(record.length, n_sampled)
    return bool(np.max(np.asarray(scores, dtype=np.float64)[idx]) >= tau)


# instructions

def render_instruction(label, vocab, template_index=None, rng=None):
    """Fill one instruction template with a task label; random template when no index given."""
    if template_index is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        template_index = int(rng.integers(len(TEMPLATES)))
    prompt, response = render_template(template_index, label)
    return encode_pair(vocab, prompt, response)


def render_mc_answer(label, vocab, question):
    """Training pair in the multiple-choice format: question prompt -> label."""
    from .vocab import mc_prompt, PromptPair
    return PromptPair(mc_prompt(vocab, question), vocab.encode(label + " .") + [vocab.eos])


# labels and synthetic corpus

def label_of(dominant, salt="koala"):
    h = hashlib.blake2b(f"{salt}|{','.join(map(str, dominant))}".encode(), digest_size=8)
    return LABELS[int.from_bytes(h.digest(), "little") % len(LABELS)]


def all_tuples(n_actions, s):
    return list(itertools.product(range(1, n_actions), repeat=s))


def twin_candidates(n_actions, s, salt):
    """(tuple, permuted tuple) pairs sharing a multiset but not a label."""
    out = []
    for t in all_tuples(n_actions, s):
        lt = label_of(t, salt)
        for p in sorted(set(itertools.permutations(t))):
            if p != t and label_of(p, salt) != lt:
                out.append((t, p))
    return out


def _frame_seeds(rng, n):
    return rng.integers(0, 2 ** 40, size=n).tolist()


def make_video(video_id, dominant, cfg, rng, relevant=True):
    d = cfg.data
    length, s = d.video_length, len(dominant)
    actions = np.zeros(length, dtype=np.int64)
    for (start, end), a in zip(segment_spans(length, s), dominant):
        show = rng.random(end - start) < d.dominance
        actions[start:end] = np.where(show, a, 0)
    if relevant:
        label = label_of(dominant, d.label_salt)
        scores = np.where(actions > 0, rng.uniform(0.2, 0.4, length), rng.uniform(0.0, 0.2, length))
    else:
        label = LABELS[int(rng.integers(len(LABELS)))]
        scores = rng.uniform(0.0, 0.25, length)
    return VideoRecord(video_id, length, actions.tolist(), _frame_seeds(rng, length), label,
                       scores.tolist(), tuple(int(a) for a in dominant))


def permuted_twin(record, order, video_id):
    """Same frames with segment spans reordered by ``order`` (relabelled)."""
    s = len(order)
    spans = segment_spans(record.length, s)
    widths = {e - st for st, e in spans}
    if len(widths) != 1:
        raise RejectedInput("twins need equal-width segment spans")
    acts, seeds, scores = [], [], []
    for i in order:
        st, e = spans[i]
        acts += record.actions[st:e]
        seeds += record.noise_seeds[st:e]
        if record.relevance_scores is not None:
            scores += record.relevance_scores[st:e]
    dominant = tuple(record.dominant[i] for i in order)
    return VideoRecord(video_id, record.length, acts, seeds, "", scores or None, dominant)


@dataclass
class Corpus:
    train: list
    val: list
    test: list
    twins: list                 # [(record_a, record_b), ...]
    items: dict = field(default_factory=dict)   # split -> list of MC item dicts

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for split in ("train", "val", "test"):
            write_jsonl(d / f"{split}.jsonl", [r.to_json() for r in getattr(self, split)])
        write_jsonl(d / "twins.jsonl", [r.to_json() for pair in self.twins for r in pair])
        for split, items in self.items.items():
            write_jsonl(d / f"items_{split}.jsonl", items)
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        if not d.exists():
            raise RejectedInput(f"corpus directory not found: {d}")
        splits = {s: [VideoRecord.from_json(x) for x in read_jsonl(d / f"{s}.jsonl")]
                  for s in ("train", "val", "test", "twins")}
        tw = splits.pop("twins")
        items = {p.stem[len("items_"):]: read_jsonl(p) for p in sorted(d.glob("items_*.jsonl"))}
        return cls(splits["train"], splits["val"], splits["test"],
                   list(zip(tw[0::2], tw[1::2])), items)

    def records(self):
        out = {r.video_id: r for r in self.train + self.val + self.test}
        for a, b in self.twins:
            out[a.video_id], out[b.video_id] = a, b
        return out


def write_jsonl(path, rows):
    with open(path, "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path):
    p = Path(path)
    if not p.exists():
        raise RejectedInput(f"file not found: {p}")
    rows = []
    for n, line in enumerate(p.read_text().splitlines(), 1):
        if line.strip():
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise RejectedInput(f"{p}:{n}: invalid JSON") from exc
    return rows


def mc_item(record, rng, n_options=4):
    distractors = [l for l in LABELS if l != record.task_label]
    picks = list(rng.choice(len(distractors), size=n_options - 1, replace=False))
    options = [record.task_label] + [distractors[i] for i in picks]
    order = rng.permutation(n_options)
    options = [options[i] for i in order]
    qs = questions()
    return {"id": record.video_id, "question": qs[int(rng.integers(len(qs)))],
            "options": options, "answer": options.index(record.task_label),
            "video_id": record.video_id}


def twin_items(twins, question=None):
    q = question or questions()[1]
    items = []
    for a, b in twins:
        opts = [a.task_label, b.task_label]
        items.append({"id": a.video_id, "question": q, "options": opts, "answer": 0,
                      "video_id": a.video_id})
        items.append({"id": b.video_id, "question": q, "options": opts, "answer": 1,
                      "video_id": b.video_id})
    return items


def generate_synthetic_corpus(cfg, seed):
    """Deterministic train/val/test/twin splits plus MC items for a config and seed."""
    d, s = cfg.data, cfg.model.segments
    rng = np.random.default_rng([seed, 0x0C0A1A])
    tuples = all_tuples(cfg.model.n_actions, s)
    splits = {}
    for split, n, irrelevant in (("train", d.n_train, 0.1), ("val", d.n_val, 0.0), ("test", d.n_test, 0.0)):
        recs = []
        for i in range(n):
            dom = tuples[int(rng.integers(len(tuples)))]
            recs.append(make_video(f"{split}{i:05d}", dom, cfg, rng, relevant=rng.random() >= irrelevant))
        splits[split] = recs
    cands = twin_candidates(cfg.model.n_actions, s, d.label_salt)
    twins = []
    if cands and d.n_twin_pairs:
        picks = rng.choice(len(cands), size=d.n_twin_pairs, replace=len(cands) < d.n_twin_pairs)
        for j, c in enumerate(picks):
            t, p = cands[int(c)]
            a = make_video(f"twin{j:04d}a", t, cfg, rng)
            order = _order_for(t, p, rng)
            b = permuted_twin(a, order, f"twin{j:04d}b")
            b.task_label = label_of(b.dominant, d.label_salt)
            twins.append((a, b))
    items = {split: [mc_item(r, rng) for r in splits[split]] for split in ("val", "test")}
    items["twins"] = twin_items(twins)
    return Corpus(splits["train"], splits["val"], splits["test"], twins, items)


def _order_for(t, p, rng):
    """A segment order mapping tuple t onto its permutation p."""
    remaining = list(range(len(t)))
    order = []
    for a in p:
        choices = [i for i in remaining if t[i] == a]
        pick = choices[int(rng.integers(len(choices)))]
        order.append(pick)
        remaining.remove(pick)
    return order


# samples

def make_sample(record, cfg, vocab, rng=None, template_index=None, pair=None):
    m = cfg.model
    if record.length < m.segments * m.segment_frames:
        raise RejectedInput(f"{record.video_id}: too short for {m.segments}x{m.segment_frames} frames")
    key_idx = sample_key_frames(record.length, m.key_frames)
    seg_idx = sample_segments(record.length, m.segments, m.segment_frames)
    acts = np.asarray(record.actions, dtype=np.int64)
    seeds = np.asarray(record.noise_seeds, dtype=np.int64)
    if pair is None:
        pair = render_instruction(record.task_label, vocab, template_index, rng)
    return VideoSample(record.video_id, key_idx, seg_idx, acts[key_idx], seeds[key_idx],
                       acts[np.asarray(seg_idx)], seeds[np.asarray(seg_idx)], pair, record.task_label)


def short_clip(cfg, rng, clip_id="clip"):
    """A single-window clip for base pretraining: S sub-actions over T_key frames.

    Each frame is background with probability ``clip_background``, but every
    sub-action keeps at least one visible frame, so the label is always
    recoverable from the clip.
    """
    m, d = cfg.model, cfg.data
    tuples = all_tuples(m.n_actions, m.segments)
    dom = tuples[int(rng.integers(len(tuples)))]
    per = m.key_frames // m.segments
    acts = np.repeat(np.asarray(dom), per)
    if len(acts) < m.key_frames:
        acts = np.concatenate([acts, np.full(m.key_frames - len(acts), dom[-1])])
    show = rng.random(m.key_frames) >= d.clip_background
    for i in range(m.segments):
        if not show[i * per:(i + 1) * per].any():
            show[i * per + int(rng.integers(per))] = True
    acts = np.where(show, acts, 0)
    seeds = rng.integers(0, 2 ** 40, size=m.key_frames)
    return clip_id, acts, seeds, label_of(dom, d.label_salt), dom
