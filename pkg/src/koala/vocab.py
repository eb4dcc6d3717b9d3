"""Closed word-level vocabulary, instruction templates and task labels."""
from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import MalformedPrompt, RejectedInput

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
VID_OPEN, VID_CLOSE, IMAGE_HERE = "<video>", "</video>", "<imagehere>"
INST_OPEN, INST_CLOSE = "[inst]", "[/inst]"
SPECIALS = (PAD, BOS, EOS, VID_OPEN, VID_CLOSE, IMAGE_HERE, INST_OPEN, INST_CLOSE)

VISUAL = "[INST] <ImageHere>"

# (prompt, response) pairs; {task label} is the slot
TEMPLATES = (
    ("<VISUAL> What is the most likely objective in the video? [/INST]",
     "The most likely objective in the video is to {task label}."),
    ("<VISUAL> What is the most likely goal in the video? [/INST]",
     "The most likely goal is to {task label}."),
    ("<VISUAL> What is the person trying to do in the video? [/INST]",
     "The person is trying to {task label}."),
    ("<VISUAL> What is happening in the video? [/INST]",
     "This video demonstrates the steps to {task label}."),
    ("<VISUAL> Describe the most likely objective in the video. [/INST]",
     "The most likely objective in the video is to {task label}."),
    ("<VISUAL> Describe the most likely goal in the video. [/INST]",
     "The most likely goal is to {task label}."),
    ("<VISUAL> Describe what the person is trying to do in the video. [/INST]",
     "The person is trying to {task label}."),
    ("<VISUAL> Describe what is happening in the video. [/INST]",
     "This video demonstrates the steps to {task label}."),
)

MC_TEMPLATE = "<VISUAL> Given the question {question}, the answer is"

VERBS = ("make", "fix", "clean", "pack")
NOUNS = ("sandwich", "bike", "shelf", "lamp")
LABELS = tuple(f"{v} a {n}" for v in VERBS for n in NOUNS)

_TOKEN = re.compile(r"\[/?inst\]|</?[a-z]+>|[a-z0-9']+|[?.,]")


def split_words(text):
    text = text.replace("<VISUAL>", VISUAL).lower()
    words = _TOKEN.findall(text)
    if "".join(words) != "".join(text.split()):
        raise RejectedInput(f"untokenizable characters in {text!r}")
    return words


def questions():
    """Question strings (template prompts without the visual prefix and [/INST])."""
    return tuple(p.replace("<VISUAL> ", "").replace(" [/INST]", "") for p, _ in TEMPLATES)


def _corpus_words():
    words = []
    texts = [p for p, _ in TEMPLATES] + [r.replace("{task label}", "") for _, r in TEMPLATES]
    texts += [MC_TEMPLATE.replace("{question}", ""), *LABELS]
    for t in texts:
        for w in split_words(t):
            if w not in SPECIALS and w not in words:
                words.append(w)
    return words


class Vocab:
    def __init__(self, words):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise RejectedInput("duplicate vocabulary entries")
        for s in SPECIALS:
            if s not in self.index:
                raise RejectedInput(f"vocabulary lacks special token {s}")
        self.pad, self.bos, self.eos = self.index[PAD], self.index[BOS], self.index[EOS]
        self.vid_open, self.vid_close = self.index[VID_OPEN], self.index[VID_CLOSE]
        self.placeholder = self.index[IMAGE_HERE]

    def __len__(self):
        return len(self.words)

    @classmethod
    def for_size(cls, size):
        """Full template vocabulary padded to ``size``; generic tokens if ``size`` is too small."""
        words = list(SPECIALS) + _corpus_words()
        if size < len(words):
            if size < len(SPECIALS) + 1:
                raise RejectedInput(f"vocab size {size} cannot hold the special tokens")
            words = list(SPECIALS) + [f"w{i}" for i in range(size - len(SPECIALS))]
        else:
            words += [f"<unused{i}>" for i in range(size - len(words))]
        return cls(words)

    @property
    def has_templates(self):
        return "likely" in self.index

    def encode(self, text):
        ids = []
        for w in split_words(text):
            if w not in self.index:
                raise RejectedInput(f"out-of-vocabulary word {w!r}")
            ids.append(self.index[w])
        return ids

    def decode(self, ids):
        out = []
        for i in ids:
            w = self.words[i]
            if w in (",", ".", "?") and out:
                out[-1] += w
            else:
                out.append(w)
        return " ".join(out)


@dataclass
class PromptPair:
    prompt: list   # token ids, includes the placeholder exactly once
    response: list  # token ids, non-empty

    def validate(self, vocab):
        n = sum(1 for t in self.prompt if t == vocab.placeholder)
        if n != 1:
            raise MalformedPrompt(f"prompt must contain the visual placeholder exactly once (found {n})")
        if not self.response:
            raise RejectedInput("empty response")
        return self

    def placeholder_index(self, vocab):
        return self.prompt.index(vocab.placeholder)


def render_template(index, label):
    if not 0 <= index < len(TEMPLATES):
        raise RejectedInput(f"template index {index} outside [0, {len(TEMPLATES)})")
    if label not in LABELS:
        raise RejectedInput(f"unknown task label {label!r}")
    prompt, response = TEMPLATES[index]
    return prompt, response.replace("{task label}", label)


def encode_pair(vocab, prompt_text, response_text, eos=True):
    prompt = [vocab.bos] + vocab.encode(prompt_text)
    response = vocab.encode(response_text) + ([vocab.eos] if eos else [])
    return PromptPair(prompt, response).validate(vocab)


def mc_prompt(vocab, question):
    return [vocab.bos] + vocab.encode(MC_TEMPLATE.replace("{question}", question))
