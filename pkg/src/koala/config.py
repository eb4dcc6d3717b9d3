"""Run configuration: typed sections parsed from ``key = value`` files.

Keys carry a section prefix (``model.``, ``train.``, ``data.``, ``eval.``).
Blank lines and ``#`` comments are ignored. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

AGGREGATIONS = ("koala", "base", "average", "concat", "memory")
MODES = ("full", "base_only", "no_visual")


@dataclass
class AblationFlags:
    keep_zkey_output: bool = False
    condition_on_zkey: bool = True
    temporal_concept_queries: bool = True
    enable_cv: bool = True
    enable_cs: bool = True


@dataclass
class ModelConfig:
    n_queries: int = 8            # N
    width: int = 32               # D
    lm_width: int = 48            # D^f
    key_frames: int = 8           # T_key
    segments: int = 4             # S
    segment_frames: int = 8       # T_seg
    qformer_layers: int = 2       # L
    heads: int = 4
    ff_mult: int = 2
    patches: int = 4              # P
    input_width: int = 32         # D_in
    max_frames: int = 8           # T_max, temporal position table length
    max_segments: int = 0         # S_max; 0 means "same as segments"
    vocab: int = 64
    n_actions: int = 4            # A; action 0 is background
    frame_noise: float = 0.05     # sigma_f
    lm_layers: int = 2
    lm_heads: int = 4
    lm_max_text: int = 40
    phi_inter_init: str = "copy"  # copy | identity
    aggregation: str = "koala"
    memory_short: int = 2         # C_s, segments
    memory_long: int = 0          # C_l, tokens; 0 means N
    flags: AblationFlags = field(default_factory=AblationFlags)

    @property
    def s_max(self):
        return self.max_segments or self.segments

    @property
    def c_long(self):
        return self.memory_long or self.n_queries


@dataclass
class TrainConfig:
    steps: int = 2000
    epochs: int = 0               # >0 overrides steps with epochs * ceil(n / batch)
    lr: float = 3e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.02
    batch_size: int = 16
    n_samples: int = 0            # >0 restricts finetuning to the first n train videos
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 32
    base_checkpoint: str = ""     # directory written by pretrain-base
    seed: int = 0


@dataclass
class DataConfig:
    dir: str = ""
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    n_twin_pairs: int = 64
    video_length: int = 256
    dominance: float = 0.75
    clip_background: float = 0.25
    label_salt: str = "koala"
    filter_tau: float = 0.26
    filter_frames: int = 128
    seed: int = 0


@dataclass
class EvalConfig:
    mode: str = "full"
    length_normalize: bool = False
    items: str = ""               # JSONL items file; empty means the corpus test + twin items
    checkpoint: str = ""
    sample: str = ""              # video id for attention export; empty means first test video
    max_new_tokens: int = 16
    gradcheck_tol: float = 1e-4
    gradcheck_coords: int = 0     # >0 samples this many coordinates per parameter
    variants: str = "base,base+cs,base+cs+cv,average,concat,memory"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self):
        m = self.model
        for name in ("n_queries", "width", "lm_width", "key_frames", "segments", "segment_frames",
                     "heads", "patches", "input_width", "max_frames", "vocab", "n_actions",
                     "lm_layers", "lm_heads", "lm_max_text", "ff_mult"):
            if getattr(m, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if m.qformer_layers < 0:
            raise ConfigError("model.qformer_layers must be >= 0")
        if m.width % m.heads:
            raise ConfigError("model.width must be divisible by model.heads")
        if m.lm_width % m.lm_heads:
            raise ConfigError("model.lm_width must be divisible by model.lm_heads")
        if m.input_width != m.width:
            raise ConfigError("model.input_width must equal model.width: the frozen QFormer "
                              "reads both frame features and segment tokens")
        if m.max_frames < max(m.key_frames, m.segment_frames):
            raise ConfigError("model.max_frames must cover key_frames and segment_frames")
        if m.s_max < m.segments:
            raise ConfigError("model.max_segments must be >= model.segments")
        if m.n_actions < 2:
            raise ConfigError("model.n_actions must be >= 2 (background plus one action)")
        if m.aggregation not in AGGREGATIONS:
            raise ConfigError(f"model.aggregation must be one of {AGGREGATIONS}")
        if m.phi_inter_init not in ("copy", "identity"):
            raise ConfigError("model.phi_inter_init must be copy or identity")
        if m.phi_inter_init == "identity" and m.width != m.lm_width:
            raise ConfigError("identity phi_inter init needs width == lm_width")
        if m.memory_short < 1 or m.memory_long < 0:
            raise ConfigError("memory capacities must be >= 1")
        if not 0.0 <= m.frame_noise:
            raise ConfigError("model.frame_noise must be >= 0")
        t = self.train
        if t.steps < 1 or t.batch_size < 1 or t.lr < 0 or not 0 <= t.warmup_frac < 1:
            raise ConfigError("invalid train settings")
        d = self.data
        if d.video_length < max(m.segments * m.segment_frames, m.key_frames):
            raise ConfigError("data.video_length must be >= segments * segment_frames")
        if d.video_length % m.segments:
            raise ConfigError("data.video_length must be a multiple of model.segments")
        if not 0.0 < d.dominance <= 1.0 or not 0.0 <= d.clip_background < 1.0:
            raise ConfigError("data.dominance must be in (0, 1], clip_background in [0, 1)")
        if self.eval.mode not in MODES:
            raise ConfigError(f"eval.mode must be one of {MODES}")
        return self

    def with_overrides(self, **kv):
        """Return a copy with dotted overrides, e.g. ``{"model.n_queries": 4}``."""
        lines = [f"{k} = {v}" for k, v in kv.items()]
        return apply_lines(copy_config(self), lines)

    def to_text(self):
        lines = [f"seed = {self.seed}"]
        for section in ("model", "train", "data", "eval"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                if f.name == "flags":
                    for g in dataclasses.fields(obj.flags):
                        lines.append(f"{section}.{g.name} = {_fmt(getattr(obj.flags, g.name))}")
                else:
                    lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(raw, typ, key):
    typ = typ if isinstance(typ, type) else {"int": int, "float": float, "bool": bool, "str": str}[typ]
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from exc


def _assign(cfg, key, raw):
    if key == "seed":
        cfg.seed = _convert(raw, int, key)
        return
    section, _, name = key.partition(".")
    if section not in ("model", "train", "data", "eval") or not name:
        raise ConfigError(f"unknown config key {key!r}")
    obj = getattr(cfg, section)
    if section == "model" and name in {f.name for f in dataclasses.fields(AblationFlags)}:
        obj = obj.flags
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields or name == "flags":
        raise ConfigError(f"unknown config key {key!r}")
    setattr(obj, name, _convert(raw, fields[name].type, key))


def apply_lines(cfg, lines):
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, raw = line.partition("=")
        _assign(cfg, key.strip(), raw.strip())
    return cfg.validate()


def copy_config(cfg):
    return parse_config(cfg.to_text())


def parse_config(text):
    return apply_lines(RunConfig(), text.splitlines())


def load_config(path):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())


def minimal_config(**overrides):
    """Smallest config exercising every mechanism (used by gradient checks)."""
    base = {
        "model.n_queries": 4, "model.width": 8, "model.input_width": 8, "model.lm_width": 8,
        "model.segments": 2, "model.key_frames": 2, "model.segment_frames": 2,
        "model.max_frames": 2, "model.vocab": 16, "model.heads": 2, "model.lm_heads": 2,
        "model.patches": 2, "model.qformer_layers": 1, "model.lm_layers": 1,
        "model.lm_max_text": 16, "model.n_actions": 3, "data.video_length": 8,
    }
    base.update(overrides)
    return RunConfig().with_overrides(**base)


def paper_scale_config():
    """Widths of the published model. Encodable, not runnable on a desk CPU."""
    return RunConfig().with_overrides(**{
        "model.n_queries": 32, "model.width": 768, "model.input_width": 768,
        "model.lm_width": 4096, "model.heads": 12, "model.lm_heads": 32,
        "model.max_frames": 32, "model.key_frames": 32, "data.video_length": 512,
        "train.lr": 1e-5, "train.epochs": 2,
    })
