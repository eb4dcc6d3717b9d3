"""AdamW with linear warmup followed by cosine decay."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation

NO_DECAY_SUFFIXES = (".b", ".bias", ".gain")
NO_DECAY_NAMES = ("koala.w",)


def decays(name):
    return not (name.endswith(NO_DECAY_SUFFIXES) or name in NO_DECAY_NAMES)


@dataclass
class OptimState:
    lr: float
    total_steps: int
    warmup_frac: float = 0.1
    schedule: str = "cosine"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.02
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def warmup_steps(self):
        return int(round(self.warmup_frac * self.total_steps))


def lr_at(state, step):
    """Learning rate used for update number ``step`` (0-based)."""
    w = state.warmup_steps
    if w > 0 and step < w:
        return state.lr * step / w
    if state.schedule == "constant":
        return state.lr
    span = max(1, state.total_steps - w)
    progress = min(1.0, (step - w) / span)
    return state.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(state, params, grads):
    """Apply one decoupled-weight-decay Adam update in place.

    ``grads`` maps parameter names to arrays; supplying a gradient for a
    frozen parameter is a contract violation. Returns the learning rate used.
    """
    for name in grads:
        if params.is_frozen(name):
            raise ContractViolation(f"gradient supplied for frozen parameter {name!r}")
    lr = lr_at(state, state.step)
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if lr == 0.0:
            continue
        if state.weight_decay and decays(name):
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    state.step += 1
    return lr
