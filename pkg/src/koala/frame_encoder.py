"""Frozen synthetic frame encoder.

Frames are records carrying a latent action id. Encoding looks the action
up in a frozen Gaussian embedding table, replicates it over the patch
grid, adds a frozen per-patch offset and a bounded noise term derived
deterministically from the frame's noise seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import RejectedInput
from .numerics import Tensor

EMBED = "frame_encoder.embed"
OFFSET = "frame_encoder.patch_offset"


@dataclass(frozen=True)
class Frame:
    video_id: str
    frame_index: int
    action_id: int
    noise_seed: int


@dataclass
class FrameFeatures:
    values: Tensor  # (..., frames, patches, input_width)

    @property
    def shape(self):
        return self.values.shape


def init_params(store, cfg, rng):
    m = cfg.model
    store.add(EMBED, rng.standard_normal((m.n_actions, m.input_width)), frozen=True)
    store.add(OFFSET, 0.1 * rng.standard_normal((m.patches, m.input_width)), frozen=True)


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x):
    with np.errstate(over="ignore"):   # wraparound is the point
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def seeded_uniform(seeds, count):
    """Uniform(-1, 1) values, ``count`` per seed, from a counter-based hash."""
    seeds = np.asarray(seeds, dtype=np.int64).astype(np.uint64)
    counter = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = seeds[..., None] * np.uint64(0x100000001B3) + counter
    z = _splitmix(x)
    u = (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return 2.0 * u - 1.0


class FrameEncoder:
    def __init__(self, store, cfg):
        self.store = store
        self.n_actions = cfg.model.n_actions
        self.patches = cfg.model.patches
        self.width = cfg.model.input_width
        self.noise = cfg.model.frame_noise

    def encode_ids(self, action_ids, noise_seeds):
        """Vectorised encoding of (..., frames) action ids -> (..., frames, P, D_in) array."""
        action_ids = np.asarray(action_ids, dtype=np.int64)
        if action_ids.size and (action_ids.min() < 0 or action_ids.max() >= self.n_actions):
            raise RejectedInput(f"action_id outside [0, {self.n_actions})")
        embed = self.store[EMBED].data
        offset = self.store[OFFSET].data
        feats = embed[action_ids][..., None, :] + offset
        if self.noise:
            n = seeded_uniform(noise_seeds, self.patches * self.width)
            feats = feats + self.noise * n.reshape(feats.shape).astype(feats.dtype)
        return feats.astype(embed.dtype)

    def encode_frames(self, frames):
        if not frames:
            raise RejectedInput("no frames to encode")
        ids = [f.action_id for f in frames]
        seeds = [f.noise_seed for f in frames]
        return FrameFeatures(Tensor(self.encode_ids(ids, seeds)))

    def max_separable_noise(self):
        """Largest sigma_f for which frames of different actions stay separable.

        Clean features of actions a != b differ by sqrt(P) * ||e_a - e_b||;
        the noise vector norm is at most sigma_f * sqrt(P * D_in), so
        separability holds while sigma_f < min ||e_a - e_b|| / (2 sqrt(D_in)).
        """
        e = self.store[EMBED].data.astype(np.float64)
        d = np.linalg.norm(e[:, None, :] - e[None, :, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        return float(d.min() / (2.0 * math.sqrt(self.width)))
