"""Walk through the three tokenizers on one synthetic video.

Builds an untrained model (base weights random, Koala parameters at their
zero init), tokenizes key frames and segments, and shows that with the
gate w at zero the long-video tokens equal the key-frame tokens.

    python3 demos/01_tokenizers.py
"""
import numpy as np

from koala import numerics as nx
from koala.config import RunConfig
from koala.datapipe import make_sample, make_video
from koala.model import build_model

cfg = RunConfig()
m = cfg.model
model = build_model(cfg, seed=0)
rng = np.random.default_rng(0)
record = make_video("demo", (1, 2, 3, 0), cfg, rng)
sample = make_sample(record, cfg, model.vocab, rng)

key = model.features(sample.key_actions, sample.key_seeds)
seg = model.features(sample.seg_actions, sample.seg_seeds)
print(f"key-frame features     {key.shape}   (T_key, patches, D_in)")
print(f"segment features       {seg.shape}   (S, T_seg, patches, D_in)")

with nx.no_grad():
    z_key = model.key_frames_tokenize(key)
    z_segs = model.cs_tokenize(seg, z_key)
    q_final = model.build_q_final(z_segs)
    z_inter = model.cv_tokenize(z_segs, z_key)
print(f"z_key                  {z_key.values.shape}")
print(f"z_segs                 {z_segs.values.shape}   one token set per segment")
print(f"Q_final                {q_final.values.shape}   segment-major")
print(f"z_inter                {z_inter.values.shape}")

gap = np.abs(z_inter.values.data - z_key.values.data).max()
print(f"w = {model.bank.w.data.item()}: max |z_inter - z_key| = {gap:.1e}")

# open the gate and the video tokens start to depend on the segments
model.store["koala.w"].data[...] = 0.5
for name in ("koala.Q_segs", "koala.Q_inter"):
    t = model.store[name]
    t.data[...] = rng.normal(0.0, 0.3, size=t.shape)
with nx.no_grad():
    z_inter = model.cv_tokenize(model.cs_tokenize(seg, z_key), z_key)
gap = np.abs(z_inter.values.data - z_key.values.data).max()
print(f"w = 0.5: max |z_inter - z_key| = {gap:.3f}")

rows = model.visual(z_key, z_inter, "full")
print(f"language-model visual rows {rows.shape}   (2N, D^f)")
