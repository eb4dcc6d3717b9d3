"""Finite-difference check of the full finetuning loss on the minimal config.

Every learnable Koala parameter is perturbed coordinate by coordinate in
64-bit mode; the worst relative error should sit far below 1e-4.

    python3 demos/03_gradcheck.py
"""
import time

from koala.config import load_config
from koala.training import koala_gradcheck

cfg = load_config("demos/configs/minimal.cfg")
t0 = time.time()
rep = koala_gradcheck(cfg)
for name, err in sorted(rep.per_param.items()):
    print(f"{name:22s} {err:.2e}")
print(f"max relative error {rep.max_rel_err:.2e} in {time.time() - t0:.1f}s")
