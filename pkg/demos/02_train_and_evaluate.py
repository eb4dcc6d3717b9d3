"""End to end through the CLI: pretrain a base, finetune Koala, evaluate, ablate.

By default this uses demos/configs/quick.cfg (about a minute on one core).
Pass --desk to run the desk-scale defaults instead, which takes considerably
longer.

    python3 demos/02_train_and_evaluate.py [--desk] [--out DIR]
"""
import argparse
import csv
from pathlib import Path

from koala.cli import main

parser = argparse.ArgumentParser()
parser.add_argument("--desk", action="store_true")
parser.add_argument("--out", default="demo_run")
args = parser.parse_args()

out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
src = Path(__file__).parent / "configs" / ("desk.cfg" if args.desk else "quick.cfg")
cfg = out / "run.cfg"
cfg.write_text(src.read_text() + f"train.base_checkpoint = {out / 'base'}\n"
               f"eval.checkpoint = {out / 'koala'}\n")


def step(*argv):
    print("$ koala", " ".join(argv))
    code = main([*argv, "--config", str(cfg), "--out", str(out)])
    if code != 0:
        raise SystemExit(code)


def show(name):
    with open(out / name) as fh:
        for row in csv.reader(fh):
            print("   ", ",".join(row))


step("pretrain-base")
step("finetune")
step("eval")
show("summary.csv")
step("eval", "--mode", "base_only")
show("summary.csv")
step("ablate")
show("ablation.csv")
