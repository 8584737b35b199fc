"""
Training on the synthetic benchmark
===================================

Four classes, each swinging one limb of a 15-joint body with its own rhythm.
A reduced-width network learns it in a couple of epochs on a laptop CPU,
then we look at where its curves end up.
"""

import logging
import sys
from pathlib import Path

import numpy as np

from stcnet.data import SynthSpec, animated_joints, generate_synthetic
from stcnet.harness import TrainConfig, evaluate, export_curves, train
from stcnet.model import ModelConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")

tr = generate_synthetic(SynthSpec(), "train")
va = generate_synthetic(SynthSpec(samples_per_class=25), "val")
print(f"{len(tr)} train / {len(va)} val samples, shape {tr.samples.shape[1:]}")

# a quarter of the default widths keeps an epoch around ten seconds
cfg = ModelConfig(graph=tr.graph, num_classes=4, block_channels=(16, 16, 16, 16, 32, 32, 32, 64, 64, 64))
res = train(TrainConfig(epochs=6, warmup_epochs=2), cfg, tr, va, out)
print("best val accuracy", res.best_val_acc, "at epoch", res.best_epoch)

acc, scores = evaluate(res.checkpoint, va)
scores.write(out / "scores.json")
print("eval accuracy", acc)

# curves for one sample per class; after training they tend to merge, so
# count how many distinct joints the fifteen curves end on
ids = [int(np.flatnonzero(va.labels == c)[0]) for c in range(4)]
doc = export_curves(res.checkpoint, va, ids, out / "curves.json", out / "curves.svg")
for rec in doc["records"]:
    ends = [path[-1] for path in rec["curves"]]
    moving = set(animated_joints(15, rec["label"]))
    print(f"{rec['block']:9s} class {rec['label']}: end joints {sorted(set(ends))}, swinging limb {sorted(moving)}")
print("wrote", out / "curves.svg")
