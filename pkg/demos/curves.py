"""
Spatio-temporal curves on random features
==========================================

Each joint of the first frame starts a curve. At every step the curve looks
at the k nearest joints of the next frame (in feature space) and a small
scoring network picks one of them.
"""

import torch

from stcnet.nn import RngStream
from stcnet.stc import StcConfig, check_curve_invariants, random_generation

V, T, C = 6, 5, 4

# default: four candidates, a joint never follows itself
cfg = StcConfig(k=4)
cs = random_generation(V, T, C, cfg, seed=0, mode="eval")
for path in cs.paths(0):
    print(" -> ".join(map(str, path)))
print("violations:", check_curve_invariants(cs, cfg.exclude_same_node))

# one candidate per step: plain nearest-neighbour chaining, no scoring involved
line = random_generation(V, T, C, StcConfig(k=4, straight_line_mode=True), seed=0, mode="train")
print("straight-line curve of joint 0:", line.paths(0)[0])

# with the exclusion switched off a curve may stay on the same joint
cs = random_generation(V, T, C, StcConfig(k=V, exclude_same_node=False), seed=3, mode="train")
stays = int((cs.indices[:, 1:] == cs.indices[:, :-1]).sum())
print("steps that stayed on the same joint without exclusion:", stays)

# training draws Gumbel noise from labelled streams, so a replay is exact
a = random_generation(V, T, C, cfg, seed=5, mode="train")
b = random_generation(V, T, C, cfg, seed=5, mode="train")
print("replay identical:", torch.equal(a.indices, b.indices))
