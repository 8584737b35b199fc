"""
Dilated directional kernels on a skeleton
==========================================

Every graph convolution splits a joint's neighbours three ways: toward the
root, itself, away from the root. Dilation widens the toward/away sets by
walking further along the tree.
"""

import numpy as np

from stcnet.graph import dilated_adjacency, kernel_set, partition_adjacency, path_graph
from stcnet.data import body

# the five-joint chain 0-1-2-3-4 rooted at 0
base = partition_adjacency(path_graph(5))
print("toward the root, d=1\n", base.raw_cp)

# at d=2 node 2 reaches node 0 (two hops back) but also node 3: the
# construction steps once toward the root and then walks freely
A = dilated_adjacency(base, 2, "cp")
print("toward the root, d=2, row of node 2:", np.flatnonzero(A[2]).tolist())

# past the tree's diameter nothing is left
print("d=6 empty:", not dilated_adjacency(base, 6, "cp").any())

# the synthetic body used for training: spine of three, four limbs of three
g = body(15).graph
for d in (1, 2, 3):
    ks = kernel_set(g, d)
    counts = {k: int(ks.raw(k).sum()) for k in ("cp", "id", "cf")}
    print(f"d={d} nonzeros per direction: {counts}")

# normalized kernels are what the network multiplies by
ks = kernel_set(g, 2)
print("row sums of the normalized away-from-root kernel:", np.round(ks.normalized("cf").sum(1), 3).tolist())
