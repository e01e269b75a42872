"""
Reading from and writing to the memory bank
===========================================

Two unit items, one feature. Reading pulls the feature toward the items it
resembles; writing pulls each item toward the features it owns.
"""
import numpy as np

from memseg import memory as mem

M = mem.MemoryBank([[1.0, 0.0], [0.0, 1.0]], gamma=0.1)
f = np.array([[1.0, 0.0]])

G, a = mem.read(f, M)
print("similarities   ", a.sim.data)
print("weights        ", a.weights.data.round(4))   # e/(e+1), 1/(e+1)
print("refined feature", G.data.round(4))            # f + 0.1 * (0.7311, 0.2689)

# three features, two items: item 0 owns f1, item 1 owns f2 and f3
F = np.array([[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]])
A = mem.partition(mem.address(F, M).sim)
print("sets           ", [s.tolist() for s in A.sets])
print("update weights ", [w.round(4).tolist() for w in mem.update_weights(F, M, A)])

mem.write(F, M)
print("items after write\n", M.items.data.round(4))

# the triplet loss asks each feature to sit closer to its best item than its runner-up
rng = np.random.default_rng(0)
B = mem.MemoryBank.random(4, 8, rng)
F = rng.standard_normal((32, 8))
W = mem.address(F, B).weights
print("triplet loss on random features:", round(mem.triplet_loss(F, B, W, alpha=1.0).item(), 4))
