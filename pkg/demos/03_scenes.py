"""
Synthetic scenes under an illumination shift
============================================

Train scenes are lit mildly; test scenes see a wider brightness and gamma
range. Labels never depend on lighting.
"""
import tempfile

import numpy as np

from memseg import scenes as sc
from memseg.evaluation import write_pgm

params = sc.SceneParams(seed=0)
train = sc.generate(params, sc.TRAIN_ILLUMINATION, 64)
test = sc.generate(sc.SceneParams(seed=1), sc.TEST_ILLUMINATION, 64)

for name, corpus in (("train", train), ("test", test)):
    means = np.array([s.image.mean() for s in corpus])
    print(f"{name}: mean brightness {means.mean():.3f} +- {means.std():.3f}")

counts = np.bincount(np.stack([s.labels for s in train]).ravel(), minlength=params.n_classes)
for name, c in zip(sc.CLASS_NAMES, counts / counts.sum()):
    print(f"  {name:<9}{c:6.1%}")

out = tempfile.mkdtemp()
write_pgm(f"{out}/scene0_gray.pgm", np.rint(train[0].image.mean(axis=0) * 255))
write_pgm(f"{out}/scene0_labels.pgm", train[0].labels * (255 // (params.n_classes - 1)))
print("wrote", out)
