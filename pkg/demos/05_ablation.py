"""
Sweeping the triplet weight
===========================

One model per (beta, seed) on a small corpus; the sweep writes a per-run CSV
and a mean/stdev summary.
"""
import tempfile
from pathlib import Path

from memseg import scenes as sc
from memseg.evaluation import ablate
from memseg.training import TrainConfig

root = Path(tempfile.mkdtemp())
train, test = sc.make_split(root / "data", counts=(32, 16), seed=0)
base = TrainConfig(epochs=3, K=6, checkpoint_every=3)

report = ablate("beta", (0.0, 0.05, 0.2), (0, 1), base, train, test, root / "sweep")
for value, n, mean, sd in report.summary():
    print(f"beta={value:<5} runs={n} mIoU {mean:.4f} +- {sd:.4f}")
print((root / "sweep" / "ablation.csv").read_text())
