"""
Training with and without the memory module
===========================================

A short run on a small corpus: train both models from the same initial
weights, evaluate them on shifted test lighting, then look at the bank.
Pass a larger epoch count on the command line for a longer run.
"""
import dataclasses
import sys
import tempfile
from pathlib import Path

from memseg import scenes as sc
from memseg.evaluation import bank_similarity, evaluate
from memseg.training import TrainConfig, fit

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
root = Path(tempfile.mkdtemp())
train, test = sc.make_split(root / "data", counts=(64, 32), seed=0)

memory = TrainConfig(epochs=epochs, K=6, checkpoint_every=epochs)
baseline = dataclasses.replace(memory, use_memory=False)

for name, cfg in (("memory", memory), ("baseline", baseline)):
    res = fit(cfg, train, root / name)
    report = evaluate(res.checkpoint, test, root / name)
    print(f"{name:<9} test mIoU {report.miou:.4f}  per class {report.iou.round(3)}")
    if res.model.bank is not None:
        _, mean_off = bank_similarity(res.checkpoint, heatmap=root / name / "bank.pgm")
        print(f"          gamma {float(res.model.bank.gamma.data):.3f}, mean item similarity {mean_off:.3f}")

print("logs and checkpoints under", root)
