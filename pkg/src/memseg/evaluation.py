"""mIoU evaluation, memory-bank diagnostics and ablation sweeps."""
from __future__ import annotations

import csv
import dataclasses
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffnum as dn
from .scenes import read_sgpk
from .training import TrainConfig, fit, load_model

log = logging.getLogger(__name__)


class ConfusionMatrix:
    """Counts ``m[a, b]`` of pixels with true class a predicted as b."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.matrix = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, truth) -> "ConfusionMatrix":
        pred = np.asarray(pred).ravel().astype(np.int64)
        truth = np.asarray(truth).ravel().astype(np.int64)
        if pred.shape != truth.shape:
            raise ValueError(f"confusion: prediction {pred.shape} and truth {truth.shape} differ")
        k = self.n_classes
        if pred.size and (min(pred.min(), truth.min()) < 0 or max(pred.max(), truth.max()) >= k):
            raise ValueError(f"confusion: class index outside [0, {k})")
        self.matrix += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)
        return self

    @property
    def total(self) -> int:
        return int(self.matrix.sum())


def miou(conf) -> tuple:
    """Return ``(mean IoU, per-class IoU)``. Classes with an empty union get NaN
    and are left out of the mean."""
    m = np.asarray(conf.matrix if isinstance(conf, ConfusionMatrix) else conf, dtype=np.float64)
    tp = np.diag(m)
    union = m.sum(axis=0) + m.sum(axis=1) - tp
    valid = union > 0
    if not valid.any():
        raise ValueError("empty evaluation")
    iou = np.full(m.shape[0], np.nan)
    iou[valid] = tp[valid] / union[valid]
    return float(iou[valid].mean()), iou


@dataclass
class EvalReport:
    miou: float
    iou: np.ndarray
    confusion: ConfusionMatrix

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "iou"])
            for c, v in enumerate(self.iou):
                w.writerow([c, repr(float(v))])
            w.writerow(["mean", repr(self.miou)])
        with open(out / "confusion.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true"] + [f"pred_{c}" for c in range(self.confusion.n_classes)])
            for c, row in enumerate(self.confusion.matrix):
                w.writerow([c, *row.tolist()])


def evaluate_model(model, test_file, batch_size: int = 16) -> EvalReport:
    """Frozen-memory inference over a dataset file (reads only, no writes)."""
    data = read_sgpk(test_file)
    if data.n_classes != model.n_classes:
        raise ValueError(f"class count mismatch: model has {model.n_classes}, dataset has {data.n_classes}")
    conf = ConfusionMatrix(model.n_classes)
    for s in range(0, len(data), batch_size):
        pred = model.predict(data.images[s : s + batch_size].astype(np.float64))
        conf.update(pred, data.labels[s : s + batch_size])
    score, iou = miou(conf)
    return EvalReport(score, iou, conf)


def evaluate(checkpoint, test_file, out_dir=None) -> EvalReport:
    model, _ = load_model(checkpoint)
    report = evaluate_model(model, test_file)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ---------------------------------------------------------------------------
# bank diagnostics


def bank_similarity(source, heatmap=None, cell: int = 16) -> tuple:
    """Pairwise item cosine similarity.

    ``source`` is a checkpoint path, a MemoryBank or a K x C array. Returns the
    K x K matrix and its mean off-diagonal entry; optionally writes a P5 PGM
    heatmap mapping [-1, 1] onto [0, 255].
    """
    if isinstance(source, (str, Path)):
        model, _ = load_model(source)
        if model.bank is None:
            raise ValueError(f"{source}: checkpoint has no memory bank")
        items = model.bank.items.data
    elif hasattr(source, "items"):
        items = source.items.data
    else:
        items = np.asarray(source, dtype=np.float64)
    unit = items / np.maximum(np.linalg.norm(items, axis=1, keepdims=True), dn.EPS)
    S = unit @ unit.T
    S = (S + S.T) / 2
    K = S.shape[0]
    mean_off = float((S.sum() - np.trace(S)) / (K * (K - 1)))
    if heatmap is not None:
        write_pgm(heatmap, similarity_raster(S, cell))
    return S, mean_off


def similarity_raster(S: np.ndarray, cell: int = 16) -> np.ndarray:
    gray = np.rint((np.clip(S, -1, 1) + 1) * 127.5).astype(np.uint8)
    return np.kron(gray, np.ones((cell, cell), dtype=np.uint8))


def write_pgm(path, raster: np.ndarray) -> None:
    raster = np.asarray(raster, dtype=np.uint8)
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(raster.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# ablations

SWEEPABLE = {"K": "K", "beta": "beta"}
BETA_GRID = (0.0, 0.01, 0.05, 0.1, 0.2)


def default_values(param: str, n_classes: int = 6) -> tuple:
    if param == "beta":
        return BETA_GRID
    if param == "K":
        # 0 is the memory-free baseline
        return tuple(sorted({0, 2, n_classes // 2, n_classes, 2 * n_classes, 4 * n_classes} - {1}))
    raise ValueError(f"unknown sweep parameter {param!r}")


def config_for(param: str, value, base: TrainConfig, seed: int) -> TrainConfig:
    if param == "K":
        k = int(value)
        if k == 0:
            return dataclasses.replace(base, use_memory=False, seed=seed)
        return dataclasses.replace(base, K=k, use_memory=True, seed=seed)
    if param == "beta":
        return dataclasses.replace(base, beta=float(value), seed=seed)
    raise ValueError(f"unknown sweep parameter {param!r}")


@dataclass
class AblationRow:
    value: float
    seed: int
    miou: float
    status: str = "ok"


@dataclass
class AblationReport:
    param: str
    values: tuple
    seeds: tuple
    rows: list = field(default_factory=list)

    def summary(self) -> list:
        out = []
        for v in self.values:
            scores = [r.miou for r in self.rows if r.value == v and r.status == "ok"]
            mean = statistics.fmean(scores) if scores else float("nan")
            sd = statistics.stdev(scores) if len(scores) > 1 else 0.0 if scores else float("nan")
            out.append((v, len(scores), mean, sd))
        return out

    def write(self, out_dir) -> tuple:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        runs, summ = out / "ablation.csv", out / "ablation_summary.csv"
        with open(runs, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "value", "seed", "miou", "status"])
            for r in self.rows:
                w.writerow([self.param, r.value, r.seed, repr(r.miou), r.status])
        with open(summ, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["param", "value", "n", "mean_miou", "std_miou"])
            for v, n, m, s in self.summary():
                w.writerow([self.param, v, n, repr(m), repr(s)])
        return runs, summ


def ablate(param: str, values, seeds, base_config: TrainConfig, train_file, test_file,
           out_dir) -> AblationReport:
    """Train and evaluate one model per (value, seed). A failed run is
    recorded with its error and the sweep moves on."""
    if param not in SWEEPABLE:
        raise ValueError(f"unknown sweep parameter {param!r}; choose from {sorted(SWEEPABLE)}")
    values, seeds = tuple(values), tuple(int(s) for s in seeds)
    if not values or not seeds:
        raise ValueError("ablate: need at least one value and one seed")
    out = Path(out_dir)
    report = AblationReport(param, values, seeds)
    for v in values:
        for seed in seeds:
            run_dir = out / f"{param}={v}" / f"seed={seed}"
            try:
                cfg = config_for(param, v, base_config, seed)
                res = fit(cfg, train_file, run_dir)
                score = evaluate(res.checkpoint, test_file, run_dir).miou
                report.rows.append(AblationRow(v, seed, score))
                log.info("%s=%s seed=%d miou=%.4f", param, v, seed, score)
            except Exception as exc:  # sweep keeps going
                msg = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
                report.rows.append(AblationRow(v, seed, float("nan"), msg))
                log.warning("%s=%s seed=%d failed: %s", param, v, seed, exc)
    report.write(out)
    return report
