"""SGD training loop, poly schedule, augmentation, config and checkpoint files."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import diffnum as dn
from . import memory as mem
from .diffnum import NonFiniteError
from .model import EncoderSpec, SegModel, train_step
from .scenes import read_sgpk

log = logging.getLogger(__name__)

STEP_HEADER = ["iteration", "epoch", "l_ce", "l_trip", "loss", "lr"]
EPOCH_HEADER = ["epoch", "l_ce", "l_trip", "loss", "lr"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    epochs: int = 40
    n_classes: int = 6
    widths: tuple = (16, 32, 32, 32)
    output_stride: int = 8
    use_memory: bool = True
    K: int = 24
    beta: float = 0.05
    alpha: float = 1.0
    gamma0: float = 0.1
    train_gamma: bool = True
    item_grad: bool = False
    augment_flip: bool = True
    augment_scale: bool = True
    augment_rotate: bool = True
    scale_range: tuple = (0.5, 2.0)
    max_rotation: float = 10.0
    checkpoint_every: int = 10
    seed: int = 0

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            else:
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(getattr(defaults, key), raw, key)
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text())


def _parse_value(default, raw: str, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None
    raise ValueError(f"config key {key!r}: unsupported type")


# full-length 150-epoch schedule; desk runs use the shorter default
FULL_RECIPE = TrainConfig(epochs=150)


# ---------------------------------------------------------------------------
# schedule and optimizer


def poly_lr(iteration: int, total_iter: int, lr0: float = 0.01, power: float = 0.9) -> float:
    if not 0 <= iteration <= total_iter:
        raise ValueError(f"poly_lr: iteration {iteration} outside [0, {total_iter}]")
    return lr0 * (1.0 - iteration / total_iter) ** power


def sgd_update(w: np.ndarray, grad: np.ndarray, velocity: np.ndarray, lr: float,
               momentum: float = 0.9, weight_decay: float = 0.0, name: str = "param"):
    """Classic momentum with weight decay folded into the gradient. Updates in place."""
    if w.shape != grad.shape or w.shape != velocity.shape:
        raise ValueError(f"sgd_update: shape mismatch for {name}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"sgd_update: non-finite gradient for {name}")
    velocity *= momentum
    velocity += grad + weight_decay * w
    w -= lr * velocity
    return w, velocity


class SGD:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 1e-4, no_decay=("memory.items",)):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, lr: float) -> None:
        for name, t in params.items():
            v = self.velocity.setdefault(name, np.zeros_like(t.data))
            wd = 0.0 if name in self.no_decay else self.weight_decay
            sgd_update(t.data, t.grad, v, lr, self.momentum, wd, name)


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray, labels: np.ndarray) -> tuple:
    return image[..., ::-1].copy(), labels[..., ::-1].copy()


def transform(image: np.ndarray, labels: np.ndarray, flip: bool = False,
              scale: float = 1.0, angle: float = 0.0) -> tuple:
    """Flip, then zoom by ``scale`` and rotate by ``angle`` degrees about the centre.

    The canvas size is kept: zooming in crops the centre, zooming out fills the
    border by reflection. Images are resampled bilinearly, labels by nearest
    neighbour.
    """
    if flip:
        image, labels = hflip(image, labels)
    if scale == 1.0 and angle == 0.0:
        return image.copy(), labels.copy()
    H, W = labels.shape
    t = np.deg2rad(angle)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    A = rot / scale
    c = np.array([(H - 1) / 2.0, (W - 1) / 2.0])
    offset = c - A @ c
    out = np.empty_like(image)
    for ch in range(image.shape[0]):
        out[ch] = ndimage.affine_transform(image[ch], A, offset, order=1, mode="reflect")
    lab = ndimage.affine_transform(labels, A, offset, order=0, mode="reflect")
    return out, lab


def augment(image: np.ndarray, labels: np.ndarray, seed, config: Optional[TrainConfig] = None) -> tuple:
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    flip = rng.random() < 0.5
    scale = rng.uniform(*config.scale_range)
    angle = rng.uniform(-config.max_rotation, config.max_rotation)
    return transform(
        image, labels,
        flip=flip and config.augment_flip,
        scale=scale if config.augment_scale else 1.0,
        angle=angle if config.augment_rotate else 0.0,
    )


# ---------------------------------------------------------------------------
# model construction and checkpoints


def _streams(seed: int):
    model_ss, bank_ss, loop_ss = np.random.SeedSequence(seed).spawn(3)
    return model_ss, bank_ss, loop_ss


def build_model(config: TrainConfig) -> SegModel:
    """Fresh model for ``config``. Encoder/decoder weights depend only on the
    seed and architecture, so a memory model and its memory-free twin share them."""
    model_ss, bank_ss, _ = _streams(config.seed)
    spec = EncoderSpec(widths=tuple(config.widths), output_stride=config.output_stride)
    bank = None
    if config.use_memory:
        bank = mem.MemoryBank.random(config.K, spec.channels, np.random.default_rng(bank_ss),
                                     gamma=config.gamma0, item_grad=config.item_grad)
        if not config.train_gamma:
            bank.gamma.requires_grad = False
            bank.gamma.grad = None
    return SegModel(spec, config.n_classes, np.random.default_rng(model_ss), bank)


CKPT_MAGIC = b"MSCK"
CKPT_VERSION = 1


def _write_block(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    arr = np.asarray(arr, dtype="<f8")
    fh.write(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr).tobytes())


def _read_block(buf: memoryview, pos: int) -> tuple:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    name = bytes(buf[pos : pos + n]).decode()
    pos += n
    (rank,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
    return name, arr, pos + 8 * count


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    velocity: dict
    bank_items: Optional[np.ndarray]
    gamma: Optional[float]
    state: dict = field(default_factory=dict)


def save_checkpoint(path, config: TrainConfig, model: SegModel, optimizer: Optional[SGD] = None,
                    state: Optional[dict] = None) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    cfg = config.to_text().encode()
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg)) + cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for name, t in model.params.items():
            _write_block(fh, name, t.data)
        vel = optimizer.velocity if optimizer is not None else {}
        fh.write(struct.pack("<I", len(vel)))
        for name, v in vel.items():
            _write_block(fh, name, v)
        bank = model.bank
        fh.write(struct.pack("<B", bank is not None))
        if bank is not None:
            fh.write(struct.pack("<IId", bank.K, bank.C, float(bank.gamma.data)))
            fh.write(np.ascontiguousarray(bank.items.data, dtype="<f8").tobytes())
        blob = json.dumps(state or {}, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)) + blob)
    os.replace(tmp, path)


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    buf = memoryview(raw)
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 6
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    config = TrainConfig.from_text(bytes(buf[pos : pos + n]).decode())
    pos += n
    sections = []
    for _ in range(2):
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blocks = {}
        for _ in range(count):
            name, arr, pos = _read_block(buf, pos)
            blocks[name] = arr
        sections.append(blocks)
    (has_bank,) = struct.unpack_from("<B", buf, pos)
    pos += 1
    items = gamma = None
    if has_bank:
        K, C, gamma = struct.unpack_from("<IId", buf, pos)
        pos += struct.calcsize("<IId")
        items = np.frombuffer(buf, dtype="<f8", count=K * C, offset=pos).reshape(K, C).astype(np.float64)
        pos += 8 * K * C
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    state = json.loads(bytes(buf[pos : pos + n]).decode())
    return Checkpoint(config, sections[0], sections[1], items, gamma, state)


def restore(ckpt: Checkpoint) -> tuple:
    """Rebuild ``(model, optimizer)`` from a checkpoint."""
    model = build_model(ckpt.config)
    for name, t in model.params.items():
        if name not in ckpt.params or ckpt.params[name].shape != t.shape:
            raise ValueError(f"checkpoint parameter {name!r} missing or misshapen")
        t.data[...] = ckpt.params[name]
    if model.bank is not None:
        if ckpt.bank_items is None:
            raise ValueError("checkpoint has no memory bank")
        model.bank.items.data = ckpt.bank_items.copy()
        model.bank.items.zero_grad()
        model.bank.gamma.data[...] = ckpt.gamma
    opt = SGD(ckpt.config.momentum, ckpt.config.weight_decay)
    opt.velocity = {k: v.copy() for k, v in ckpt.velocity.items()}
    return model, opt


def load_model(path) -> tuple:
    ckpt = read_checkpoint(path)
    model, _ = restore(ckpt)
    return model, ckpt.config


# ---------------------------------------------------------------------------
# training loop


@dataclass
class FitResult:
    model: SegModel
    checkpoint: Path
    steps_log: Path
    metrics_log: Path
    epochs_done: int


def _fmt(x: float) -> str:
    return repr(float(x))


def _truncate_log(path: Path, header: list, keep) -> None:
    rows = []
    if path.exists():
        with open(path, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if keep(r)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([r[h] for h in header])


def fit(config: TrainConfig, train_file, out_dir, resume_from=None,
        stop_after_epoch: Optional[int] = None) -> FitResult:
    """Train on ``train_file``; write logs and ``checkpoint.msck`` into ``out_dir``.

    ``stop_after_epoch`` ends the run early (after checkpointing) so it can be
    continued later with ``resume_from``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = read_sgpk(train_file)
    if data.n_classes != config.n_classes:
        raise ValueError(f"dataset has {data.n_classes} classes, config expects {config.n_classes}")
    n = len(data)
    bs = config.batch_size
    steps_per_epoch = -(-n // bs)
    total = config.epochs * steps_per_epoch
    ckpt_path = out / "checkpoint.msck"
    steps_log, metrics_log = out / "steps.csv", out / "metrics.csv"

    _, _, loop_ss = _streams(config.seed)
    rng = np.random.default_rng(loop_ss)
    if resume_from is not None:
        ckpt = read_checkpoint(resume_from)
        if ckpt.config != config:
            raise ValueError("resume: checkpoint config differs from the requested config")
        model, opt = restore(ckpt)
        start_epoch = int(ckpt.state["epoch"])
        rng.bit_generator.state = ckpt.state["rng"]
        it_done = start_epoch * steps_per_epoch
        _truncate_log(steps_log, STEP_HEADER, lambda r: int(r["iteration"]) < it_done)
        _truncate_log(metrics_log, EPOCH_HEADER, lambda r: int(r["epoch"]) < start_epoch)
    else:
        model, opt = build_model(config), SGD(config.momentum, config.weight_decay)
        start_epoch = 0
        _truncate_log(steps_log, STEP_HEADER, lambda r: False)
        _truncate_log(metrics_log, EPOCH_HEADER, lambda r: False)
        save_checkpoint(ckpt_path, config, model, opt, {"epoch": 0, "rng": rng.bit_generator.state})

    beta = config.beta
    done = start_epoch
    for epoch in range(start_epoch, config.epochs):
        order = rng.permutation(n)
        aug_seeds = rng.integers(0, 2**63, size=n)
        sums = np.zeros(3)
        with open(steps_log, "a", newline="") as fh:
            writer = csv.writer(fh)
            for s in range(steps_per_epoch):
                it = epoch * steps_per_epoch + s
                idx = order[s * bs : (s + 1) * bs]
                imgs, labs = [], []
                for k in idx:
                    im, lb = augment(data.images[k], data.labels[k], int(aug_seeds[k]), config)
                    imgs.append(im)
                    labs.append(lb)
                lr = poly_lr(it, total, config.lr0, config.poly_power)
                try:
                    with np.errstate(over="ignore", invalid="ignore"):
                        r = train_step(np.stack(imgs).astype(np.float64), np.stack(labs), model, opt, lr,
                                       beta=beta, alpha=config.alpha)
                    if not np.isfinite(r.loss):
                        raise NonFiniteError(f"loss is {r.loss}")
                except NonFiniteError as exc:
                    dn.current_graph().clear()
                    raise TrainingDiverged(
                        f"non-finite values at iteration {it} ({exc}); last good checkpoint kept at {ckpt_path}"
                    ) from exc
                writer.writerow([it, epoch, _fmt(r.l_ce), _fmt(r.l_trip), _fmt(r.loss), _fmt(lr)])
                sums += (r.l_ce, r.l_trip, r.loss)
        means = sums / steps_per_epoch
        with open(metrics_log, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, *map(_fmt, means), _fmt(lr)])
        log.info("epoch %d: l_ce=%.4f l_trip=%.4f loss=%.4f lr=%.5f", epoch, *means, lr)
        done = epoch + 1
        last = done == config.epochs or done == stop_after_epoch
        if last or done % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path, config, model, opt, {"epoch": done, "rng": rng.bit_generator.state})
        if done == stop_after_epoch:
            break
    return FitResult(model, ckpt_path, steps_log, metrics_log, done)
