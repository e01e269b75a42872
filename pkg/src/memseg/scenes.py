"""Procedural outdoor-like scenes with a global illumination shift.

Each sample is a layered composition (sky, ground, grass patches, buildings,
tree crowns, thin fence lines) rendered to RGB in [0, 1], followed by the
per-image transform ``clip((b * v) ** g, 0, 1)``. Labels come from the layer
that wins each pixel and never depend on the illumination.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

CLASS_NAMES = ("sky", "grass", "tree", "building", "fence", "ground")
SKY, GRASS, TREE, BUILDING, FENCE, GROUND = range(6)

MAGIC = b"SGPK"
VERSION = 1

_COLORS = {
    GROUND: (0.52, 0.42, 0.30),
    GRASS: (0.36, 0.62, 0.26),
    BUILDING: (0.58, 0.58, 0.62),
    TREE: (0.16, 0.38, 0.17),
    FENCE: (0.80, 0.74, 0.62),
}


@dataclass(frozen=True)
class SceneParams:
    height: int = 64
    width: int = 64
    n_classes: int = 6
    grass_patches: tuple = (1, 3)
    buildings: tuple = (0, 2)
    trees: tuple = (1, 3)
    fences: tuple = (0, 2)
    noise: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class IlluminationSpec:
    """Brightness ``b`` and gamma exponent ``g`` ranges, each drawn uniformly per image."""

    brightness: tuple = (1.0, 1.0)
    gamma: tuple = (1.0, 1.0)

    def draw(self, rng: np.random.Generator) -> tuple:
        b = rng.uniform(*self.brightness)
        g = rng.uniform(*self.gamma)
        return b, g


TRAIN_ILLUMINATION = IlluminationSpec(brightness=(0.8, 1.2), gamma=(0.9, 1.1))
TEST_ILLUMINATION = IlluminationSpec(brightness=(0.4, 1.6), gamma=(0.7, 1.4))


@dataclass
class SampleRecord:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8
    brightness: float = 1.0
    gamma: float = 1.0


def illuminate(image: np.ndarray, brightness: float, gamma: float) -> np.ndarray:
    if brightness <= 0 or gamma <= 0:
        raise ValueError("brightness and gamma must be positive")
    if brightness == 1 and gamma == 1:
        return image.copy()
    return np.clip((brightness * image) ** gamma, 0.0, 1.0)


def _span(rng, bounds):
    lo, hi = bounds
    return int(rng.integers(lo, hi + 1))


def render_scene(params: SceneParams, rng: np.random.Generator) -> tuple:
    """Return an un-illuminated ``(image (H, W, 3) float64, labels (H, W) uint8)`` pair."""
    H, W = params.height, params.width
    rows, cols = np.mgrid[0:H, 0:W]
    labels = np.full((H, W), GROUND, dtype=np.uint8)
    horizon = int(rng.integers(int(0.3 * H), int(0.55 * H) + 1))
    labels[:horizon] = SKY

    def put(mask, cls):
        labels[mask] = cls

    for _ in range(_span(rng, params.grass_patches)):
        cy = rng.uniform(horizon + 2, H)
        cx = rng.uniform(0, W)
        ry = rng.uniform(0.06, 0.2) * H
        rx = rng.uniform(0.12, 0.4) * W
        put((((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1) & (rows >= horizon), GRASS)

    for _ in range(_span(rng, params.buildings)):
        bw = int(rng.integers(W // 8, W // 3))
        bh = int(rng.integers(H // 6, int(H / 2.5)))
        base = horizon + int(rng.integers(0, max(2, H // 10)))
        left = int(rng.integers(0, W - bw))
        put((rows >= max(0, base - bh)) & (rows < base) & (cols >= left) & (cols < left + bw), BUILDING)

    for _ in range(_span(rng, params.trees)):
        r = rng.uniform(0.06, 0.14) * H
        cy = horizon + rng.uniform(-0.15, 0.1) * H
        cx = rng.uniform(0, W)
        put((rows - cy) ** 2 + (cols - cx) ** 2 <= r * r, TREE)
        trunk = (cols >= cx - 1) & (cols <= cx) & (rows > cy) & (rows < cy + 1.6 * r)
        put(trunk & (labels != TREE), TREE)

    for _ in range(_span(rng, params.fences)):
        y0 = int(rng.integers(horizon + 2, max(horizon + 3, H - 4)))
        x0 = int(rng.integers(0, W // 2))
        x1 = int(rng.integers(x0 + W // 4, W + 1))
        thick = int(rng.integers(1, 3))
        span = (cols >= x0) & (cols < x1)
        put(span & (rows >= y0) & (rows < y0 + thick), FENCE)
        put(span & (rows >= y0 - 5) & (rows < y0 - 5 + thick), FENCE)
        put(span & (rows >= y0 - 7) & (rows < y0 + thick) & ((cols - x0) % 6 == 0), FENCE)

    image = np.zeros((H, W, 3))
    t = (rows[:horizon] / max(horizon, 1))[..., None]
    image[:horizon] = (1 - t) * np.array([0.42, 0.62, 0.95]) + t * np.array([0.74, 0.84, 0.96])
    for cls, color in _COLORS.items():
        mask = labels == cls
        jitter = rng.normal(0.0, 0.03, 3)
        image[mask] = np.asarray(color) + jitter
    image += rng.normal(0.0, params.noise, image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return image, labels


def _sample_seeds(seed, count):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(count)


def generate(params: SceneParams, illum: IlluminationSpec, count: int,
             seed: Union[int, np.random.SeedSequence, None] = None) -> list:
    """Render ``count`` samples. Sample k depends only on (seed, k), so the
    same scenes come out under any illumination spec."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if params.height < 16 or params.width < 16:
        raise ValueError(f"scene size {params.height}x{params.width} is below the 16 px minimum")
    if params.n_classes != len(CLASS_NAMES):
        raise ValueError(f"scene generator renders {len(CLASS_NAMES)} classes, got n_classes={params.n_classes}")
    out = []
    for child in _sample_seeds(params.seed if seed is None else seed, count):
        scene_ss, light_ss = child.spawn(2)
        image, labels = render_scene(params, np.random.default_rng(scene_ss))
        b, g = illum.draw(np.random.default_rng(light_ss))
        lit = illuminate(image, b, g)
        out.append(SampleRecord(np.ascontiguousarray(lit.transpose(2, 0, 1), dtype=np.float32), labels, b, g))
    return out


# ---------------------------------------------------------------------------
# .sgpk files


def write_sgpk(path, samples: list, n_classes: int = len(CLASS_NAMES)) -> None:
    if not samples:
        raise ValueError("write_sgpk: no samples")
    _, H, W = samples[0].image.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HIHHH", VERSION, len(samples), H, W, n_classes))
        for s in samples:
            if s.image.shape != (3, H, W) or s.labels.shape != (H, W):
                raise ValueError("write_sgpk: samples differ in size")
            fh.write(np.ascontiguousarray(s.image.transpose(1, 2, 0)).astype("<f4").tobytes())
            fh.write(np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    n_classes: int

    def __len__(self) -> int:
        return self.images.shape[0]


def read_sgpk(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an SGPK file")
    version, count, H, W, n_cls = struct.unpack_from("<HIHHH", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported SGPK version {version}")
    rec = np.dtype([("image", "<f4", (H, W, 3)), ("labels", "u1", (H, W))])
    offset = 4 + struct.calcsize("<HIHHH")
    if len(raw) - offset != count * rec.itemsize:
        raise ValueError(f"{path}: expected {count} samples, file size does not match")
    arr = np.frombuffer(raw, dtype=rec, count=count, offset=offset)
    images = np.ascontiguousarray(arr["image"].transpose(0, 3, 1, 2)).astype(np.float32)
    labels = arr["labels"].copy()
    if labels.size and labels.max() >= n_cls:
        raise ValueError(f"{path}: label {int(labels.max())} outside {n_cls} classes")
    return Dataset(images, labels, n_cls)


def make_split(out_dir, train_illum: IlluminationSpec = TRAIN_ILLUMINATION,
               test_illum: IlluminationSpec = TEST_ILLUMINATION, counts: tuple = (256, 64),
               seed: int = 0, params: Optional[SceneParams] = None,
               train_seed=None, test_seed=None) -> tuple:
    """Write ``train.sgpk`` and ``test.sgpk`` under ``out_dir``.

    Train and test scenes come from two children of one seed sequence unless
    explicit seeds are given, in which case they must differ.
    """
    params = params or SceneParams()
    root = np.random.SeedSequence(seed)
    train_ss, test_ss = root.spawn(2)
    if train_seed is not None or test_seed is not None:
        if train_seed is None or test_seed is None:
            raise ValueError("make_split: give both train_seed and test_seed or neither")
        if train_seed == test_seed:
            raise ValueError("make_split: train and test seed streams overlap")
        train_ss, test_ss = np.random.SeedSequence(train_seed), np.random.SeedSequence(test_seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = out / "train.sgpk", out / "test.sgpk"
    write_sgpk(paths[0], generate(params, train_illum, counts[0], train_ss), params.n_classes)
    write_sgpk(paths[1], generate(params, test_illum, counts[1], test_ss), params.n_classes)
    return paths
