"""Tiny dilated-conv encoder, 1x1-conv + bilinear decoder, and the losses."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffnum as dn
from . import memory as mem
from .diffnum import Tensor


@dataclass(frozen=True)
class EncoderSpec:
    widths: tuple = (16, 32, 32, 32)
    output_stride: int = 8
    in_channels: int = 3

    def __post_init__(self):
        os_ = self.output_stride
        if os_ < 1 or os_ & (os_ - 1):
            raise ValueError(f"output stride must be a power of two, got {os_}")
        if os_ > 2 ** len(self.widths):
            raise ValueError(f"output stride {os_} needs more than {len(self.widths)} stages")

    @property
    def channels(self) -> int:
        return self.widths[-1]

    def stages(self) -> list:
        """(stride, dilation) per stage. Strided stages come first until the
        output stride is spent; later stages keep resolution and double dilation."""
        out = []
        budget, dil = self.output_stride, 1
        for _ in self.widths:
            if budget > 1:
                out.append((2, 1))
                budget //= 2
            else:
                dil *= 2
                out.append((1, dil))
        return out


@dataclass
class ModelOutput:
    logits: Tensor  # (B, N_cls, H0, W0)
    probs: Tensor  # (B, N_cls, H0, W0), softmax over axis 1
    features: Tensor  # encoder output, (B, C, H, W)
    flat: Tensor  # encoder output as (B*H*W, C)
    addressing: Optional[mem.Addressing] = None


class SegModel:
    """Encoder -> optional memory read -> decoder.

    Parameters live in ``self.params`` (name -> Tensor). The memory bank, when
    present, is held separately because its items are not gradient state.
    """

    def __init__(self, spec: EncoderSpec, n_classes: int, rng: np.random.Generator,
                 bank: Optional[mem.MemoryBank] = None):
        self.spec = spec
        self.n_classes = n_classes
        self.bank = bank
        if bank is not None and bank.C != spec.channels:
            raise ValueError(f"memory dimension {bank.C} != encoder channels {spec.channels}")
        self.params: dict[str, Tensor] = {}
        c_in = spec.in_channels
        for s, c_out in enumerate(spec.widths):
            self._init_conv(f"enc{s}", c_in, c_out, 3, rng)
            c_in = c_out
        self._init_conv("dec", c_in, n_classes, 1, rng)

    def _init_conv(self, name, c_in, c_out, k, rng):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params[f"{name}.w"] = Tensor(rng.standard_normal((c_out, c_in, k, k)) * std, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def trainable(self) -> dict:
        """Everything the optimizer updates, including gamma and (if enabled) items."""
        out = dict(self.params)
        if self.bank is not None:
            if self.bank.gamma.requires_grad:
                out["memory.gamma"] = self.bank.gamma
            if self.bank.item_grad:
                out["memory.items"] = self.bank.items
        return out

    def zero_grad(self):
        for t in self.trainable().values():
            t.zero_grad()

    def encode(self, x) -> Tensor:
        x = dn.as_tensor(x)
        if x.data.ndim == 3:
            x = dn.reshape(x, (1,) + x.shape)
        _, c, H, W = x.shape
        os_ = self.spec.output_stride
        if c != self.spec.in_channels:
            raise ValueError(f"encode: expected {self.spec.in_channels} input channels, got {c}")
        if H % os_ or W % os_:
            raise ValueError(f"encode: input size {H}x{W} not divisible by output stride {os_}")
        h = x
        last = len(self.spec.widths) - 1
        for s, (stride, dil) in enumerate(self.spec.stages()):
            h = dn.conv2d(h, self.params[f"enc{s}.w"], self.params[f"enc{s}.b"],
                          stride=stride, padding=dil, dilation=dil)
            # the last stage stays linear so features cannot collapse to exact zero
            if s != last:
                h = dn.relu(h)
        return h

    def decode(self, G, size) -> tuple:
        G = dn.as_tensor(G)
        if G.data.ndim != 4 or G.shape[1] != self.params["dec.w"].shape[1]:
            raise ValueError(f"decode: expected {self.params['dec.w'].shape[1]} channels, got shape {G.shape}")
        logits = dn.upsample_bilinear(dn.conv2d(G, self.params["dec.w"], self.params["dec.b"]), size)
        probs = dn.softmax(logits.transpose(0, 2, 3, 1), axis=-1).transpose(0, 3, 1, 2)
        return logits, probs

    def forward(self, x) -> ModelOutput:
        x = dn.as_tensor(x)
        if x.data.ndim == 3:
            x = dn.reshape(x, (1,) + x.shape)
        F = self.encode(x)
        B, C, h, w = F.shape
        flat = F.transpose(0, 2, 3, 1).reshape(B * h * w, C)
        addressing = None
        G = F
        if self.bank is not None:
            Gf, addressing = mem.read(flat, self.bank)
            G = Gf.reshape(B, h, w, C).transpose(0, 3, 1, 2)
        logits, probs = self.decode(G, x.shape[2:])
        return ModelOutput(logits, probs, F, flat, addressing)

    def predict(self, x) -> np.ndarray:
        with dn.no_grad():
            out = self.forward(x)
        return np.argmax(out.probs.data, axis=1)


def cross_entropy(probs, labels) -> Tensor:
    """Mean over pixels of -log p[true class]; ``probs`` is (B, N_cls, H, W)."""
    probs = dn.as_tensor(probs)
    labels = np.asarray(labels)
    if probs.data.ndim == 3:
        probs = dn.reshape(probs, (1,) + probs.shape)
    if labels.ndim == 2:
        labels = labels[None]
    B, K, H, W = probs.shape
    if labels.shape != (B, H, W):
        raise ValueError(f"cross_entropy: labels {labels.shape} do not match predictions {probs.shape}")
    bad = np.argwhere((labels < 0) | (labels >= K))
    if bad.size:
        raise ValueError(f"cross_entropy: label out of range at pixel {tuple(int(v) for v in bad[0])}")
    flat = probs.transpose(0, 2, 3, 1).reshape(B * H * W, K)
    return dn.mean(dn.scale(dn.log(dn.pick(flat, labels.reshape(-1))), -1.0))


def total_loss(l_ce: Tensor, l_trip: Tensor, beta: float) -> Tensor:
    if beta == 0:
        return l_ce
    return l_ce + dn.scale(l_trip, beta)


@dataclass
class StepResult:
    l_ce: float
    l_trip: float
    loss: float


def train_step(images, labels, model: SegModel, optimizer, lr: float,
               beta: float = 0.05, alpha: float = 1.0, write: bool = True) -> StepResult:
    """One optimization step: forward, losses, backward, SGD update, memory write.

    The triplet term is averaged over the images of the batch, like the
    cross entropy; each image contributes its full per-feature sum.
    """
    B = np.asarray(images).shape[0] if np.asarray(images).ndim == 4 else 1
    model.zero_grad()
    out = model.forward(images)
    l_ce = cross_entropy(out.probs, labels)
    if model.bank is not None:
        # with beta == 0 the triplet term is reported but kept off the graph
        ctx = dn.no_grad() if beta == 0 else contextlib.nullcontext()
        with ctx:
            l_trip = dn.scale(mem.triplet_loss(out.flat, model.bank, out.addressing.weights, alpha), 1.0 / B)
        loss = total_loss(l_ce, l_trip, beta)
        trip_value = l_trip.item()
    else:
        loss = l_ce
        trip_value = 0.0
    result = StepResult(l_ce.item(), trip_value, loss.item())
    if not np.isfinite(result.loss):
        dn.current_graph().clear()
        return result
    dn.backward(loss)
    optimizer.step(model.trainable(), lr)
    if model.bank is not None and write:
        mem.write(out.flat.data, model.bank)
    return result
