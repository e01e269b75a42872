"""Memory bank read/write and the item-separation triplet loss.

Features arrive flattened as an (N, C) matrix, one row per spatial position
(several images may be pooled into the same N). The bank holds K unit-norm
items of dimension C and the residual scale ``gamma``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import diffnum as dn
from .diffnum import EPS, DegenerateVectorError, NonFiniteError, Tensor


class MemoryBank:
    """K memory items (rows of ``items``) and the trainable read scale ``gamma``.

    Items are plain state by default: reads treat them as constants and only
    :func:`write` changes them. With ``item_grad=True`` they are exposed as a
    gradient-carrying tensor instead.
    """

    def __init__(self, items, gamma: float = 0.1, item_grad: bool = False):
        items = np.array(items, dtype=np.float64)
        if items.ndim != 2:
            raise ValueError(f"memory items must be a K x C matrix, got shape {items.shape}")
        if items.shape[0] < 2:
            raise ValueError(f"memory bank needs K >= 2 items, got {items.shape[0]}")
        self.item_grad = item_grad
        self.items = Tensor(items, requires_grad=item_grad, name="memory.items")
        self.gamma = Tensor(gamma, requires_grad=True, name="memory.gamma")

    @classmethod
    def random(cls, K: int, C: int, rng: np.random.Generator, gamma: float = 0.1, item_grad: bool = False):
        """Isotropic Gaussian rows, L2-normalized."""
        if K < 2:
            raise ValueError(f"memory bank needs K >= 2 items, got {K}")
        m = rng.standard_normal((K, C))
        m /= np.linalg.norm(m, axis=1, keepdims=True)
        return cls(m, gamma=gamma, item_grad=item_grad)

    @property
    def K(self) -> int:
        return self.items.shape[0]

    @property
    def C(self) -> int:
        return self.items.shape[1]

    def copy(self) -> "MemoryBank":
        out = MemoryBank(self.items.data.copy(), float(self.gamma.data), self.item_grad)
        out.gamma.requires_grad = self.gamma.requires_grad
        out.gamma.grad = None if self.gamma.grad is None else np.zeros_like(out.gamma.data)
        return out

    def __repr__(self) -> str:
        return f"MemoryBank(K={self.K}, C={self.C}, gamma={float(self.gamma.data):.4g})"


@dataclass
class Addressing:
    """Cosine similarities ``sim`` and softmax addressing ``weights``, both (N, K)."""

    sim: Tensor
    weights: Tensor


@dataclass
class WritePartition:
    """``sets[j]`` holds the feature indices whose most similar item is j;
    ``weights[j]`` the max-renormalized update weights aligned with ``sets[j]``."""

    sets: list
    weights: Optional[list] = None


def _check_rows(name: str, x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{name}: non-finite entries")
    n = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(n < EPS)
    if bad.size:
        raise DegenerateVectorError(f"{name}: degenerate vector in row {int(bad[0])}")


def _as_features(F) -> Tensor:
    F = dn.as_tensor(F)
    if F.data.ndim != 2 or F.shape[0] < 1:
        raise ValueError(f"features must be an (N, C) matrix with N >= 1, got {F.shape}")
    return F


def _items(M: MemoryBank) -> Tensor:
    return M.items if M.item_grad else Tensor(M.items.data)


def address(F, M: MemoryBank) -> Addressing:
    F = _as_features(F)
    if F.shape[1] != M.C:
        raise ValueError(f"address: feature dimension {F.shape[1]} != memory dimension {M.C}")
    _check_rows("features", F.data)
    _check_rows("memory items", M.items.data)
    items = _items(M)
    S = dn.l2_normalize(F) @ dn.transpose(dn.l2_normalize(items))
    return Addressing(sim=S, weights=dn.softmax(S, axis=-1))


def read(F, M: MemoryBank, addressing: Optional[Addressing] = None):
    """Refine features with the memory: ``G = F + gamma * (W @ items)``.

    Returns ``(G, addressing)`` so callers can reuse the weights for the
    triplet loss without recomputing them.
    """
    F = _as_features(F)
    a = addressing if addressing is not None else address(F, M)
    recalled = a.weights @ _items(M)
    G = F + dn.scale(recalled, M.gamma)
    return G, a


def partition(S) -> WritePartition:
    """Assign every feature to its most similar item; ties go to the lowest index."""
    S = np.asarray(S.data if isinstance(S, Tensor) else S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise NonFiniteError("partition: non-finite similarities")
    owner = np.argmax(S, axis=1)
    return WritePartition(sets=[np.flatnonzero(owner == j) for j in range(S.shape[1])])


def update_weights(F, M: MemoryBank, A: WritePartition) -> list:
    """Per-item update weights: a softmax over all N features of the item-to-feature
    cosine similarity, rescaled so the largest weight inside the item's set is 1."""
    Fd = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    m = M.items.data
    _check_rows("features", Fd)
    _check_rows("memory items", m)
    fn = Fd / np.linalg.norm(Fd, axis=1, keepdims=True)
    mn = m / np.linalg.norm(m, axis=1, keepdims=True)
    s_item = mn @ fn.T  # (K, N)
    z = s_item - s_item.max(axis=1, keepdims=True)
    v = np.exp(z)
    v /= v.sum(axis=1, keepdims=True)
    out = []
    for j, idx in enumerate(A.sets):
        if idx.size == 0:
            out.append(np.empty(0))
            continue
        vj = v[j, idx]
        out.append(vj / vj.max())
    A.weights = out
    return out


def write(F, M: MemoryBank) -> MemoryBank:
    """Update the bank in place from detached features and return it."""
    Fd = np.asarray(F.data if isinstance(F, Tensor) else F, dtype=np.float64)
    if Fd.ndim != 2 or Fd.shape[1] != M.C:
        raise ValueError(f"write: features {Fd.shape} do not match memory dimension {M.C}")
    with dn.no_grad():
        a = address(Tensor(Fd), M)
    A = partition(a.sim.data)
    vt = update_weights(Fd, M, A)
    items = M.items.data.copy()
    for j, idx in enumerate(A.sets):
        if idx.size == 0:
            continue
        u = items[j] + vt[j] @ Fd[idx]
        n = np.linalg.norm(u)
        if n < EPS:
            raise DegenerateVectorError(f"write: degenerate vector for item {j}")
        items[j] = u / n
    M.items.data[...] = items
    return M


def top2(weights) -> tuple:
    """Indices of the largest and second-largest entry per row; ties to the lowest index."""
    W = np.asarray(weights.data if isinstance(weights, Tensor) else weights)
    if W.shape[1] < 2:
        raise ValueError("top2: need at least two items")
    order = np.argsort(-W, axis=1, kind="stable")
    return order[:, 0], order[:, 1]


def triplet_loss(F, M: MemoryBank, W, alpha: float = 1.0) -> Tensor:
    """Sum over features of ``max(|f - m_p| - |f - m_q| + alpha, 0)`` where p and q
    are the first and second most strongly addressed items."""
    F = _as_features(F)
    if M.K < 2:
        raise ValueError("triplet_loss: need K >= 2")
    p, q = top2(W)
    items = _items(M)
    d_pos = dn.norm(F - dn.take_rows(items, p), axis=1)
    d_neg = dn.norm(F - dn.take_rows(items, q), axis=1)
    hinge = dn.relu(d_pos - d_neg + Tensor(np.full(F.shape[0], float(alpha))))
    return dn.sum(hinge)
