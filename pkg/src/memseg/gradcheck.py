"""Central finite-difference checks of every differentiable path."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import diffnum as dn
from . import memory as mem
from .diffnum import Tensor
from .model import EncoderSpec, SegModel, cross_entropy, total_loss

OP_TOL = 1e-6
MODEL_TOL = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        up = f()
        flat[k] = old - h
        down = f()
        flat[k] = old
        gflat[k] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over ``leaves`` between backward() and central differences."""
    for t in leaves:
        t.zero_grad()
    dn.current_graph().clear()
    dn.backward(loss_fn())
    worst = 0.0
    for t in leaves:
        analytic = t.grad.copy()

        def f():
            with dn.no_grad():
                return loss_fn().item()

        worst = max(worst, rel_error(analytic, numeric_grad(f, t.data, h)))
    return worst


def _projected(fn, out_shape, rng):
    """Turn a tensor-valued op into a scalar by a fixed random projection."""
    R = Tensor(rng.standard_normal(out_shape))

    def loss():
        y = fn()
        return dn.sum(dn.mul(y, R)) if y.shape else y

    return loss


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * (margin + np.abs(x)), x)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (callable producing a tensor, list of leaves)."""
    T = lambda *shape: Tensor(rng.standard_normal(shape), requires_grad=True)  # noqa: E731
    cases = {}
    a, b = T(10), T(10)
    cases["add"] = (lambda: dn.add(a, b), [a, b])
    cases["sub"] = (lambda: dn.sub(a, b), [a, b])
    cases["mul"] = (lambda: dn.mul(a, b), [a, b])
    s = T()
    cases["scale"] = (lambda: dn.scale(a, s), [a, s])
    cases["scale_const"] = (lambda: dn.scale(a, -2.5), [a])
    A, B = T(2, 5), T(5, 3)
    cases["matmul"] = (lambda: dn.matmul(A, B), [A, B])
    r = Tensor(_away_from_zero(rng, (10,)), requires_grad=True)
    cases["relu"] = (lambda: dn.relu(r), [r])
    cases["exp"] = (lambda: dn.exp(a), [a])
    p = Tensor(rng.uniform(0.5, 2.0, 10), requires_grad=True)
    cases["log"] = (lambda: dn.log(p), [p])
    S = T(2, 5)
    cases["softmax"] = (lambda: dn.softmax(S), [S])
    cases["l2_normalize"] = (lambda: dn.l2_normalize(S), [S])
    cases["norm"] = (lambda: dn.norm(S, axis=1), [S])
    cases["mean"] = (lambda: dn.mean(a), [a])
    cases["mean_axis"] = (lambda: dn.mean(S, axis=0), [S])
    cases["sum_axis"] = (lambda: dn.sum(S, axis=1), [S])
    cases["max"] = (lambda: dn.max(S, axis=-1), [S])
    cases["reshape"] = (lambda: dn.reshape(S, (5, 2)), [S])
    cases["transpose"] = (lambda: dn.transpose(S), [S])
    cases["take_rows"] = (lambda: dn.take_rows(S, [1, 0, 1]), [S])
    cases["pick"] = (lambda: dn.pick(S, [3, 0]), [S])
    U = T(1, 2, 3, 2)
    cases["upsample_bilinear"] = (lambda: dn.upsample_bilinear(U, (6, 8)), [U])
    for stride, pad, dil in ((1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1)):
        X, Wt, bias = T(2, 2, 6, 6), T(3, 2, 3, 3), T(3)
        cases[f"conv2d_s{stride}_p{pad}_d{dil}"] = (
            lambda X=X, Wt=Wt, bias=bias, s_=stride, p_=pad, d_=dil: dn.conv2d(X, Wt, bias, s_, p_, d_),
            [X, Wt, bias],
        )
    X1, W1 = T(1, 3, 2, 2), T(2, 3, 1, 1)
    cases["conv2d_1x1"] = (lambda: dn.conv2d(X1, W1), [X1, W1])
    return cases


def check_ops(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, leaves) in op_cases(rng).items():
        with dn.no_grad():
            shape = fn().shape
        out.append(CheckResult(name, check(_projected(fn, shape, rng), leaves), OP_TOL))
    return out


def check_memory(seed: int = 0, N: int = 8, K: int = 4, C: int = 5) -> list:
    """Read output wrt features, items and gamma; triplet loss wrt features."""
    rng = np.random.default_rng(seed)
    F = Tensor(rng.standard_normal((N, C)), requires_grad=True)
    bank = mem.MemoryBank.random(K, C, rng, item_grad=True)
    R = Tensor(rng.standard_normal((N, C)))

    def read_loss():
        G, _ = mem.read(F, bank)
        return dn.sum(dn.mul(G, R))

    def trip_loss():
        with dn.no_grad():
            a = mem.address(F, bank)
        return mem.triplet_loss(F, bank, a.weights, alpha=1.0)

    def read_trip_loss():
        G, a = mem.read(F, bank)
        return dn.sum(dn.mul(G, R)) + mem.triplet_loss(F, bank, a.weights, alpha=1.0)

    res = [
        CheckResult("read:features", check(read_loss, [F]), OP_TOL),
        CheckResult("read:items", check(read_loss, [bank.items]), OP_TOL),
        CheckResult("read:gamma", check(read_loss, [bank.gamma]), OP_TOL),
        CheckResult("triplet:features", check(trip_loss, [F]), OP_TOL),
        CheckResult("read+triplet:all", check(read_trip_loss, [F, bank.items, bank.gamma]), OP_TOL),
    ]
    return res


def micro_model(seed: int = 0):
    """8x8 input, two stages, C=6, K=3, three classes."""
    rng = np.random.default_rng(seed)
    spec = EncoderSpec(widths=(4, 6), output_stride=4)
    bank = mem.MemoryBank.random(3, 6, rng, gamma=0.1)
    model = SegModel(spec, 3, rng, bank)
    for t in model.params.values():
        t.data += 0.05 * rng.standard_normal(t.shape)  # non-zero biases
    x = rng.uniform(0, 1, (2, 3, 8, 8))
    y = rng.integers(0, 3, (2, 8, 8))
    return model, x, y


def check_model(seed: int = 0, beta: float = 0.05) -> list:
    model, x, y = micro_model(seed)

    def loss():
        out = model.forward(x)
        l_trip = dn.scale(mem.triplet_loss(out.flat, model.bank, out.addressing.weights, 1.0), 1 / x.shape[0])
        return total_loss(cross_entropy(out.probs, y), l_trip, beta)

    return [CheckResult(f"model:{name}", check(loss, [t]), MODEL_TOL) for name, t in model.trainable().items()]


def run_all(seed: int = 0) -> list:
    return check_ops(seed) + check_memory(seed) + check_model(seed)
