"""
Reverse-mode gradients on a tape
================================

Build a small expression, backpropagate, and compare against central
finite differences.
"""
import numpy as np

from memseg import diffnum as dn
from memseg.diffnum import Tensor
from memseg.gradcheck import numeric_grad, rel_error, run_all

rng = np.random.default_rng(0)

# a softmax picked at one index: d/dz of softmax(z)[0] at z = 0 is (0.25, -0.25)
z = Tensor(np.zeros(2), requires_grad=True)
dn.backward(dn.sum(dn.pick(dn.softmax(dn.reshape(z, (1, 2)), axis=-1), [0])))
print("softmax grad:", z.grad)

# a dilated convolution followed by a norm
x = Tensor(rng.standard_normal((1, 2, 6, 6)), requires_grad=True)
w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
loss = dn.sum(dn.norm(dn.reshape(dn.conv2d(x, w, padding=2, dilation=2), (3, -1)), axis=1))
dn.backward(loss)


def f():
    y = dn.conv2d(Tensor(x.data), Tensor(w.data), padding=2, dilation=2)
    return float(np.linalg.norm(y.data.reshape(3, -1), axis=1).sum())


print("conv weight rel. error:", rel_error(w.grad, numeric_grad(f, w.data)))

# the full suite used by the gradcheck subcommand
results = run_all(0)
print(f"{sum(r.ok for r in results)}/{len(results)} checks pass; worst {max(r.error for r in results):.2e}")
