"""
Reverse-mode autodiff on numpy arrays
=====================================

Every op records a backward closure; ``backward`` walks the tape in reverse
topological order.  A central finite-difference check verifies each gradient.
"""

import numpy as np

from convlora import tensor as T
from convlora.gradcheck import run_gradcheck

rng = np.random.default_rng(0)

# a tiny two-layer map with a bilinear resample and a 3x3 convolution
x = T.Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
k = T.Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)


def f():
    up = T.interpolate_bilinear(x, scale=2.0)
    y = T.conv3x3(up, k)
    return T.tsum(T.gelu(T.interpolate_bilinear(y, size=(4, 4))))


loss = f()
T.backward(loss)
print("loss", loss.item())
print("dL/dk[0, 0]\n", k.grad[0, 0])

# finite differences agree with the tape
print("max rel err", T.finite_diff_check(f, [x, k]))

# the whole suite, as run by `convlora gradcheck`
for name, err in run_gradcheck(range(2)).items():
    print(f"{name:20s} {err:.2e}")
