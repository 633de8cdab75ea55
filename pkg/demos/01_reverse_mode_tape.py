"""
Reverse-mode differentiation on a tape
======================================

The tensor module records numpy operations on a tape and replays them
backwards to accumulate gradients.  This script differentiates a small
expression by hand and checks the tape against central differences.
"""

import numpy as np

from hatfusion import tensor as T

rng = np.random.default_rng(7)

# parameters live in a ParamSet so optimizers can iterate them by name
params = T.ParamSet()
w = params.add("w", rng.normal(size=(3, 2)))
b = params.add("b", rng.normal(size=2))
x = T.constant(rng.normal(size=(4, 3)))

# loss = sum of a softplus-squashed affine map
with T.Tape() as tape:
    h = T.add(T.matmul(x, w), b)
    y = T.softplus(h)
    loss = T.sum_vec(T.matmul(y, T.constant(np.ones(2))))

tape.backward(loss)
print("loss", float(loss.data))
print("dL/db from the tape:", b.grad)

# central differences, one coordinate at a time
step = 1e-6
fd = np.zeros_like(b.data)
for i in range(b.data.size):
    b.data[i] += step
    hi = np.sum(np.logaddexp(0.0, x.data @ w.data + b.data))
    b.data[i] -= 2 * step
    lo = np.sum(np.logaddexp(0.0, x.data @ w.data + b.data))
    b.data[i] += step
    fd[i] = (hi - lo) / (2 * step)
print("dL/db by central differences:", fd)
print("max abs difference:", np.max(np.abs(b.grad - fd)))

# gradients accumulate until cleared, so a fresh step starts with zero_grads
params.zero_grads()
print("after zero_grads:", b.grad)
