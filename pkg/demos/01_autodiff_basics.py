#!/usr/bin/env python3
"""Tour of the tensor core: taped ops, backward, and gradient checking."""

import numpy as np

from storyvae import autograd as ag
from storyvae.autograd import ParameterSet, Tensor

# Forward ops record a tape; backward replays it.
x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
loss = ag.sum_all(ag.mul(x, x))
ag.backward(loss)
print("d/dx sum(x*x) at [1,2,3]:", x.grad)  # [2, 4, 6]

# Matrix product with the worked 2x2 example.
a = Tensor([[1.0, 2.0], [3.0, 4.0]])
b = Tensor([[1.0], [1.0]])
print("[[1,2],[3,4]] @ [[1],[1]] =", ag.matmul(a, b).data.ravel())  # [3, 7]

# Softmax is shift invariant and sums to one.
row = Tensor(np.array([0.0, np.log(2.0)]))
print("softmax([0, ln 2]) =", ag.softmax(row).data)  # [1/3, 2/3]

# Non-finite forward values raise instead of propagating.
try:
    ag.exp(Tensor(np.array([1000.0])))
except ag.NumericsError as e:
    print("numerics policy:", e)

# Finite-difference verification of a composite function, float64.
params = ParameterSet()
params.add("w", Tensor(np.random.default_rng(0).standard_normal((4, 4)), dtype=np.float64))
params.add("v", Tensor(np.random.default_rng(1).standard_normal(4), dtype=np.float64))

def fn():
    h = ag.gelu(ag.matmul(params["v"], params["w"]))
    return ag.sum_all(ag.mul(h, h))

report = ag.grad_check(fn, params, eps=1e-5)
print(f"grad check: passed={report.passed}, max rel err={report.max_rel_error:.2e}")
