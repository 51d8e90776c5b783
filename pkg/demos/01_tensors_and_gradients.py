"""Tour of the tensor core: taped autodiff and the Hermitian solver.

Every trainable computation in this package runs through the Tensor/DiffGraph
pair in msar.numerics. This script builds a small computation, differentiates
it, checks the result against central finite differences, and finishes with
the diagonally-loaded complex solver the beamformer relies on.
"""

import numpy as np

from msar.numerics import (
    DiffGraph, Tensor, backward, hermitian_solve, matmul, relu, softmax, tsum,
)

rng = np.random.default_rng(0)

# A two-layer toy network: x -> relu(x W1) -> softmax -> weighted sum.
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w1 = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
weights = Tensor(rng.standard_normal((3, 5)))

with DiffGraph() as graph:
    hidden = relu(matmul(x, w1))
    probs = softmax(hidden, axis=-1)
    loss = tsum(probs * weights)
backward(loss, graph)

print(f"loss = {loss.item():.6f}, {len(graph)} ops recorded on the tape")
print(f"grad(x) shape {x.grad.shape}, grad(W1) shape {w1.grad.shape}")

# Finite-difference spot check on a few entries of W1.
h = 1e-6
flat = w1.data.reshape(-1)
for idx in (0, 7, 19):
    orig = flat[idx]
    vals = []
    for sign in (+1, -1):
        flat[idx] = orig + sign * h
        with DiffGraph():
            probe = tsum(softmax(relu(matmul(x, w1)), axis=-1) * weights)
        vals.append(probe.item())
    flat[idx] = orig
    fd = (vals[0] - vals[1]) / (2 * h)
    print(f"W1[{idx:2d}]  autodiff {w1.grad.reshape(-1)[idx]:+.8f}   "
          f"finite-diff {fd:+.8f}")

# The beamformer needs small Hermitian complex solves. Build one, solve it,
# and confirm the residual vanishes.
a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
m = a @ a.conj().T + np.eye(4)
b = rng.standard_normal(4) + 1j * rng.standard_normal(4)
sol = hermitian_solve(m, b)
print(f"hermitian solve residual: {np.abs(m @ sol - b).max():.2e}")
