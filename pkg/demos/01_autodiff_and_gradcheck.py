"""Tape-based autodiff in a few lines, checked against finite differences.

Builds a tiny two-layer conv net by hand, backpropagates a pixel-wise
cross-entropy, then runs the finite-difference checker over every op and
over the calibration composite used during meta-training.

    python demos/01_autodiff_and_gradcheck.py
"""
import numpy as np

from pcn import tensor as T
from pcn.gradcheck import composite_builders, grad_check, run_suite

rng = np.random.default_rng(0)

# A 2-class segmenter on one 6x6 image: conv3x3 -> relu -> conv1x1.
x = T.Tensor(rng.normal(size=(3, 6, 6)))
w1 = T.parameter(rng.normal(scale=0.3, size=(4, 3, 3, 3)), "w1")
w2 = T.parameter(rng.normal(scale=0.3, size=(2, 4, 1, 1)), "w2")
target = (np.arange(36).reshape(6, 6) % 7 == 0).astype(int)

h = T.relu(T.conv2d(x, w1, padding=1))
logits = T.conv2d(h, w2)
loss = T.cross_entropy(T.reshape(logits, (2, -1)), target.ravel())
loss.backward()
print(f"loss {loss.item():.4f}")
print(f"|dL/dw1| {np.linalg.norm(w1.grad):.4f}   |dL/dw2| {np.linalg.norm(w2.grad):.4f}")

# The same graph, checked numerically.
def builder(rng):
    a = T.parameter(w1.data.copy())
    b = T.parameter(w2.data.copy())
    return [a, b], lambda: T.cross_entropy(
        T.reshape(T.conv2d(T.relu(T.conv2d(x, a, padding=1)), b), (2, -1)), target.ravel()
    )

r = grad_check(builder, name="two_layer_net")
print(f"two-layer net: max relative error {r.max_rel_error:.2e} over {r.n_entries} entries")

print("\nfull suite (3 seeds each):")
for r in run_suite(range(3), extra=composite_builders()):
    print(f"  {'ok ' if r.passed else 'BAD'} {r.name:<26} {r.max_rel_error:.2e}")
