"""
Checking the autodiff engine against finite differences
=======================================================

Builds a two-layer network from raw ops, backpropagates a cross-entropy loss
and compares every weight gradient with a central difference.
"""

import numpy as np

from dmada.tensor import Adam, Tensor, linear, relu, softmax_cross_entropy

rng = np.random.default_rng(1)
x = Tensor(rng.normal(size=(8, 5)))
target = Tensor(np.eye(3)[rng.integers(0, 3, 8)])
params = [Tensor(rng.normal(scale=0.5, size=s), requires_grad=True) for s in ((5, 6), (1, 6), (6, 3), (1, 3))]


def loss():
    w1, b1, w2, b2 = params
    return softmax_cross_entropy(linear(relu(linear(x, w1, b1)), w2, b2), target)


value = loss()
value.backward()
print(f"loss {value.item():.6f}")

h = 1e-5
for i, p in enumerate(params):
    numeric = np.zeros_like(p.data)
    for idx in np.ndindex(p.shape):
        old = p.data[idx]
        p.data[idx] = old + h
        up = loss().item()
        p.data[idx] = old - h
        down = loss().item()
        p.data[idx] = old
        numeric[idx] = (up - down) / (2 * h)
    err = np.linalg.norm(p.grad - numeric) / max(np.linalg.norm(p.grad), np.linalg.norm(numeric))
    print(f"param {i} {p.shape}: relative error {err:.2e}")

# a few Adam steps should bring the loss down
opt = Adam(params, learning_rate=0.05)
for step in range(50):
    opt.zero_grad()
    l = loss()
    l.backward()
    opt.step()
print(f"after 50 Adam steps: {loss().item():.6f}")
