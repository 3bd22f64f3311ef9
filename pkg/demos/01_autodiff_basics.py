"""A tour of the tensor engine: build a graph, sweep gradients, check them.

Run:  python demos/01_autodiff_basics.py
"""

import numpy as np

from patchbag import autodiff as ad
from patchbag.autodiff import Tensor

rng = np.random.default_rng(0)

# Leaf tensors with requires_grad=True are trainable parameters.
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)

# Every op records how to route gradients back to its inputs.
product = ad.matmul(a, b)              # (3, 2)
squashed = ad.tanh(product)
loss = ad.tensor_sum(squashed)         # scalar

print("loss:", float(loss.data))

# One reverse sweep fills .grad on every trainable leaf.
ad.backward(loss)
print("dL/da row 0:", a.grad[0])

# Finite differences agree: nudge one entry, re-run the forward pass.
step = 1e-6
orig = a.data[0, 0]
a.data[0, 0] = orig + step
up = float(ad.tensor_sum(ad.tanh(ad.matmul(a, b))).data)
a.data[0, 0] = orig - step
down = float(ad.tensor_sum(ad.tanh(ad.matmul(a, b))).data)
a.data[0, 0] = orig
numeric = (up - down) / (2 * step)
print(f"analytic {a.grad[0, 0]:+.8f}  vs finite difference {numeric:+.8f}")

# Softmax over a column normalizes across rows, stable under large shifts.
logits = Tensor(rng.normal(size=(5, 1)) * 50)
weights = ad.softmax(logits, axis=0)
print("softmax sums to", weights.data.sum())

# A second sweep of the same loss is rejected, catching a classic bug.
try:
    ad.backward(loss)
except Exception as err:
    print("second backward:", err)
