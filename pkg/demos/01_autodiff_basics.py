"""A tour of the tensor engine: build graphs, backprop, check a gradient.

Everything in this package runs on one numpy-backed Tensor class with
reverse-mode autodiff. This script shows the moving parts on tiny examples
so the later demos are less magical.

Run: python demos/01_autodiff_basics.py
"""

import numpy as np

import alikekit.tensorgraph as tg
from alikekit import Tensor

# -- scalars ------------------------------------------------------------------
# y = (x * 3 + 1)^2 at x = 2  ->  y = 49, dy/dx = 2 * 7 * 3 = 42
x = Tensor(np.array(2.0), requires_grad=True)
y = (x * 3.0 + 1.0) ** 2
y.backward()
print(f"y = {y.item():.0f}, dy/dx = {x.grad:.0f}   (expected 49, 42)")

# -- broadcasting and reductions ----------------------------------------------
# gradients un-broadcast back to the leaf shapes automatically
w = Tensor(np.ones((3, 1)), requires_grad=True)
v = Tensor(np.arange(4.0), requires_grad=True)
s = (w * v).sum()
s.backward()
print(f"sum = {s.item():.0f}, dw = {w.grad.ravel()}, dv = {v.grad}")

# -- a small conv net step ----------------------------------------------------
rng = np.random.default_rng(0)
img = Tensor(rng.standard_normal((1, 3, 8, 8)))
k = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.1, requires_grad=True)
out = tg.relu(tg.conv2d(img, k, padding=1))
loss = (out * out).mean()
loss.backward()
print(f"conv loss = {loss.item():.4f}, kernel grad norm = "
      f"{np.linalg.norm(k.grad):.4f}")

# -- finite-difference sanity check -------------------------------------------
# perturb one kernel element; the loss should move by grad * eps
eps = 1e-6
i = (0, 0, 1, 1)
base = loss.item()
k2 = k.data.copy()
k2[i] += eps
loss2 = (tg.relu(tg.conv2d(img, Tensor(k2), padding=1)) ** 2).mean()
numeric = (loss2.item() - base) / eps
print(f"analytic {k.grad[i]:+.6f} vs numeric {numeric:+.6f}")
