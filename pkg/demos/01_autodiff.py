"""
Reverse-mode gradients on a small expression
============================================

Build a tiny graph out of the tensor primitives, run backward, and compare
the result with central finite differences.
"""

import numpy as np

from clip3d import autodiff as ad

rng = np.random.default_rng(0)
x = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
w = ad.Tensor(rng.normal(size=(3, 4)), requires_grad=True)


def f(x, w):
    # row-wise cross-entropy with the diagonal as targets, on a normalized projection
    return ad.softmax_cross_entropy_rows(ad.l2_normalize_rows(ad.matmul(x, w)))


loss = f(x, w)
ad.backward(loss)
print("loss", loss.item())

# finite differences on w, one entry at a time
h = 1e-5
num = np.zeros_like(w.data)
for i in np.ndindex(w.shape):
    wp, wm = w.data.copy(), w.data.copy()
    wp[i] += h
    wm[i] -= h
    with ad.no_grad():
        num[i] = (f(x, ad.Tensor(wp)).item() - f(x, ad.Tensor(wm)).item()) / (2 * h)

print("analytic\n", w.grad)
print("numeric\n", num)
print("max abs difference", np.abs(w.grad - num).max())
