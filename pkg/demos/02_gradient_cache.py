"""
Large contrastive batches at small-batch memory
===============================================

``accumulated_step`` splits an N*B contrastive batch into N slices. It
caches detached embeddings first, then re-encodes one slice at a time with
gradients. The gradient it leaves behind matches the full batch.
"""

import numpy as np

from clip3d import autodiff as ad
from clip3d.contrastive import AccumulationPlan, Temperature, accumulated_step, full_batch_step

rng = np.random.default_rng(1)
n, b, d = 4, 3, 8


def encoder(d_in):
    w = ad.Tensor(rng.normal(size=(d_in, d)), requires_grad=True)
    return w, lambda x: ad.l2_normalize_rows(ad.matmul(ad.Tensor(x), w))


w_img, enc_img = encoder(6)
w_txt, enc_txt = encoder(5)
imgs = [rng.normal(size=(b, 6)) for _ in range(n)]
txts = [rng.normal(size=(b, 5)) for _ in range(n)]
temp = Temperature(dtype=np.float64)
params = [w_img, w_txt, temp.log_scale]

full = full_batch_step(imgs, txts, enc_img, enc_txt, temp)
g_full = [p.grad.copy() for p in params]
ad.zero_grad(params)

res = accumulated_step(imgs, txts, enc_img, enc_txt, temp, AccumulationPlan(b, n), instrument=True)
g_acc = [p.grad.copy() for p in params]

print(f"full-batch loss {full:.12f}  accumulated {res.loss:.12f}")
for name, a, c in zip(("image", "text", "log_scale"), g_acc, g_full):
    print(f"{name:9s} max grad difference {np.abs(a - c).max():.1e}")

# the live graph only ever holds one slice of B examples
print("live graph nodes", res.live_nodes, "tracked elements", res.live_elements)
