"""
Masked-autoencoder pretraining of the image encoder
===================================================

Blocks of each patch are hidden and a small decoder reconstructs them from
the encoder's features. The pretrained encoder then seeds alignment training.
"""

import tempfile
from pathlib import Path

import numpy as np

from clip3d.pretrain import PretrainConfig, evaluate_reconstruction, pretrain_mae
from clip3d.synthdata import generate_cases, split_dataset
from clip3d.trainer import TrainConfig, train

ds = split_dataset(generate_cases(80, seed=0), np.random.default_rng([0, 4]))
ckpt = Path(tempfile.mkdtemp()) / "pretrain.cal3"

res = pretrain_mae(PretrainConfig(steps=200), ds, out_path=ckpt)
model_mse, mean_mse = evaluate_reconstruction(res, ds)
print(f"masked MSE {model_mse:.3f} vs per-patch mean predictor {mean_mse:.3f}")

# start alignment from the pretrained image tower
aligned = train(TrainConfig(steps=50, warmup_steps=5), ds, init_image_encoder=ckpt)
print("alignment loss after 50 steps", round(float(aligned.losses[-10:].mean()), 3))
