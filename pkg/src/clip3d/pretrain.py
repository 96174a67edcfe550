"""Masked-autoencoder pretraining of the image tower's conv trunk."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, write_checkpoint
from .encoders import ImageEncoderParams, _glorot, conv_trunk, init_image_params
from .errors import ContractError
from .synthdata import AugmentConfig, Dataset, augment, extract_patch, preprocess
from .trainer import AdamW, DTYPES, warmup_cosine


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 500
    warmup_steps: int = 25
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 8
    mask_ratio: float = 0.6
    block: int = 4
    patch_size: int = 16
    channels: tuple[int, ...] = (1, 8, 16, 32)
    dim: int = 64
    augment: bool = True
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ContractError("mask_ratio must be in [0, 1)")
        if self.patch_size % self.block:
            raise ContractError("patch_size must be a multiple of block")
        if self.steps > 0 and not 0 <= self.warmup_steps < self.steps:
            raise ContractError("warmup_steps must be below steps")
        object.__setattr__(self, "channels", tuple(self.channels))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ContractError(f"unknown pretrain config keys: {sorted(unknown)}")
        return cls(**d)


def init_decoder(seed, channels=(1, 8, 16, 32), dtype=np.float32) -> dict[str, Tensor]:
    """Transposed convs mirroring the trunk, deepest stage first."""
    rng = np.random.default_rng(seed)
    rev = tuple(reversed(channels))
    out = {}
    for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
        out[f"deconv{i}.weight"] = Tensor(_glorot(rng, (cin, cout, 3, 3, 3), cin * 27, cout * 27, dtype), requires_grad=True)
        out[f"deconv{i}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
    return out


def decode(features: Tensor, decoder: dict[str, Tensor], patch_size: int) -> Tensor:
    n = len(decoder) // 2
    x = features
    for i in range(n):
        size = patch_size // 2 ** (n - 1 - i)
        x = ad.conv_transpose3d(x, decoder[f"deconv{i}.weight"], decoder[f"deconv{i}.bias"], size)
        if i < n - 1:
            x = ad.relu(x)
    return x


def block_mask(rng: np.random.Generator, patch_size: int, block: int, ratio: float, dtype=np.float32) -> np.ndarray:
    """1 on a random ``round(ratio * n_blocks)`` subset of non-overlapping cubes."""
    g = patch_size // block
    n_blocks = g ** 3
    chosen = rng.choice(n_blocks, size=int(round(ratio * n_blocks)), replace=False)
    flat = np.zeros(n_blocks, dtype=dtype)
    flat[chosen] = 1
    m = flat.reshape(g, g, g)
    return np.kron(m, np.ones((block,) * 3, dtype=dtype))


def masked_mse(recon: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    diff = ad.sub(recon, Tensor(target))
    sq = ad.mul(ad.mul(diff, diff), Tensor(mask))
    return ad.scale(ad.reduce_sum(sq), 1.0 / float(mask.sum()))


def mean_predictor_mse(target: np.ndarray, mask: np.ndarray) -> float:
    """Baseline: predict each patch's visible-voxel mean everywhere it is masked."""
    b = target.shape[0]
    flat_t = target.reshape(b, -1)
    flat_m = mask.reshape(b, -1)
    vis = 1 - flat_m
    means = (flat_t * vis).sum(1, keepdims=True) / np.maximum(vis.sum(1, keepdims=True), 1)
    return float((((flat_t - means) ** 2) * flat_m).sum() / flat_m.sum())


@dataclass
class PretrainResult:
    image: ImageEncoderParams
    decoder: dict[str, Tensor]
    config: PretrainConfig
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


class MaskedBatches:
    def __init__(self, dataset: Dataset, config: PretrainConfig):
        self.config = config
        self.volumes = [preprocess(c.volume) for c in dataset.train_cases]
        if not self.volumes:
            raise ContractError("dataset has no training cases")
        self.aug = AugmentConfig() if config.augment else AugmentConfig.off()

    def draw(self, step: int):
        cfg = self.config
        dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng([cfg.seed, int(step), 2])
        idx = rng.integers(0, len(self.volumes), size=cfg.batch_size)
        target = np.stack([
            augment(extract_patch(self.volumes[i], cfg.patch_size, rng)[0], rng, self.aug)[None] for i in idx
        ]).astype(dtype)
        if cfg.mask_ratio == 0:
            mask = np.ones_like(target)
        else:
            mask = np.stack([block_mask(rng, cfg.patch_size, cfg.block, cfg.mask_ratio, dtype)[None] for _ in idx])
        visible = target * (1 - mask) if cfg.mask_ratio > 0 else target
        return visible, target, mask


def reconstruction_loss(image: ImageEncoderParams, decoder, visible, target, mask) -> Tensor:
    return masked_mse(decode(conv_trunk(visible, image), decoder, image.patch_size), target, mask)


def pretrain_mae(config: PretrainConfig, dataset: Dataset, out_path=None) -> PretrainResult:
    """Train trunk + decoder on masked-block reconstruction; only the encoder is kept.

    With ``mask_ratio == 0`` nothing is hidden and the loss covers every voxel
    (a plain autoencoder).
    """
    dtype = DTYPES[config.dtype]
    image = init_image_params([config.seed, 0], config.patch_size, config.channels, config.dim, dtype)
    decoder = init_decoder([config.seed, 3], config.channels, dtype)
    params = {f"image.{k}": t for k, t in image.named() if not k.startswith("proj.")}
    params.update({f"decoder.{k}": t for k, t in decoder.items()})
    opt = AdamW()
    batches = MaskedBatches(dataset, config)
    history = []
    decay = {k: config.weight_decay for k in params}
    for step in range(config.steps):
        visible, target, mask = batches.draw(step)
        ad.zero_grad(params.values())
        loss = reconstruction_loss(image, decoder, visible, target, mask)
        ad.backward(loss)
        lr = warmup_cosine(step + 1, config.lr, config.warmup_steps, config.steps)
        opt.step(params, {k: lr for k in params}, decay)
        history.append({"step": step, "loss": loss.item(), "lr": lr})
    path = None
    if out_path is not None:
        path = Path(out_path)
        tensors = {f"image.{k}": t.data for k, t in image.named()}
        header = {"kind": "pretrain", "config": config.to_dict(), "step": config.steps}
        write_checkpoint(Checkpoint(header, tensors), path)
    return PretrainResult(image, decoder, config, history, path)


def evaluate_reconstruction(result: PretrainResult, dataset: Dataset, step: int = 10**6, repeats: int = 4):
    """Masked MSE of the trained model vs the per-patch mean predictor on fresh draws."""
    batches = MaskedBatches(dataset, dataclasses.replace(result.config, augment=False))
    model_mse, base_mse = [], []
    with ad.no_grad():
        for r in range(repeats):
            visible, target, mask = batches.draw(step + r)
            model_mse.append(reconstruction_loss(result.image, result.decoder, visible, target, mask).item())
            base_mse.append(mean_predictor_mse(target, mask))
    return float(np.mean(model_mse)), float(np.mean(base_mse))
