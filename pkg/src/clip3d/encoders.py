"""Toy image and text towers mapping into a shared unit-sphere embedding space.

Neither tower has dropout or batch statistics: the accumulation step in
:mod:`clip3d.contrastive` re-encodes inputs and relies on bit-identical
forward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, LoadError
from .text import PAD_ID, TokenSequence


@dataclass
class EncoderParams:
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def requires_grad_(self, flag: bool = True):
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        ad.zero_grad(self.tensors.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy matching arrays in; every own tensor must be present with the same shape."""
        for name, t in self.tensors.items():
            key = prefix + name
            if key not in state:
                raise LoadError(f"checkpoint is missing tensor {key!r}")
            arr = np.asarray(state[key])
            if arr.shape != t.shape:
                raise LoadError(f"tensor {key!r}: checkpoint shape {arr.shape} != expected {t.shape}")
            t.data = arr.astype(t.dtype, copy=True)


@dataclass
class ImageEncoderParams(EncoderParams):
    patch_size: int = 16
    channels: tuple[int, ...] = (1, 8, 16, 32)
    dim: int = 64


@dataclass
class TextEncoderParams(EncoderParams):
    vocab_size: int = 0
    width: int = 32
    dim: int = 64


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_image_params(seed, patch_size: int = 16, channels=(1, 8, 16, 32), dim: int = 64,
                      dtype=np.float32) -> ImageEncoderParams:
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {}
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        w = _glorot(rng, (cout, cin, 3, 3, 3), cin * 27, cout * 27, dtype)
        t[f"conv{i}.weight"] = Tensor(w, requires_grad=True)
        t[f"conv{i}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
    h = channels[-1]
    t["proj.weight"] = Tensor(_glorot(rng, (h, dim), h, dim, dtype), requires_grad=True)
    t["proj.bias"] = Tensor(np.zeros(dim, dtype), requires_grad=True)
    return ImageEncoderParams(t, patch_size=patch_size, channels=tuple(channels), dim=dim)


def init_text_params(seed, vocab_size: int, width: int = 32, dim: int = 64,
                     dtype=np.float32) -> TextEncoderParams:
    rng = np.random.default_rng(seed)
    t: dict[str, Tensor] = {
        "embed.weight": Tensor(_glorot(rng, (vocab_size, width), vocab_size, width, dtype), requires_grad=True),
    }
    for i in range(2):
        t[f"hidden{i}.weight"] = Tensor(_glorot(rng, (width, width), width, width, dtype), requires_grad=True)
        t[f"hidden{i}.bias"] = Tensor(np.zeros(width, dtype), requires_grad=True)
    t["proj.weight"] = Tensor(_glorot(rng, (width, dim), width, dim, dtype), requires_grad=True)
    t["proj.bias"] = Tensor(np.zeros(dim, dtype), requires_grad=True)
    return TextEncoderParams(t, vocab_size=vocab_size, width=width, dim=dim)


def init_params(seed, scheme: str = "random", *, tower: str, checkpoint=None, **arch):
    """Build one tower's parameters, either freshly initialised or loaded.

    ``scheme="from_checkpoint"`` first builds the architecture described by
    ``arch`` and then overwrites every tensor with the checkpoint's copy.
    """
    if tower == "image":
        params = init_image_params(seed, **arch)
    elif tower == "text":
        params = init_text_params(seed, **arch)
    else:
        raise ValueError(f"unknown tower {tower!r}")
    if scheme == "random":
        return params
    if scheme != "from_checkpoint":
        raise ValueError(f"unknown init scheme {scheme!r}")
    from .checkpoint import read_checkpoint

    ckpt = read_checkpoint(checkpoint)
    params.load_state(ckpt.tensors, prefix=f"{tower}.")
    return params


def _as_batch(patches) -> Tensor:
    x = patches if isinstance(patches, Tensor) else Tensor(np.asarray(patches))
    if x.data.ndim == 4:
        x = ad.reshape(x, (1,) + x.shape)
    return x


def conv_trunk(patches, params: ImageEncoderParams) -> Tensor:
    """Stride-2 conv stages: (B, 1, S, S, S) -> (B, channels[-1], S/8, S/8, S/8)."""
    x = _as_batch(patches)
    s = params.patch_size
    if x.data.ndim != 5 or x.shape[1] != 1 or x.shape[2:] != (s, s, s):
        raise DimensionError(f"expected patches of shape (B, 1, {s}, {s}, {s}), got {x.shape}")
    if x.dtype != params["proj.weight"].dtype:
        x = Tensor(x.data.astype(params["proj.weight"].dtype))
    for i in range(len(params.channels) - 1):
        x = ad.relu(ad.conv3d(x, params[f"conv{i}.weight"], params[f"conv{i}.bias"]))
    return x


def image_features(patches, params: ImageEncoderParams) -> Tensor:
    """Conv trunk + global mean pool: (B, 1, S, S, S) -> (B, channels[-1])."""
    x = conv_trunk(patches, params)
    b, c = x.shape[:2]
    return ad.reduce_mean(ad.reshape(x, (b, c, -1)), axis=2)


def encode_images(patches, params: ImageEncoderParams) -> Tensor:
    """Batch of patches -> (B, D) unit-norm embeddings."""
    h = image_features(patches, params)
    return ad.l2_normalize_rows(ad.linear(h, params["proj.weight"], params["proj.bias"]))


def encode_image(patch, params: ImageEncoderParams) -> Tensor:
    x = patch if isinstance(patch, Tensor) else Tensor(np.asarray(patch))
    if x.data.ndim != 4:
        raise DimensionError(f"encode_image expects one (1, S, S, S) patch, got {x.shape}")
    return ad.reshape(encode_images(x, params), (params.dim,))


def _token_ids(tokens) -> np.ndarray:
    if isinstance(tokens, TokenSequence):
        return tokens.ids[None, :]
    if isinstance(tokens, (list, tuple)) and tokens and isinstance(tokens[0], TokenSequence):
        return np.stack([t.ids for t in tokens])
    ids = np.asarray(tokens, dtype=np.int64)
    return ids[None, :] if ids.ndim == 1 else ids


def encode_texts(tokens, params: TextEncoderParams) -> Tensor:
    """Token id matrix (B, T) -> (B, D) unit-norm embeddings.

    Pooling is a mean over non-padding positions; an all-padding row pools to
    the zero vector.
    """
    ids = _token_ids(tokens)
    dtype = params["embed.weight"].dtype
    mask = (ids != PAD_ID).astype(dtype)
    counts = mask.sum(axis=1, keepdims=True)
    weights = np.divide(mask, counts, out=np.zeros_like(mask), where=counts > 0)
    e = ad.embedding(params["embed.weight"], ids)
    pooled = ad.reduce_sum(ad.mul(e, Tensor(np.broadcast_to(weights[:, :, None], e.shape))), axis=1)
    h = ad.relu(ad.linear(pooled, params["hidden0.weight"], params["hidden0.bias"]))
    h = ad.relu(ad.linear(h, params["hidden1.weight"], params["hidden1.bias"]))
    return ad.l2_normalize_rows(ad.linear(h, params["proj.weight"], params["proj.bias"]))


def encode_text(tokens: TokenSequence, params: TextEncoderParams) -> Tensor:
    return ad.reshape(encode_texts(tokens, params), (params.dim,))
