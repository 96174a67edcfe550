"""Bundle of both towers, the vocabulary and the temperature."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .contrastive import Temperature
from .encoders import ImageEncoderParams, TextEncoderParams, encode_images, encode_texts
from .synthdata import extract_patch, preprocess
from .text import REGIONS, Region, Vocabulary, region_prompt, tokenize


@dataclass
class CLIPModel:
    image: ImageEncoderParams
    text: TextEncoderParams
    vocab: Vocabulary
    temperature: Temperature
    max_tokens: int = 64

    @property
    def dim(self) -> int:
        return self.image.dim

    @property
    def patch_size(self) -> int:
        return self.image.patch_size

    def parameters(self):
        yield from self.image
        yield from self.text
        if self.temperature.learnable:
            yield self.temperature.log_scale

    def zero_grad(self) -> None:
        ad.zero_grad(self.parameters())

    def token_ids(self, sentences: Sequence[str]) -> np.ndarray:
        return np.stack([tokenize(s, self.vocab, self.max_tokens).ids for s in sentences])

    def embed_texts(self, sentences: Sequence[str], batch: int = 64) -> np.ndarray:
        ids = self.token_ids(sentences)
        with ad.no_grad():
            return np.concatenate([encode_texts(ids[i:i + batch], self.text).data for i in range(0, len(ids), batch)])

    def embed_prompts(self, regions: Sequence[Region] = REGIONS) -> np.ndarray:
        return self.embed_texts([region_prompt(r) for r in regions])

    def embed_patches(self, patches: np.ndarray, batch: int = 16) -> np.ndarray:
        with ad.no_grad():
            return np.concatenate(
                [encode_images(patches[i:i + batch], self.image).data for i in range(0, len(patches), batch)]
            )

    def embed_volumes(self, volumes: Sequence[np.ndarray], normalized: bool = False) -> np.ndarray:
        """Centre-patch embeddings of whole volumes (z-normalised here unless ``normalized``)."""
        patches = np.stack([
            extract_patch(v if normalized else preprocess(v), self.patch_size) for v in volumes
        ])
        return self.embed_patches(patches)
