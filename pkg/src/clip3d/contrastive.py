"""Symmetric CLIP loss and cross-batch embedding accumulation.

Temperature convention: logits are ``cos_sim * s`` with ``s = exp(log_scale)``
and ``s = 1 / tau``. The default ``tau0 = 1.351`` therefore starts at
``s = 0.7402``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NondeterminismError

TAU0 = 1.351
SCALE_MIN = 1.0 / 100
SCALE_MAX = 100.0


class Temperature:
    """Learnable logit scale stored as a log, clamped to ``[1/100, 100]``."""

    def __init__(self, tau: float = TAU0, learnable: bool = True, dtype=np.float32):
        self.log_scale = Tensor(np.asarray(math.log(1.0 / tau), dtype=dtype), requires_grad=learnable)

    @property
    def learnable(self) -> bool:
        return self.log_scale.requires_grad

    def scale(self) -> Tensor:
        return ad.exp(self.log_scale)

    def value(self) -> float:
        return float(np.clip(np.exp(float(self.log_scale.data)), SCALE_MIN, SCALE_MAX))

    @property
    def tau(self) -> float:
        return 1.0 / self.value()

    def clamp_(self) -> None:
        lo, hi = math.log(SCALE_MIN), math.log(SCALE_MAX)
        self.log_scale.data = np.clip(self.log_scale.data, lo, hi).astype(self.log_scale.dtype)


def temperature_value(temp: Temperature) -> float:
    return temp.value()


def clip_loss(img: Tensor, txt: Tensor, temp: Temperature | Tensor | float) -> Tensor:
    """Mean of row-wise and column-wise cross-entropy over the scaled similarity matrix."""
    if img.data.ndim != 2 or txt.data.ndim != 2 or img.shape != txt.shape:
        raise DimensionError(f"clip_loss: image {img.shape} and text {txt.shape} must be equal (M, D) matrices")
    if img.shape[0] == 0:
        raise ContractError("clip_loss needs at least one pair")
    sim = ad.matmul(img, ad.transpose(txt))
    if isinstance(temp, Temperature):
        logits = ad.mul(sim, temp.scale())
    elif isinstance(temp, Tensor):
        logits = ad.mul(sim, temp)
    else:
        logits = ad.scale(sim, float(temp))
    rows = ad.softmax_cross_entropy_rows(logits)
    cols = ad.softmax_cross_entropy_rows(ad.transpose(logits))
    return ad.scale(ad.add(rows, cols), 0.5)


@dataclass(frozen=True)
class AccumulationPlan:
    B: int
    N: int = 1

    def __post_init__(self):
        if self.N < 1 or self.B < 1:
            raise ContractError(f"need B >= 1 and N >= 1, got B={self.B}, N={self.N}")

    @property
    def effective_batch(self) -> int:
        return self.N * self.B


@dataclass
class AccumulationResult:
    loss: float
    pass_losses: list[float]
    live_nodes: int = 0
    live_elements: int = 0


Encoder = Callable[[object], Tensor]


def accumulated_step(
    batches_img: Sequence,
    batches_txt: Sequence,
    image_encoder: Encoder,
    text_encoder: Encoder,
    temp: Temperature,
    plan: AccumulationPlan | None = None,
    *,
    check_tol: float = 1e-6,
    instrument: bool = False,
) -> AccumulationResult:
    """Accumulate the gradient of the CLIP loss over ``N`` batches of size ``B``.

    First every batch is encoded without a graph and the embeddings cached.
    Then each batch ``j`` is re-encoded with gradients, spliced into slot ``j``
    of the cached concatenation, and the full ``N*B`` loss is backpropagated.
    Gradients land in the encoders' parameters; no optimizer step is taken.

    The logit scale is kept live only for ``j == 0``, since its gradient
    depends on the cached values alone and would otherwise be counted N times.
    """
    n = len(batches_img)
    if n != len(batches_txt) or n == 0:
        raise ContractError(f"need the same non-zero number of image and text batches, got {n} and {len(batches_txt)}")
    if plan is not None and plan.N != n:
        raise ContractError(f"plan expects N={plan.N} batches, got {n}")

    with ad.no_grad():
        cache_i = [ad.detach(image_encoder(x)) for x in batches_img]
        cache_t = [ad.detach(text_encoder(x)) for x in batches_txt]

    frozen_scale = ad.exp(ad.detach(temp.log_scale))

    pass_losses: list[float] = []
    peak_nodes = peak_elems = 0
    for j in range(n):
        y_i = image_encoder(batches_img[j])
        y_t = text_encoder(batches_txt[j])
        for live, cached, kind in ((y_i, cache_i[j], "image"), (y_t, cache_t[j], "text")):
            diff = float(np.max(np.abs(live.data - cached.data))) if live.size else 0.0
            if diff > check_tol:
                raise NondeterminismError(f"{kind} encoder output for batch {j} differs from cache by {diff:.3g}")
        if instrument:
            for y in (y_i, y_t):
                g = ad.Graph.from_root(y)
                peak_nodes = max(peak_nodes, len(g))
                peak_elems = max(peak_elems, g.tracked_elements())
        c_i = ad.concat(cache_i[:j] + [y_i] + cache_i[j + 1:], axis=0)
        c_t = ad.concat(cache_t[:j] + [y_t] + cache_t[j + 1:], axis=0)
        loss = clip_loss(c_i, c_t, temp.scale() if j == 0 else frozen_scale)
        pass_losses.append(loss.item())
        if loss.requires_grad:
            ad.backward(loss)
    return AccumulationResult(
        loss=float(np.sum(pass_losses)) / n,
        pass_losses=pass_losses,
        live_nodes=peak_nodes,
        live_elements=peak_elems,
    )


def full_batch_step(batches_img: Sequence, batches_txt: Sequence, image_encoder: Encoder,
                    text_encoder: Encoder, temp: Temperature) -> float:
    """Reference path: encode everything with gradients and backprop one loss."""
    img = ad.concat([image_encoder(x) for x in batches_img], axis=0)
    txt = ad.concat([text_encoder(x) for x in batches_txt], axis=0)
    loss = clip_loss(img, txt, temp)
    if loss.requires_grad:
        ad.backward(loss)
    return loss.item()
