"""Alignment training: AdamW, warm-up + cosine schedule, two tower learning rates."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, read_checkpoint, write_checkpoint
from .contrastive import AccumulationPlan, TAU0, Temperature, accumulated_step
from .encoders import encode_images, encode_texts, init_image_params, init_text_params
from .errors import ContractError, DivergenceError, LoadError
from .model import CLIPModel
from .synthdata import AugmentConfig, Dataset, augment, augment_case, extract_patch, preprocess
from .text import Vocabulary, build_vocab, record_to_sentence, template_corpus, tokenize

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    warmup_steps: int = 100
    lr_vision: float = 1e-3
    lr_text: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    accum_freq: int = 8
    tau0: float = TAU0
    learn_temperature: bool = True
    dim: int = 64
    text_width: int = 32
    channels: tuple[int, ...] = (1, 8, 16, 32)
    patch_size: int = 16
    max_tokens: int = 64
    augment: bool = True
    label_preserving: bool = True
    distinct_cases: bool = False
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.steps < 0:
            raise ContractError("steps must be non-negative")
        if self.steps > 0 and not 0 <= self.warmup_steps < self.steps:
            raise ContractError(f"warmup_steps ({self.warmup_steps}) must be below steps ({self.steps})")
        if self.batch_size * self.accum_freq < 2:
            raise ContractError("batch_size * accum_freq must be at least 2")
        if self.dtype not in DTYPES:
            raise ContractError(f"dtype must be one of {sorted(DTYPES)}")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def plan(self) -> AccumulationPlan:
        return AccumulationPlan(self.batch_size, self.accum_freq)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


def warmup_cosine(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warm-up from 0, then cosine annealing down to 0 at ``total``."""
    if warmup > 0 and step < warmup:
        return base * step / warmup
    span = total - warmup
    if span <= 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def lr_schedule(step: int, config: TrainConfig, tower: str) -> float:
    base = {"vision": config.lr_vision, "text": config.lr_text}[tower]
    return warmup_cosine(step, base, config.warmup_steps, config.steps)


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay over a dict of named tensors."""

    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, lr: dict[str, float], weight_decay: dict[str, float]) -> None:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise DivergenceError(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            dt = p.dtype.type
            step_lr, decay = lr[name], weight_decay[name]
            new = p.data * dt(1 - step_lr * decay) if decay else p.data.copy()
            new -= dt(step_lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            p.data = new.astype(p.dtype, copy=False)


def adamw_step(params: dict, optimizer: AdamW, lr: dict[str, float], weight_decay: dict[str, float]) -> None:
    optimizer.step(params, lr, weight_decay)


# -- model construction ------------------------------------------------------


def default_vocab() -> Vocabulary:
    return build_vocab(template_corpus())


def build_model(config: TrainConfig, vocab: Vocabulary | None = None) -> CLIPModel:
    vocab = vocab or default_vocab()
    dtype = DTYPES[config.dtype]
    image = init_image_params([config.seed, 0], config.patch_size, config.channels, config.dim, dtype)
    text = init_text_params([config.seed, 1], len(vocab), config.text_width, config.dim, dtype)
    temp = Temperature(config.tau0, learnable=config.learn_temperature, dtype=dtype)
    return CLIPModel(image, text, vocab, temp, config.max_tokens)


def named_parameters(model: CLIPModel) -> dict:
    out = {f"image.{k}": t for k, t in model.image.named()}
    out.update({f"text.{k}": t for k, t in model.text.named()})
    out["temperature.log_scale"] = model.temperature.log_scale
    return out


def _trainable(model: CLIPModel) -> dict:
    return {k: t for k, t in named_parameters(model).items() if t.requires_grad}


# -- checkpoints -------------------------------------------------------------


def make_checkpoint(model: CLIPModel, config: TrainConfig, step: int, optimizer: AdamW | None = None,
                    kind: str = "clip") -> Checkpoint:
    tensors = {k: t.data for k, t in named_parameters(model).items()}
    if optimizer is not None:
        for name in sorted(optimizer.m):
            tensors[f"adam.m.{name}"] = optimizer.m[name]
            tensors[f"adam.v.{name}"] = optimizer.v[name]
    header = {
        "kind": kind,
        "config": config.to_dict(),
        "step": int(step),
        "optimizer_step": 0 if optimizer is None else optimizer.t,
        "vocab": list(model.vocab.tokens),
    }
    return Checkpoint(header, tensors)


def save_checkpoint(path, model: CLIPModel, config: TrainConfig, step: int, optimizer: AdamW | None = None) -> Path:
    path = Path(path)
    write_checkpoint(make_checkpoint(model, config, step, optimizer), path)
    model.vocab.save(path.parent / "vocab.txt")
    return path


def load_model(path, config: TrainConfig | None = None):
    """Return ``(model, config, step, optimizer)`` restored from a checkpoint."""
    ckpt = read_checkpoint(path)
    if ckpt.header.get("kind") != "clip":
        raise LoadError(f"{path} is not an alignment checkpoint")
    stored = TrainConfig.from_dict({**ckpt.header["config"], "channels": tuple(ckpt.header["config"]["channels"])})
    config = config or stored
    vocab = Vocabulary(ckpt.header["vocab"])
    model = build_model(config, vocab)
    for name, t in named_parameters(model).items():
        if name not in ckpt.tensors:
            raise LoadError(f"checkpoint is missing tensor {name!r}")
        arr = ckpt.tensors[name]
        if arr.shape != t.shape:
            raise LoadError(f"tensor {name!r}: checkpoint shape {arr.shape} != expected {t.shape}")
        t.data = arr.astype(t.dtype)
    opt = AdamW()
    opt.t = int(ckpt.header.get("optimizer_step", 0))
    dtype = DTYPES[config.dtype]
    for key, arr in ckpt.tensors.items():
        if key.startswith("adam.m."):
            opt.m[key[len("adam.m."):]] = arr.astype(dtype)
        elif key.startswith("adam.v."):
            opt.v[key[len("adam.v."):]] = arr.astype(dtype)
    return model, config, int(ckpt.header["step"]), opt


def load_image_encoder(model: CLIPModel, path) -> None:
    """Overwrite the image tower with the ``image.*`` tensors of any checkpoint."""
    ckpt = read_checkpoint(path)
    model.image.load_state(ckpt.tensors, prefix="image.")


# -- training loop -----------------------------------------------------------


@dataclass
class TrainResult:
    model: CLIPModel
    optimizer: AdamW
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([h["loss"] for h in self.history])


class BatchSampler:
    """Draws the N*B (patch, token ids) pairs of one optimizer step from (seed, step)."""

    def __init__(self, dataset: Dataset, config: TrainConfig, vocab: Vocabulary):
        self.config = config
        self.vocab = vocab
        self.cases = dataset.train_cases
        if not self.cases:
            raise ContractError("dataset has no training cases")
        self.volumes = [preprocess(c.volume) for c in self.cases]
        self.token_ids = np.stack([
            tokenize(record_to_sentence(c.record), vocab, config.max_tokens).ids for c in self.cases
        ])
        c = config
        self.aug = AugmentConfig(label_preserving=c.label_preserving) if c.augment else AugmentConfig.off()

    def draw(self, step: int):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, int(step), 1])
        m = cfg.batch_size * cfg.accum_freq
        if cfg.distinct_cases and m <= len(self.cases):
            idx = rng.choice(len(self.cases), size=m, replace=False)
        else:
            idx = rng.integers(0, len(self.cases), size=m)
        patches, ids = [], []
        for i in idx:
            if self.aug.label_preserving:
                patch = augment(extract_patch(self.volumes[i], cfg.patch_size, rng)[0], rng, self.aug)
                tok = self.token_ids[i]
            else:
                case = dataclasses.replace(self.cases[i], volume=self.volumes[i])
                vol, record = augment_case(case, rng, self.aug)
                patch = extract_patch(vol, cfg.patch_size, rng)[0]
                tok = tokenize(record_to_sentence(record), self.vocab, cfg.max_tokens).ids
            patches.append(patch[None])
            ids.append(tok)
        patches = np.stack(patches).astype(DTYPES[cfg.dtype])
        ids = np.stack(ids)
        b = cfg.batch_size
        return ([patches[k:k + b] for k in range(0, len(idx), b)],
                [ids[k:k + b] for k in range(0, len(idx), b)])


def compute_step_gradients(model: CLIPModel, sampler: BatchSampler, step: int):
    """Zero gradients, then accumulate the gradients of one step's loss."""
    model.zero_grad()
    imgs, txts = sampler.draw(step)
    return accumulated_step(
        imgs, txts,
        lambda x: encode_images(x, model.image),
        lambda x: encode_texts(x, model.text),
        model.temperature,
        sampler.config.plan,
    )


def _write_metrics(path: Path, history: list[dict], every: int) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "temperature", "lr_vision", "lr_text"])
        for h in history:
            if h["step"] % every == 0:
                w.writerow([h["step"], repr(h["loss"]), repr(h["temperature"]), repr(h["lr_vision"]), repr(h["lr_text"])])


def train(
    config: TrainConfig,
    dataset: Dataset,
    *,
    model: CLIPModel | None = None,
    init_image_encoder=None,
    out_dir=None,
    resume=None,
    progress: bool = False,
    callback=None,
) -> TrainResult:
    """Run alignment training; writes ``checkpoint.cal3`` and ``metrics.csv`` into ``out_dir``.

    ``history[k]`` holds the loss evaluated after ``k`` optimizer updates and the
    learning rates used for update ``k + 1``.
    """
    start = 0
    optimizer = AdamW()
    if resume is not None:
        model, config, start, optimizer = load_model(resume, config)
    elif model is None:
        model = build_model(config)
        if init_image_encoder is not None:
            load_image_encoder(model, init_image_encoder)
    sampler = BatchSampler(dataset, config, model.vocab)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.cal3" if out_dir is not None else None

    params = _trainable(model)
    decay = {k: (0.0 if k.startswith("temperature") else config.weight_decay) for k in params}
    history: list[dict] = []
    iterator = range(start, config.steps)
    if progress:
        from tqdm import tqdm

        iterator = tqdm(iterator, desc="train")
    for step in iterator:
        lr_v = lr_schedule(step + 1, config, "vision")
        lr_t = lr_schedule(step + 1, config, "text")
        try:
            tau = model.temperature.tau
            res = compute_step_gradients(model, sampler, step)
            if not math.isfinite(res.loss):
                raise DivergenceError(f"non-finite loss at step {step}")
            lrs = {k: (lr_v if k.startswith("image.") else lr_t) for k in params}
            optimizer.step(params, lrs, decay)
        except DivergenceError:
            if ckpt_path is not None:
                write_checkpoint(make_checkpoint(model, config, step, optimizer),
                                 ckpt_path.with_name(ckpt_path.name + ".diverged"))
                _write_metrics(out_dir / "metrics.csv", history, config.log_every)
            raise
        model.temperature.clamp_()
        history.append({"step": step, "loss": res.loss, "temperature": tau,
                        "lr_vision": lr_v, "lr_text": lr_t})
        if callback is not None:
            callback(step, model, history[-1])
        if step % config.log_every == 0:
            log.info("step %d loss %.4f tau %.4f", step, res.loss, history[-1]["temperature"])
        if ckpt_path is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(ckpt_path.with_name(f"checkpoint_{step + 1:06d}.cal3"), model, config, step + 1, optimizer)

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt_path, model, config, config.steps, optimizer)
        _write_metrics(out_dir / "metrics.csv", history, config.log_every)
    return TrainResult(model, optimizer, config, history, ckpt_path)
