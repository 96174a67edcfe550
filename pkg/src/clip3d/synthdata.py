"""Synthetic brain-like volumes with Gaussian-blob lesions in five zones.

Array axes are ``(left-right, anterior-posterior, inferior-superior)``: index 0
on axis 1 is the anterior end, index 0 on axis 2 the inferior end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .text import REGIONS, Region, TabularRecord

LR, AP, IS = 0, 1, 2


@dataclass(frozen=True)
class DataConfig:
    size: int = 32
    min_lesions: int = 1
    max_lesions: int = 3
    sigma_range: tuple[float, float] | None = None  # default (S/16, S/10)
    intensity_range: tuple[float, float] = (2.0, 4.0)
    background_amplitude: float = 0.3
    noise_sigma: float = 0.1
    age_range: tuple[int, int] = (23, 77)

    @property
    def sigmas(self) -> tuple[float, float]:
        return self.sigma_range or (self.size / 16, self.size / 10)


# -- zones -------------------------------------------------------------------

Box = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


def zone_boxes(size: int) -> dict[Region, list[Box]]:
    """Half-open voxel boxes per region; temporal is a left/right pair."""
    s = size
    t1, t2 = round(s / 3), round(2 * s / 3)
    half = s // 2
    q1, q3 = s // 4, s - s // 4
    full = (0, s)
    return {
        Region.FRONTAL: [(full, (0, t1), full)],
        Region.PARIETAL: [(full, (t1, t2), (t2, s))],
        Region.TEMPORAL: [((0, q1), (t1, t2), (0, half)), ((q3, s), (t1, t2), (0, half))],
        Region.OCCIPITAL: [(full, (t2, s), (half, s))],
        Region.CEREBELLAR: [(full, (t2, s), (0, t1))],
    }


def zone_masks(size: int) -> dict[Region, np.ndarray]:
    out = {}
    for region, boxes in zone_boxes(size).items():
        m = np.zeros((size,) * 3, dtype=bool)
        for (a0, a1), (b0, b1), (c0, c1) in boxes:
            m[a0:a1, b0:b1, c0:c1] = True
        out[region] = m
    return out


def _in_box(p, box: Box) -> bool:
    return all(lo <= round(c) < hi for c, (lo, hi) in zip(p, box))


def region_of_point(p, size: int) -> Region:
    """Zone containing ``p``; points outside every zone go to the nearest box."""
    best, best_d = None, np.inf
    for region, boxes in zone_boxes(size).items():
        for box in boxes:
            if _in_box(p, box):
                return region
            d = sum(max(lo - c, 0.0, c - (hi - 1)) ** 2 for c, (lo, hi) in zip(p, box))
            if d < best_d:
                best, best_d = region, d
    return best


# -- generation --------------------------------------------------------------


@dataclass(frozen=True)
class Blob:
    region: Region
    center: tuple[float, float, float]
    sigma: float
    amplitude: float


@dataclass
class Case:
    case_id: str
    volume: np.ndarray
    record: TabularRecord
    blobs: list[Blob] = field(default_factory=list)


def _sample_center(rng: np.random.Generator, box: Box, margin: float) -> tuple[float, ...]:
    c = []
    for lo, hi in box:
        a, b = float(lo), float(hi - 1)
        m = min(margin, (b - a) / 2)
        c.append(rng.uniform(a + m, b - m))
    return tuple(c)


def _background(rng: np.random.Generator, size: int, amplitude: float, noise_sigma: float) -> np.ndarray:
    grid = np.stack(np.meshgrid(*(np.arange(size),) * 3, indexing="ij"), axis=-1).astype(np.float64)
    bg = np.zeros((size,) * 3)
    for _ in range(3):
        k = rng.uniform(0.0, 2.0, size=3)
        phase = rng.uniform(0, 2 * np.pi)
        bg += (amplitude / 3) * np.cos(2 * np.pi * grid @ k / size + phase)
    return bg + rng.normal(0.0, noise_sigma, size=bg.shape)


def gaussian_blob(size: int, center, sigma: float, amplitude: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64)
    g = [np.exp(-((ax - c) ** 2) / (2 * sigma**2)) for c in center]
    return amplitude * g[0][:, None, None] * g[1][None, :, None] * g[2][None, None, :]


def generate_case(rng: np.random.Generator, config: DataConfig = DataConfig(), case_id: str = "case") -> Case:
    s = config.size
    boxes = zone_boxes(s)
    vol = _background(rng, s, config.background_amplitude, config.noise_sigma)
    n_lesions = int(rng.integers(config.min_lesions, config.max_lesions + 1))
    blobs = []
    for _ in range(n_lesions):
        region = REGIONS[int(rng.integers(len(REGIONS)))]
        options = boxes[region]
        box = options[int(rng.integers(len(options)))]
        sigma = float(rng.uniform(*config.sigmas))
        amp = float(rng.uniform(*config.intensity_range))
        center = _sample_center(rng, box, 2 * sigma)
        vol += gaussian_blob(s, center, sigma, amp)
        blobs.append(Blob(region, center, sigma, amp))
    age = int(rng.integers(config.age_range[0], config.age_range[1] + 1))
    gender = ("male", "female")[int(rng.integers(2))]
    lesions = tuple(dict.fromkeys(b.region for b in blobs))
    return Case(case_id, vol.astype(np.float32), TabularRecord(age, gender, lesions), blobs)


def case_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(master_seed), int(index)])


def generate_cases(n: int, seed: int, config: DataConfig = DataConfig()) -> list[Case]:
    return [generate_case(case_rng(seed, i), config, case_id=f"case_{i:04d}") for i in range(n)]


# -- preprocessing and patches ----------------------------------------------


def preprocess(v: np.ndarray) -> np.ndarray:
    """Per-volume z-normalisation with the population standard deviation."""
    v64 = np.asarray(v, dtype=np.float64)
    out = (v64 - v64.mean()) / (v64.std() + 1e-8)
    return out.astype(np.asarray(v).dtype if np.asarray(v).dtype.kind == "f" else np.float32)


def center_corner(size: int, patch: int) -> int:
    return (size - patch) // 2


def extract_patch(v: np.ndarray, size: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random ``size``-cube with a leading channel axis; the centre cube when ``rng`` is None."""
    s = v.shape
    if len(s) != 3 or len(set(s)) != 1:
        raise DimensionError(f"expected a cubic volume, got {s}")
    if size > s[0]:
        raise DimensionError(f"patch size {size} exceeds volume size {s[0]}")
    if rng is None:
        corner = (center_corner(s[0], size),) * 3
    else:
        corner = tuple(int(c) for c in rng.integers(0, s[0] - size + 1, size=3))
    a, b, c = corner
    return v[None, a:a + size, b:b + size, c:c + size].copy()


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.5
    p_scale: float = 0.5
    p_noise: float = 0.5
    p_flip: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    max_noise: float = 0.1
    label_preserving: bool = True

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def _draw_ops(rng: np.random.Generator, cfg: AugmentConfig):
    # every draw happens unconditionally so the stream layout never depends on outcomes
    u = rng.uniform(size=4)
    rot_axis = int(rng.integers(3))
    flip_axis = int(rng.integers(3))
    factor = rng.uniform(*cfg.scale_range)
    noise_sigma = rng.uniform(0.0, cfg.max_noise)
    ops = []
    if u[0] < cfg.p_rotate and not cfg.label_preserving:
        ops.append(("rot90", rot_axis))
    if u[3] < cfg.p_flip:
        ops.append(("flip", LR if cfg.label_preserving else flip_axis))
    return ops, (u[1] < cfg.p_scale, factor), (u[2] < cfg.p_noise, noise_sigma)


def _rot_axes(axis: int) -> tuple[int, int]:
    return tuple(a for a in range(3) if a != axis)


def _apply_geometry(v: np.ndarray, ops) -> np.ndarray:
    for kind, axis in ops:
        if kind == "flip":
            v = np.flip(v, axis=axis)
        else:
            v = np.rot90(v, k=1, axes=_rot_axes(axis))
    return np.ascontiguousarray(v)


def transform_point(p, ops, size: int) -> tuple[float, ...]:
    """Where a voxel coordinate ends up after :func:`_apply_geometry`."""
    p = list(p)
    n1 = size - 1
    for kind, axis in ops:
        if kind == "flip":
            p[axis] = n1 - p[axis]
        else:
            a, b = _rot_axes(axis)
            p[a], p[b] = n1 - p[b], p[a]
    return tuple(p)


def _augment(v: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig):
    ops, (do_scale, factor), (do_noise, sigma) = _draw_ops(rng, cfg)
    out = _apply_geometry(v, ops)
    if do_scale:
        out = out * np.float32(factor)
    noise = rng.normal(0.0, 1.0, size=out.shape)
    if do_noise:
        out = out + (sigma * noise).astype(out.dtype)
    return out.astype(v.dtype, copy=False), ops


def augment(v: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    return _augment(v, rng, config)[0]


def augment_case(case: Case, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    """Augment a case volume and remap lesion regions under any geometric moves."""
    out, ops = _augment(case.volume, rng, config)
    if not ops or config.label_preserving:
        return out, case.record
    size = case.volume.shape[0]
    regions = tuple(dict.fromkeys(region_of_point(transform_point(b.center, ops, size), size) for b in case.blobs))
    r = case.record
    return out, TabularRecord(r.age_at_diagnosis, r.gender, regions)


# -- dataset -----------------------------------------------------------------


@dataclass
class Dataset:
    cases: list[Case]
    train: list[int]
    test: list[int]

    def split_of(self, i: int) -> str:
        return "train" if i in set(self.train) else "test"

    @property
    def train_cases(self) -> list[Case]:
        return [self.cases[i] for i in self.train]

    @property
    def test_cases(self) -> list[Case]:
        return [self.cases[i] for i in self.test]


def split_dataset(cases: Sequence[Case], rng) -> Dataset:
    """Seeded 80/20 case-level shuffle split."""
    n = len(cases)
    if n < 5:
        raise ContractError(f"need at least 5 cases for an 80/20 split, got {n}")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    order = rng.permutation(n)
    n_train = n * 4 // 5
    return Dataset(list(cases), sorted(int(i) for i in order[:n_train]), sorted(int(i) for i in order[n_train:]))


# -- on-disk layout ----------------------------------------------------------


def write_case(case: Case, root) -> Path:
    d = Path(root) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    s = case.volume.shape
    (d / "volume.f32").write_bytes(np.ascontiguousarray(case.volume, dtype="<f4").tobytes())
    (d / "shape.txt").write_text(f"{s[0]} {s[1]} {s[2]}\n")
    (d / "record.json").write_text(json.dumps(case.record.to_json(), indent=2) + "\n")
    blobs = [{"region": b.region.value, "center": list(b.center), "sigma": b.sigma, "amplitude": b.amplitude}
             for b in case.blobs]
    (d / "blobs.json").write_text(json.dumps(blobs, indent=2) + "\n")
    return d


def read_case(d) -> Case:
    d = Path(d)
    shape = tuple(int(x) for x in (d / "shape.txt").read_text().split())
    vol = np.frombuffer((d / "volume.f32").read_bytes(), dtype="<f4").reshape(shape).astype(np.float32)
    record = TabularRecord.from_json(json.loads((d / "record.json").read_text()))
    blobs = []
    if (d / "blobs.json").exists():
        blobs = [Blob(Region(b["region"]), tuple(b["center"]), b["sigma"], b["amplitude"])
                 for b in json.loads((d / "blobs.json").read_text())]
    return Case(d.name, vol, record, blobs)


def write_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for c in ds.cases:
        write_case(c, root)
    split = {c.case_id: ds.split_of(i) for i, c in enumerate(ds.cases)}
    (root / "split.json").write_text(json.dumps(split, indent=2, sort_keys=True) + "\n")


def read_dataset(root) -> Dataset:
    root = Path(root)
    split = json.loads((root / "split.json").read_text())
    ids = sorted(split)
    cases = [read_case(root / cid) for cid in ids]
    train = [i for i, cid in enumerate(ids) if split[cid] == "train"]
    test = [i for i, cid in enumerate(ids) if split[cid] == "test"]
    return Dataset(cases, train, test)
