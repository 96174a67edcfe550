"""Zero-shot classification and retrieval metrics over region prompts.

Cases are scored per scan as a multi-label problem: a scan is a positive for
region ``r`` whenever ``r`` is among its lesion regions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ContractError
from .synthdata import AugmentConfig, augment, preprocess
from .text import REGIONS, Region

LabelSets = Sequence[frozenset]


def label_matrix(labels: LabelSets, regions: Sequence[Region] = REGIONS) -> np.ndarray:
    return np.array([[r in ls for r in regions] for ls in labels], dtype=bool).reshape(len(labels), len(regions))


# -- classification ----------------------------------------------------------


def cosine_scores(image_emb: np.ndarray, prompt_emb: np.ndarray) -> np.ndarray:
    """Score matrix (cases x regions); rows of both inputs are unit norm."""
    return np.asarray(image_emb, dtype=np.float64) @ np.asarray(prompt_emb, dtype=np.float64).T


def classify_zero_shot(volumes, model, regions: Sequence[Region] = REGIONS, normalized: bool = False) -> np.ndarray:
    return cosine_scores(model.embed_volumes(volumes, normalized=normalized), model.embed_prompts(regions))


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    positive = np.asarray(positive, dtype=bool)
    p = int(positive.sum())
    n = positive.size - p
    if p == 0 or n == 0:
        raise ContractError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores)
    return (ranks[positive].sum() - p * (p + 1) / 2) / (p * n)


@dataclass
class AUCReport:
    per_region: dict[Region, float]
    average: float
    skipped: list[Region] = field(default_factory=list)


def auc_ovr(scores: np.ndarray, labels: LabelSets, regions: Sequence[Region] = REGIONS) -> AUCReport:
    y = label_matrix(labels, regions)
    per, skipped = {}, []
    for k, r in enumerate(regions):
        pos = y[:, k]
        if pos.all() or not pos.any():
            skipped.append(r)
            continue
        per[r] = binary_auc(scores[:, k], pos)
    if not per:
        raise ContractError("no region has both positive and negative cases")
    return AUCReport(per, float(np.mean(list(per.values()))), skipped)


# -- retrieval ---------------------------------------------------------------


@dataclass
class Ranking:
    query: Region
    order: np.ndarray
    relevant: np.ndarray  # relevance flags in ranked order


def retrieve(region: Region, prompt_emb: np.ndarray, image_emb: np.ndarray, labels: LabelSets) -> Ranking:
    """Rank cases by ascending Euclidean distance to the prompt; ties by case index."""
    d = np.sqrt(((np.asarray(image_emb, np.float64) - np.asarray(prompt_emb, np.float64)) ** 2).sum(axis=1))
    order = np.argsort(d, kind="stable")
    relevant = np.array([region in labels[i] for i in order], dtype=bool)
    return Ranking(Region(region), order, relevant)


def reciprocal_rank(relevant: np.ndarray) -> float:
    hits = np.flatnonzero(relevant)
    return 1.0 / (hits[0] + 1)


def average_precision(relevant: np.ndarray) -> float:
    hits = np.flatnonzero(relevant)
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


@dataclass
class RetrievalReport:
    mrr: float
    map: float
    accuracy: float
    per_region: dict[Region, dict[str, float]]
    skipped: list[Region] = field(default_factory=list)


def retrieval_metrics(rankings: Sequence[Ranking]) -> RetrievalReport:
    per, skipped = {}, []
    for rk in rankings:
        if not rk.relevant.any():
            skipped.append(rk.query)
            continue
        per[rk.query] = {
            "rr": reciprocal_rank(rk.relevant),
            "ap": average_precision(rk.relevant),
            "accuracy": float(rk.relevant[0]),
        }
    if not per:
        raise ContractError("no query has a relevant case")
    vals = list(per.values())
    return RetrievalReport(
        mrr=float(np.mean([v["rr"] for v in vals])),
        map=float(np.mean([v["ap"] for v in vals])),
        accuracy=float(np.mean([v["accuracy"] for v in vals])),
        per_region=per,
        skipped=skipped,
    )


def retrieve_all(prompt_emb: np.ndarray, image_emb: np.ndarray, labels: LabelSets,
                 regions: Sequence[Region] = REGIONS) -> list[Ranking]:
    return [retrieve(r, prompt_emb[k], image_emb, labels) for k, r in enumerate(regions)]


# -- null model --------------------------------------------------------------


def sem(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def random_baseline(labels: LabelSets, rng, repeats: int = 100, regions: Sequence[Region] = REGIONS) -> dict:
    """AUC/MRR/mAP/accuracy of i.i.d. uniform scores, mean and SEM over ``repeats``."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out: dict[str, list[float]] = {"auc": [], "mrr": [], "map": [], "accuracy": []}
    n = len(labels)
    for _ in range(repeats):
        scores = rng.uniform(size=(n, len(regions)))
        out["auc"].append(auc_ovr(scores, labels, regions).average)
        rankings = []
        for k, r in enumerate(regions):
            order = np.argsort(-scores[:, k], kind="stable")
            rankings.append(Ranking(r, order, np.array([r in labels[i] for i in order], dtype=bool)))
        rep = retrieval_metrics(rankings)
        out["mrr"].append(rep.mrr)
        out["map"].append(rep.map)
        out["accuracy"].append(rep.accuracy)
    return {k: {"mean": float(np.mean(v)), "sem": sem(v)} for k, v in out.items()}


# -- export ------------------------------------------------------------------


def export_embeddings(case_ids: Sequence[str], labels: LabelSets, image_emb: np.ndarray,
                      text_emb: np.ndarray, path) -> Path:
    """One image row and one sentence row per case."""
    path = Path(path)
    dim = image_emb.shape[1]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "modality", "label_set"] + [f"e_{k}" for k in range(dim)])
        for cid, ls, ei, et in zip(case_ids, labels, image_emb, text_emb):
            tag = ";".join(r.value for r in REGIONS if r in ls)
            w.writerow([cid, "image", tag] + [repr(float(x)) for x in ei])
            w.writerow([cid, "text", tag] + [repr(float(x)) for x in et])
    return path


# -- full evaluation ---------------------------------------------------------


def _stat(values) -> dict:
    return {"mean": float(np.mean(values)), "sem": sem(values)}


def evaluate(model, cases, seeds: int = 1, baseline_repeats: int = 100, baseline_seed: int = 0) -> dict:
    """Classification + retrieval report over ``seeds`` views of the evaluation cases.

    View 0 is the unaugmented centre patch; view ``s > 0`` first applies the
    label-preserving augmentation drawn from seed ``s``.
    """
    labels = [c.record.label_set for c in cases]
    prompts = model.embed_prompts()
    volumes = [preprocess(c.volume) for c in cases]
    auc_runs: dict[str, list[float]] = {r.value: [] for r in REGIONS}
    auc_avg, ret = [], {"mrr": [], "map": [], "accuracy": []}
    per_ret: dict[str, dict[str, list[float]]] = {r.value: {"rr": [], "ap": [], "accuracy": []} for r in REGIONS}
    skipped_auc: set[str] = set()
    skipped_ret: set[str] = set()
    for s in range(seeds):
        if s == 0:
            views = volumes
        else:
            rng = np.random.default_rng([int(s), 5])
            views = [augment(v, rng, AugmentConfig()) for v in volumes]
        emb = model.embed_volumes(views, normalized=True)
        a = auc_ovr(cosine_scores(emb, prompts), labels)
        auc_avg.append(a.average)
        for r, v in a.per_region.items():
            auc_runs[r.value].append(v)
        skipped_auc.update(r.value for r in a.skipped)
        rep = retrieval_metrics(retrieve_all(prompts, emb, labels))
        ret["mrr"].append(rep.mrr)
        ret["map"].append(rep.map)
        ret["accuracy"].append(rep.accuracy)
        for r, d in rep.per_region.items():
            for k, v in d.items():
                per_ret[r.value][k].append(v)
        skipped_ret.update(r.value for r in rep.skipped)

    def region_entry(vals):
        return _stat(vals) if vals else {"mean": None, "sem": None, "skipped": True}

    auc = {r: region_entry(v) for r, v in auc_runs.items()}
    auc["average"] = _stat(auc_avg)
    return {
        "n_cases": len(cases),
        "seeds": seeds,
        "classification": {"auc": auc, "skipped": sorted(skipped_auc)},
        "retrieval": {
            **{k: _stat(v) for k, v in ret.items()},
            "per_region": {r: {k: region_entry(v) for k, v in d.items()} for r, d in per_ret.items()},
            "skipped": sorted(skipped_ret),
        },
        "random_baseline": random_baseline(labels, np.random.default_rng(baseline_seed), baseline_repeats),
    }
