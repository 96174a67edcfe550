import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clip3d.errors import ContractError
from clip3d.synthdata import generate_cases
from clip3d.text import REGIONS, Region
from clip3d.trainer import TrainConfig, build_model
from clip3d.zeroshot import (
    Ranking,
    auc_ovr,
    average_precision,
    binary_auc,
    classify_zero_shot,
    cosine_scores,
    evaluate,
    export_embeddings,
    random_baseline,
    reciprocal_rank,
    retrieval_metrics,
    retrieve,
)

F, P, T, O, C = REGIONS


def brute_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def brute_ap(relevant):
    hits, precisions = 0, []
    for k, r in enumerate(relevant, start=1):
        if r:
            hits += 1
            precisions.append(hits / k)
    return sum(precisions) / len(precisions)


def unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# -- AUC ---------------------------------------------------------------------


def test_auc_hand_example():
    assert binary_auc(np.array([0.2, 0.7, 0.5, 0.4]), np.array([1, 0, 1, 0], bool)) == 0.25


def test_auc_perfect_and_ties():
    y = np.array([0, 0, 1, 1], bool)
    assert binary_auc(np.array([0.1, 0.2, 0.8, 0.9]), y) == 1.0
    assert binary_auc(np.full(4, 0.3), y) == 0.5


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(2, 50))
def test_auc_matches_pair_counting(seed, n):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.uniform(size=n), 1)  # coarse grid forces ties
    y = rng.uniform(size=n) < 0.4
    if y.all() or not y.any():
        y[0] = not y[0]
    assert binary_auc(scores, y) == pytest.approx(brute_auc(scores, y), abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    scores, y = rng.normal(size=30), rng.uniform(size=30) < 0.5
    y[:2] = [True, False]
    assert binary_auc(scores, y) == binary_auc(np.exp(3 * scores) - 7, y)


def test_auc_ovr_skips_and_flags():
    labels = [frozenset({F}), frozenset({F, P}), frozenset({F})]
    scores = np.random.default_rng(0).uniform(size=(3, 5))
    rep = auc_ovr(scores, labels)
    assert set(rep.per_region) == {P}
    assert set(rep.skipped) == {F, T, O, C}
    with pytest.raises(ContractError):
        auc_ovr(scores, [frozenset({F})] * 3)


def test_auc_average_unweighted():
    labels = [frozenset({F}), frozenset({P}), frozenset({F, P})]
    scores = np.array([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0.5, 0.5, 0, 0, 0]], float)
    rep = auc_ovr(scores, labels)
    assert rep.average == pytest.approx(np.mean(list(rep.per_region.values())))


# -- retrieval ---------------------------------------------------------------


def test_rr_and_ap_examples():
    assert reciprocal_rank(np.array([0, 0, 1, 0], bool)) == pytest.approx(1 / 3)
    assert average_precision(np.array([1, 0, 1], bool)) == pytest.approx(5 / 6)
    assert average_precision(np.array([1, 1, 0, 0], bool)) == 1.0


@settings(max_examples=200)
@given(st.lists(st.booleans(), min_size=1, max_size=40).filter(any))
def test_metrics_match_brute_force(rel):
    r = np.array(rel)
    assert average_precision(r) == pytest.approx(brute_ap(rel), abs=1e-12)
    assert reciprocal_rank(r) == 1 / (rel.index(True) + 1)
    rep = retrieval_metrics([Ranking(F, np.arange(len(rel)), r)])
    assert 0 <= rep.accuracy <= rep.mrr <= 1 and 0 <= rep.map <= 1
    relevant_first = rel == sorted(rel, reverse=True)
    assert (rep.map == 1.0) == relevant_first


def test_retrieve_exact_match_first_and_ties():
    rng = np.random.default_rng(1)
    emb = unit(rng, 6, 4)
    emb[4] = emb[1]
    labels = [frozenset({F})] * 6
    rk = retrieve(F, emb[1], emb, labels)
    assert list(rk.order[:2]) == [1, 4]


@given(st.integers(0, 2**32 - 1))
def test_euclid_order_equals_cosine_order(seed):
    rng = np.random.default_rng(seed)
    emb, q = unit(rng, 20, 5), unit(rng, 1, 5)[0]
    labels = [frozenset({F})] * 20
    order = retrieve(F, q, emb, labels).order
    np.testing.assert_array_equal(order, np.argsort(-(emb @ q), kind="stable"))


def test_retrieval_skips_regions_without_relevant():
    rk = [Ranking(F, np.arange(3), np.array([0, 1, 0], bool)), Ranking(P, np.arange(3), np.zeros(3, bool))]
    rep = retrieval_metrics(rk)
    assert rep.skipped == [P] and rep.mrr == 0.5
    with pytest.raises(ContractError):
        retrieval_metrics(rk[1:])


# -- scoring and null models ------------------------------------------------


def test_cosine_scores_bounds_and_identity():
    rng = np.random.default_rng(2)
    img, pr = unit(rng, 10, 8), unit(rng, 5, 8)
    s = cosine_scores(img, pr)
    assert np.abs(s).max() <= 1 + 1e-6
    assert cosine_scores(pr[:1], pr[:1])[0, 0] == pytest.approx(1.0)


def test_random_baseline_levels():
    cases = generate_cases(200, 40)
    labels = [c.record.label_set for c in cases]
    rb = random_baseline(labels, np.random.default_rng(0), repeats=100)
    assert abs(rb["auc"]["mean"] - 0.5) <= 0.02
    assert rb["mrr"]["mean"] >= rb["accuracy"]["mean"]
    # chance top-1 accuracy is the mean region prevalence: 1 - E[(4/5)^n], n ~ U{1,2,3}
    chance = 1 - np.mean([0.8, 0.8**2, 0.8**3])
    prevalence = np.mean([[r in ls for r in REGIONS] for ls in labels])
    assert abs(prevalence - chance) < 0.05
    assert abs(rb["accuracy"]["mean"] - prevalence) < 3 * rb["accuracy"]["sem"] + 0.02


def test_untrained_model_is_null():
    cases = generate_cases(200, 41)
    labels = [c.record.label_set for c in cases]
    aucs = []
    for seed in range(5):
        model = build_model(TrainConfig(seed=seed))
        aucs.append(auc_ovr(classify_zero_shot([c.volume for c in cases], model), labels).average)
    assert abs(np.mean(aucs) - 0.5) <= 0.05


# -- report and export -------------------------------------------------------


@pytest.fixture(scope="module")
def model_and_cases():
    return build_model(TrainConfig()), generate_cases(20, 42)


def test_evaluate_schema(model_and_cases):
    model, cases = model_and_cases
    rep = evaluate(model, cases, seeds=3, baseline_repeats=10)
    auc = rep["classification"]["auc"]
    assert set(auc) == {r.value for r in REGIONS} | {"average"}
    for v in auc.values():
        assert "sem" in v
    for key in ("mrr", "map", "accuracy"):
        assert set(rep["retrieval"][key]) == {"mean", "sem"}
    assert rep["seeds"] == 3 and rep["n_cases"] == 20
    assert set(rep["random_baseline"]) == {"auc", "mrr", "map", "accuracy"}


def test_evaluate_deterministic(model_and_cases):
    model, cases = model_and_cases
    assert evaluate(model, cases, seeds=2, baseline_repeats=5) == evaluate(model, cases, seeds=2, baseline_repeats=5)


def test_export_embeddings(model_and_cases, tmp_path):
    model, cases = model_and_cases
    img = model.embed_volumes([c.volume for c in cases])
    txt = model.embed_texts(["x"] * len(cases))
    path = export_embeddings([c.case_id for c in cases], [c.record.label_set for c in cases], img, txt,
                             tmp_path / "e.csv")
    with path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:4] == ["case_id", "modality", "label_set", "e_0"] and rows[0][-1] == f"e_{model.dim - 1}"
    body = rows[1:]
    assert len(body) == 2 * len(cases)
    for a, b in zip(body[::2], body[1::2]):
        assert a[0] == b[0] and (a[1], b[1]) == ("image", "text")
    vecs = np.array([[float(x) for x in r[3:]] for r in body])
    np.testing.assert_allclose(np.linalg.norm(vecs, axis=1), 1.0, atol=1e-5)


def test_export_unwritable(model_and_cases, tmp_path):
    model, cases = model_and_cases
    e = np.zeros((1, model.dim))
    with pytest.raises(OSError):
        export_embeddings(["a"], [frozenset({Region.FRONTAL})], e, e, tmp_path / "missing" / "e.csv")
