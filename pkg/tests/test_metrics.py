import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cadvae.metrics import (
    CONCEPT_COLORS,
    concept_independence,
    evaluate_rankings,
    independence_score,
    ndcg_at_k,
    project_blocks,
    recall_at_k,
    top_k,
    write_projection,
)


def brute_force(scores, foldin, targets, k):
    """Reference NDCG/recall written from the definitions, no numpy tricks."""
    candidates = [i for i in range(len(scores)) if i not in set(foldin)]
    ranked = sorted(candidates, key=lambda i: (-scores[i], i))[:k]
    tset = set(targets)
    dcg = sum(1.0 / math.log2(r + 2) for r, i in enumerate(ranked) if i in tset)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(tset))))
    hits = sum(1 for i in ranked if i in tset)
    return dcg / idcg, hits / min(k, len(tset))


def test_ndcg_second_place():
    scores = np.array([0.9, 0.5, 0.1, 0.0])
    assert ndcg_at_k(scores, [], [1], 10) == pytest.approx(0.63093, abs=1e-5)
    assert ndcg_at_k(scores, [], [0], 10) == 1.0
    assert ndcg_at_k(scores, [], [1], 1) == 0.0


def test_recall_examples():
    scores = np.array([5.0, 4.0, 3.0, 2.0, 1.0])
    assert recall_at_k(scores, [], [0, 4], 2) == 0.5
    assert recall_at_k(scores, [], [0, 1, 2, 3], 2) == 1.0  # normalized by min(k, |targets|)
    assert recall_at_k(scores, [0], [1], 1) == 1.0  # fold-in skipped
    assert math.isnan(recall_at_k(scores, [], [], 3))
    assert math.isnan(ndcg_at_k(scores, [], [], 3))


def test_foldin_never_ranked():
    scores = np.arange(10.0)
    assert list(top_k(scores, [9, 8], 3)) == [7, 6, 5]
    assert list(top_k(scores, list(range(8)), 5)) == [9, 8]


def test_brute_force_agreement():
    rng = np.random.default_rng(0)
    n_items = 30
    for trial in range(1000):
        scores = rng.integers(0, 6, n_items).astype(float) if trial % 3 == 0 else rng.normal(size=n_items)
        perm = rng.permutation(n_items)
        n_in = int(rng.integers(0, 10))
        foldin = perm[:n_in]
        targets = perm[n_in:n_in + int(rng.integers(1, 12))]
        k = int(rng.integers(1, 40))
        nd, rc = brute_force(scores, foldin, targets, k)
        assert ndcg_at_k(scores, foldin, targets, k) == pytest.approx(nd, abs=1e-12)
        assert recall_at_k(scores, foldin, targets, k) == pytest.approx(rc, abs=1e-12)
        res = evaluate_rankings(scores[None], [foldin], [targets], (k,), (k,))
        assert res.metrics[f"ndcg@{k}"] == pytest.approx(nd, abs=1e-12)
        assert res.metrics[f"recall@{k}"] == pytest.approx(rc, abs=1e-12)


def test_batch_macro_average_and_skip():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=(6, 25))
    foldin = [rng.choice(25, 3, replace=False) for _ in range(6)]
    targets = [np.setdiff1d(rng.choice(25, 5, replace=False), f) for f in foldin]
    targets[2] = np.array([], dtype=np.int64)
    res = evaluate_rankings(scores, foldin, targets, (10,), (5,), user_ids=list("abcdef"))
    expected = np.mean([brute_force(scores[u], foldin[u], targets[u], 10)[0] for u in range(6) if u != 2])
    assert res.metrics["ndcg@10"] == pytest.approx(expected, abs=1e-12)
    assert res.skipped == ["c"] and res.n_users == 5


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 20))
def test_monotone_transform_invariance(seed, k):
    rng = np.random.default_rng(seed)
    scores = rng.normal(size=20)
    foldin, targets = [0, 3], [1, 5, 7, 11]
    for f in (lambda s: 3 * s + 1, np.exp, lambda s: s ** 3):
        assert ndcg_at_k(f(scores), foldin, targets, k) == pytest.approx(ndcg_at_k(scores, foldin, targets, k))
        assert recall_at_k(f(scores), foldin, targets, k) == recall_at_k(scores, foldin, targets, k)


def test_independence_examples():
    rng = np.random.default_rng(2)
    x = rng.normal(size=500)
    assert independence_score(np.column_stack([x, x])) == pytest.approx(0.0, abs=1e-12)
    assert independence_score(np.column_stack([x, -x])) == pytest.approx(0.0, abs=1e-12)
    # two centered orthonormal directions give an exact correlation of -0.5
    q, _ = np.linalg.qr(np.column_stack([np.ones(500), rng.normal(size=(500, 2))]))
    u, w = q[:, 1], q[:, 2]
    y = -0.5 * u + math.sqrt(0.75) * w
    assert independence_score(np.column_stack([u, y])) == pytest.approx(0.5, abs=1e-12)
    assert independence_score(rng.normal(size=(10_000, 8))) >= 0.95


def test_independence_affine_invariance():
    rng = np.random.default_rng(3)
    Z = rng.normal(size=(300, 4)) @ rng.normal(size=(4, 4))
    scaled = Z * np.array([2.0, -0.5, 10.0, 3.0]) + np.array([1.0, 2.0, -3.0, 0.0])
    assert independence_score(scaled) == pytest.approx(independence_score(Z), abs=1e-12)


def test_independence_constant_columns():
    rng = np.random.default_rng(4)
    Z = np.column_stack([rng.normal(size=100), np.full(100, 3.0), rng.normal(size=100)])
    score, excluded = independence_score(Z, return_excluded=True)
    assert excluded == [1]
    assert score == pytest.approx(independence_score(Z[:, [0, 2]]))
    with pytest.raises(ValueError):
        independence_score(rng.normal(size=(10, 1)))


def test_concept_independence_keys():
    blocks = np.random.default_rng(5).normal(size=(50, 4, 3))
    out = concept_independence(blocks, ["year", "director", "genre", "actor"], whole_vector=True)
    assert set(out) == {"year", "director", "genre", "actor", "mean", "whole"}


def test_projection_cardinality_and_determinism(tmp_path):
    blocks = np.random.default_rng(6).normal(size=(25, 4, 5))
    a = project_blocks(blocks, "pca")
    assert a.shape == (100, 2)
    assert np.array_equal(a, project_blocks(blocks, "pca"))
    names = ["year", "director", "genre", "actor"]
    path = write_projection(a, names, [f"u{i}" for i in range(25)], tmp_path / "p.tsv")
    lines = path.read_text().splitlines()
    assert lines[0].split("\t") == ["x", "y", "concept", "user_id"]
    assert len(lines) == 101
    assert [ln.split("\t")[2] for ln in lines[1:5]] == names
    assert sorted(CONCEPT_COLORS) == sorted(names)


def test_tsne_projection():
    blocks = np.random.default_rng(7).normal(size=(10, 2, 3))
    a = project_blocks(blocks, "tsne", seed=1)
    assert a.shape == (20, 2)
    assert np.allclose(a, project_blocks(blocks, "tsne", seed=1))
    with pytest.raises(ValueError):
        project_blocks(blocks[:1, :1], "tsne")
    with pytest.raises(ValueError):
        project_blocks(blocks, "umap")
