"""Ranking metrics, latent independence and 2-D projection export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# legend roles of the concept scatter plot
CONCEPT_COLORS = {"year": "pink", "director": "green", "actor": "blue", "genre": "yellow"}


def _discounts(n: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, n + 2))


def top_k(scores, foldin_items, k: int) -> np.ndarray:
    """Top-``k`` item indices; fold-in items are never returned.

    Ties are broken by item index (stable sort), so the ranking is invariant
    under any strictly increasing transform of ``scores``.
    """
    s = np.asarray(scores, dtype=float).copy()
    s[np.asarray(foldin_items, dtype=np.int64)] = -np.inf
    order = np.argsort(-s, kind="stable")[:k]
    return order[np.isfinite(s[order])]


def ndcg_at_k(scores, foldin_items, target_items, k: int) -> float:
    """Truncated NDCG with binary relevance; ``nan`` when there are no targets."""
    targets = np.asarray(target_items, dtype=np.int64)
    if targets.size == 0:
        return float("nan")
    ranked = top_k(scores, foldin_items, k)
    hits = np.isin(ranked, targets)
    dcg = float(np.sum(_discounts(len(ranked))[hits]))
    idcg = float(np.sum(_discounts(min(k, targets.size))))
    return dcg / idcg


def recall_at_k(scores, foldin_items, target_items, k: int) -> float:
    """Hits in the top ``k`` over ``min(k, |targets|)``; ``nan`` when there are no targets."""
    targets = np.asarray(target_items, dtype=np.int64)
    if targets.size == 0:
        return float("nan")
    ranked = top_k(scores, foldin_items, k)
    return float(np.isin(ranked, targets).sum()) / min(k, targets.size)


@dataclass
class RankingResult:
    per_user: dict
    metrics: dict
    ks: tuple
    n_users: int
    skipped: list = field(default_factory=list)


def evaluate_rankings(scores: np.ndarray, foldin: Sequence, targets: Sequence,
                      ndcg_ks=(50, 100), recall_ks=(20, 50), user_ids=None) -> RankingResult:
    """Macro-averaged metrics over a batch of users (one row of ``scores`` each).

    Users without targets are excluded from the averages and listed in
    ``skipped``.
    """
    scores = np.array(scores, dtype=float, copy=True)
    n_users, n_items = scores.shape
    user_ids = list(range(n_users)) if user_ids is None else list(user_ids)
    rows = np.repeat(np.arange(n_users), [len(f) for f in foldin])
    if len(rows):
        scores[rows, np.concatenate([np.asarray(f, dtype=np.int64) for f in foldin])] = -np.inf
    kmax = min(max((*ndcg_ks, *recall_ks)), n_items)
    ranked = np.argsort(-scores, axis=1, kind="stable")[:, :kmax]
    finite = np.isfinite(np.take_along_axis(scores, ranked, axis=1))
    rel = np.zeros((n_users, n_items), dtype=bool)
    n_t = np.array([len(t) for t in targets])
    trows = np.repeat(np.arange(n_users), n_t)
    if len(trows):
        rel[trows, np.concatenate([np.asarray(t, dtype=np.int64) for t in targets])] = True
    hits = np.take_along_axis(rel, ranked, axis=1) & finite
    valid = n_t > 0
    disc = _discounts(kmax)
    cum_disc = np.concatenate([[0.0], np.cumsum(_discounts(max(kmax, 1)))])

    per_user = {}
    for k in ndcg_ks:
        kk = min(k, kmax)
        dcg = (hits[:, :kk] * disc[:kk]).sum(axis=1)
        idcg = cum_disc[np.minimum(np.minimum(k, n_t), kmax)]
        with np.errstate(invalid="ignore", divide="ignore"):
            per_user[f"ndcg@{k}"] = np.where(valid, dcg / np.where(idcg > 0, idcg, 1), np.nan)
    for k in recall_ks:
        kk = min(k, kmax)
        with np.errstate(invalid="ignore", divide="ignore"):
            per_user[f"recall@{k}"] = np.where(valid, hits[:, :kk].sum(axis=1) / np.maximum(np.minimum(k, n_t), 1), np.nan)
    metrics = {name: float(np.mean(v[valid])) if valid.any() else float("nan") for name, v in per_user.items()}
    skipped = [user_ids[i] for i in np.flatnonzero(~valid)]
    return RankingResult(per_user, metrics, tuple(sorted({*ndcg_ks, *recall_ks})), int(valid.sum()), skipped)


# --------------------------------------------------------------------------
# independence


def independence_score(Z, return_excluded: bool = False):
    """``1 - mean |corr|`` over all pairs of columns of ``Z`` (n_samples x d).

    Constant columns are excluded; with ``return_excluded`` their indices are
    returned alongside the score.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] < 2:
        raise ValueError("independence needs at least two dimensions")
    if Z.shape[0] < 2:
        raise ValueError("independence needs at least two samples")
    std = Z.std(axis=0)
    constant = np.flatnonzero(std <= 1e-12 * (1 + np.abs(Z).max(axis=0)))
    keep = np.setdiff1d(np.arange(Z.shape[1]), constant)
    if keep.size < 2:
        raise ValueError("fewer than two non-constant dimensions")
    corr = np.corrcoef(Z[:, keep], rowvar=False)
    iu = np.triu_indices(keep.size, k=1)
    score = float(1.0 - np.abs(corr[iu]).mean())
    return (score, constant.tolist()) if return_excluded else score


def concept_independence(blocks, names: Sequence[str], whole_vector: bool = False) -> dict:
    """Independence within each concept block of ``blocks`` (n x k x d).

    With ``whole_vector`` the flattened ``k*d`` representation is scored too.
    """
    blocks = np.asarray(blocks, dtype=float)
    out = {name: independence_score(blocks[:, i, :]) for i, name in enumerate(names)}
    out["mean"] = float(np.mean([out[n] for n in names]))
    if whole_vector:
        out["whole"] = independence_score(blocks.reshape(len(blocks), -1))
    return out


# --------------------------------------------------------------------------
# projection


def project_blocks(blocks, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Embed every ``(user, concept)`` block vector jointly into 2-D.

    Returns an array of shape ``(n_users * k, 2)`` in user-major order.
    """
    blocks = np.asarray(blocks, dtype=float)
    n, k, d = blocks.shape
    flat = blocks.reshape(n * k, d)
    if method == "pca":
        from sklearn.decomposition import PCA

        if flat.shape[0] < 2:
            raise ValueError("PCA projection needs at least two points")
        coords = PCA(n_components=min(2, d), svd_solver="full").fit_transform(flat)
        if coords.shape[1] < 2:
            coords = np.hstack([coords, np.zeros((len(coords), 1))])
        return coords
    if method == "tsne":
        from sklearn.manifold import TSNE

        if flat.shape[0] < 4:
            raise ValueError(f"t-SNE projection needs at least 4 points, got {flat.shape[0]}")
        perplexity = min(30.0, (flat.shape[0] - 1) / 3.0)
        return TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed).fit_transform(flat)
    raise ValueError(f"unknown projection method {method!r}")


def write_projection(coords, names: Sequence[str], user_ids: Sequence, out_path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    k = len(names)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["x", "y", "concept", "user_id"])
        for row, (x, y) in enumerate(coords):
            w.writerow([f"{x:.6f}", f"{y:.6f}", names[row % k], user_ids[row // k]])
    return out_path


def silhouette_by_concept(coords, k: int) -> float:
    from sklearn.metrics import silhouette_score

    labels = np.tile(np.arange(k), len(coords) // k)
    return float(silhouette_score(coords, labels))
