"""Synthetic interaction data from a known SCM, and brute-force oracles.

Generation, per user:

1. ``eps* ~ N(0, I)`` over ``k x d`` blocks; ``z* = g((I - A*^T)^{-1} eps*)``.
2. Each concept has ``m`` categories with a random prototype vector; the
   user ranks categories by ``z*_i . prototype``.
3. Target label concentrations follow the label SCM ``c = sigmoid(A*^T c)``
   for non-root concepts; roots take ``Phi(eps*_{i,0})``. A category count
   vector with (in expectation) that concentration is assigned along the
   user's preference order.
4. The catalog holds ``items_per_cell`` items for every combination of one
   category per concept. Clicks pair the per-concept label lists at random
   and draw, within each cell, items without replacement with probability
   ``softmax(z* . item_embedding)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit, ndtr

from .data import ConceptSchema, InteractionDataset, from_pairs
from .graph import ElementwiseTransform, causal_transform, check_acyclic


@dataclass
class SyntheticSpec:
    k: int = 3
    d: int = 4
    A: np.ndarray = field(default_factory=lambda: chain_adjacency((0.8, -0.8)))
    g_a: tuple = (1.2, 1.0, 0.9)
    g_b: tuple = (0.0, 0.1, -0.1)
    g_s: tuple = (0.5, -0.4, 0.3)
    n_users: int = 10_000
    categories: int = 3
    items_per_cell: int = 20
    budget: int = 20
    seed: int = 0

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (self.k, self.k):
            raise ValueError(f"A must be {self.k}x{self.k}")
        check_acyclic(self.A != 0)
        if self.budget < 5:
            raise ValueError("click budget must be at least 5")
        if self.budget > self.n_items:
            raise ValueError(f"click budget {self.budget} exceeds catalog size {self.n_items}")
        if self.items_per_cell < self.budget:
            raise ValueError("items_per_cell must be at least the click budget")

    @property
    def n_items(self) -> int:
        return self.items_per_cell * self.categories ** self.k

    @property
    def prior_dag(self) -> np.ndarray:
        return (self.A != 0).astype(np.int64)

    def transform(self) -> ElementwiseTransform:
        return ElementwiseTransform.from_params(self.g_a, self.g_b, self.g_s)


@dataclass
class GroundTruth:
    eps: np.ndarray
    z: np.ndarray
    c_target: np.ndarray
    c: np.ndarray
    A: np.ndarray
    item_embeddings: np.ndarray
    prototypes: np.ndarray


def chain_adjacency(weights) -> np.ndarray:
    k = len(weights) + 1
    A = np.zeros((k, k))
    for i, w in enumerate(weights):
        A[i, i + 1] = w
    return A


def _partitions(total: int, parts: int):
    """Non-increasing count vectors of length ``parts`` summing to ``total``."""
    out = []

    def rec(prefix, remaining, cap, left):
        if left == 1:
            if remaining <= cap:
                out.append(prefix + [remaining])
            return
        for v in range(min(cap, remaining), -1, -1):
            rec(prefix + [v], remaining - v, v, left - 1)

    rec([], total, total, parts)
    return np.array(out, dtype=np.int64)


def _concentration(counts: np.ndarray, m: int) -> np.ndarray:
    h = counts / counts.sum(axis=-1, keepdims=True)
    return np.clip(((h * h).sum(axis=-1) - 1.0 / m) / (1.0 - 1.0 / m), 0.0, 1.0)


def _draw_counts(target: float, table: np.ndarray, conc: np.ndarray, rng) -> np.ndarray:
    # randomize between the two bracketing partitions so the expected concentration hits the target
    i = int(np.searchsorted(conc, target))
    if i == 0:
        return table[0]
    if i >= len(conc):
        return table[-1]
    lo, hi = conc[i - 1], conc[i]
    p_hi = (target - lo) / (hi - lo) if hi > lo else 0.0
    return table[i] if rng.random() < p_hi else table[i - 1]


def gen_synthetic(spec: SyntheticSpec) -> tuple[InteractionDataset, ConceptSchema, GroundTruth]:
    """Generate a dataset, its concept schema and the generating latents."""
    rng = np.random.default_rng(spec.seed)
    k, d, m, B = spec.k, spec.d, spec.categories, spec.budget
    order = check_acyclic(spec.prior_dag)

    eps = rng.standard_normal((spec.n_users, k, d))
    z = causal_transform(eps, spec.A, spec.transform(), order)

    prototypes = rng.standard_normal((k, m, d))
    cells = np.array(list(itertools.product(range(m), repeat=k)), dtype=np.int64)
    cell_of_item = np.repeat(np.arange(len(cells)), spec.items_per_cell)
    item_labels = cells[cell_of_item]  # n_items x k
    item_emb = prototypes[np.arange(k)[None, :], item_labels].reshape(spec.n_items, k * d)
    item_emb += 0.5 * rng.standard_normal(item_emb.shape)

    table = _partitions(B, m)
    conc = _concentration(table, m)
    sort = np.argsort(conc, kind="stable")
    table, conc = table[sort], conc[sort]

    c_target = np.zeros((spec.n_users, k))
    c_real = np.zeros((spec.n_users, k))
    users, items = [], []
    for u in range(spec.n_users):
        counts = np.zeros((k, m), dtype=np.int64)
        for j in order:
            parents = np.flatnonzero(spec.A[:, j])
            if parents.size:
                t = float(expit(spec.A[parents, j] @ c_real[u, parents]))
            else:
                t = float(ndtr(eps[u, j, 0]))
            c_target[u, j] = t
            part = _draw_counts(t, table, conc, rng)
            pref = np.argsort(-(prototypes[j] @ z[u, j]), kind="stable")
            counts[j, pref] = part
            c_real[u, j] = _concentration(part[None, :], m)[0]
        # one label list per concept, paired at random into B cells
        lists = [rng.permutation(np.repeat(np.arange(m), counts[j])) for j in range(k)]
        chosen_cells = np.stack(lists, axis=1)
        logits = item_emb @ z[u].reshape(-1)
        clicked = []
        for cell in np.unique(chosen_cells, axis=0):
            need = int(np.all(chosen_cells == cell, axis=1).sum())
            cell_id = int(np.ravel_multi_index(tuple(cell), (m,) * k))
            pool = np.arange(cell_id * spec.items_per_cell, (cell_id + 1) * spec.items_per_cell)
            w = np.exp(logits[pool] - logits[pool].max())
            clicked.extend(rng.choice(pool, size=need, replace=False, p=w / w.sum()).tolist())
        users.extend([u] * len(clicked))
        items.extend(clicked)

    dataset = from_pairs(users, items, n_users=spec.n_users, n_items=spec.n_items)
    names = tuple(f"concept{i}" for i in range(k))
    schema = ConceptSchema(
        names,
        tuple(tuple((int(item_labels[it, i]),) for it in range(spec.n_items)) for i in range(k)),
        (m,) * k,
        spec.prior_dag,
        tuple(tuple(str(x) for x in range(m)) for _ in range(k)),
    )
    truth = GroundTruth(eps, z, c_target, c_real, spec.A.copy(), item_emb, prototypes)
    return dataset, schema, truth


def dense_linear_solve_oracle(eps, A) -> np.ndarray:
    """Solve ``(I - A^T) m = eps`` with a dense factorization, no graph shortcuts.

    ``eps`` has shape ``(..., k, d)``.
    """
    eps = np.asarray(eps, dtype=float)
    A = np.asarray(A, dtype=float)
    M = np.eye(A.shape[0]) - A.T
    if abs(np.linalg.det(M)) < 1e-12:
        raise np.linalg.LinAlgError("I - A^T is singular")
    flat = np.moveaxis(eps, -2, 0).reshape(A.shape[0], -1)
    sol = np.linalg.solve(M, flat)
    return np.moveaxis(sol.reshape((A.shape[0],) + eps.shape[:-2] + eps.shape[-1:]), 0, -2)


def random_masked_dag(k: int, rng, p: float = 0.5, scale: float = 1.0):
    """Random acyclic mask (upper triangular under a random permutation) and weights."""
    perm = rng.permutation(k)
    upper = np.triu(rng.random((k, k)) < p, k=1)
    mask = np.zeros((k, k), dtype=np.int64)
    mask[np.ix_(perm, perm)] = upper
    A = mask * rng.uniform(-scale, scale, (k, k))
    return mask, A
