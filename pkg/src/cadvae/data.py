"""Rating logs to implicit-feedback datasets, concept schemas and user features."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .graph import check_acyclic

UNKNOWN = -1
POSITIVE_THRESHOLD = 4.0
MIN_USER_INTERACTIONS = 5
CONCEPTS = ("year", "director", "genre", "actor")
DEFAULT_EDGES = (("director", "genre"), ("genre", "actor"))


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class RatingTable:
    """Raw rating records with dense ids (sorted by original id)."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    user_ids: np.ndarray  # dense index -> original id
    item_ids: np.ndarray

    def __len__(self):
        return len(self.users)


@dataclass(frozen=True)
class InteractionDataset:
    """Binary user x item interactions plus an optional user split.

    ``rows[u]`` is the sorted array of items user ``u`` interacted with.
    After :func:`split_users`, ``split`` maps ``train``/``validation``/``test``
    to arrays of user indices and ``foldin`` maps each held-out user to the
    sorted items revealed to the encoder; the rest are ranking targets.
    """

    n_users: int
    n_items: int
    rows: tuple
    user_ids: np.ndarray
    item_ids: np.ndarray
    split: dict | None = None
    foldin: dict | None = None
    foldin_fraction: float | None = None
    seed: int | None = None

    def matrix(self, users: Sequence[int] | None = None) -> sparse.csr_matrix:
        users = range(self.n_users) if users is None else users
        return _rows_to_csr([self.rows[u] for u in users], self.n_items)

    def heldout(self, users: Sequence[int]):
        """Return ``(input_matrix, target_rows)`` for held-out users."""
        if self.foldin is None:
            raise DataError("dataset has no fold-in split")
        inputs, targets = [], []
        for u in users:
            inp = self.foldin[int(u)]
            inputs.append(inp)
            targets.append(np.setdiff1d(self.rows[u], inp, assume_unique=True))
        return _rows_to_csr(inputs, self.n_items), targets

    @property
    def nnz(self) -> int:
        return int(sum(len(r) for r in self.rows))


@dataclass(frozen=True)
class ConceptSchema:
    """Concept vocabularies, per-item labels and the prior DAG.

    ``item_labels[i][item]`` is a tuple of category ids in ``[0, m_i)``, or
    ``(UNKNOWN,)`` when the item carries no label for concept ``i``.
    """

    concept_names: tuple
    item_labels: tuple
    category_counts: tuple
    prior_dag: np.ndarray
    category_names: tuple = ()

    @property
    def k(self) -> int:
        return len(self.concept_names)

    @property
    def n_items(self) -> int:
        return len(self.item_labels[0]) if self.item_labels else 0

    def label_matrices(self) -> list[sparse.csr_matrix]:
        """Per concept, an ``n_items x m_i`` matrix spreading unit mass over an item's labels."""
        out = []
        for labels, m in zip(self.item_labels, self.category_counts):
            r, c, v = [], [], []
            for item, labs in enumerate(labels):
                labs = [x for x in labs if x != UNKNOWN]
                for x in labs:
                    r.append(item)
                    c.append(x)
                    v.append(1.0 / len(labs))
            out.append(sparse.csr_matrix((v, (r, c)), shape=(len(labels), m)))
        return out


@dataclass(frozen=True)
class UserConceptFeature:
    c: np.ndarray
    histograms: tuple = field(default_factory=tuple)


# --------------------------------------------------------------------------
# ratings


def _detect_delimiter(line: str) -> str | None:
    if "::" in line:
        return "::"
    if "\t" in line:
        return "\t"
    if "," in line:
        return ","
    return None


def load_ratings(path, header: bool = False) -> RatingTable:
    """Parse ``user item rating [timestamp]`` records.

    The delimiter is detected among ``::``, tab and comma (whitespace as a
    last resort). Duplicate ``(user, item)`` pairs keep the highest rating.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"ratings file not found: {path}")
    text = path.read_text(encoding="latin-1").splitlines()
    records = []
    delim = None
    for lineno, line in enumerate(text, start=1):
        if not line.strip():
            continue
        if header and not records and delim is None:
            delim = _detect_delimiter(line)
            header = False
            continue
        if delim is None:
            delim = _detect_delimiter(line)
        parts = line.split(delim) if delim else line.split()
        if len(parts) not in (3, 4):
            raise DataError(f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}")
        try:
            u, i = int(parts[0]), int(parts[1])
            r = float(parts[2])
            t = int(float(parts[3])) if len(parts) == 4 else 0
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: cannot parse record {line!r}") from exc
        records.append((u, i, r, t))
    if not records:
        raise DataError(f"{path}: no rating records")

    raw = np.array(records, dtype=float)
    # keep highest rating per pair; ties broken by latest timestamp
    order = np.lexsort((raw[:, 3], raw[:, 2], raw[:, 1], raw[:, 0]))
    raw = raw[order]
    pair = raw[:, :2]
    last = np.ones(len(raw), dtype=bool)
    last[:-1] = np.any(pair[1:] != pair[:-1], axis=1)
    raw = raw[last]
    user_ids, users = np.unique(raw[:, 0].astype(np.int64), return_inverse=True)
    item_ids, items = np.unique(raw[:, 1].astype(np.int64), return_inverse=True)
    return RatingTable(users, items, raw[:, 2], raw[:, 3].astype(np.int64), user_ids, item_ids)


def filter_ratings(table: RatingTable, threshold: float = POSITIVE_THRESHOLD,
                   min_interactions: int = MIN_USER_INTERACTIONS) -> RatingTable:
    """Keep ratings ``>= threshold`` from users with at least ``min_interactions`` of them."""
    keep = table.ratings >= threshold
    while True:
        counts = np.bincount(table.users[keep], minlength=len(table.user_ids))
        drop = keep & (counts[table.users] < min_interactions)
        if not drop.any():
            break
        keep &= ~drop
    if not keep.any():
        raise DataError("empty dataset: no interactions survive filtering")
    users, items = table.users[keep], table.items[keep]
    ukeep, users = np.unique(users, return_inverse=True)
    ikeep, items = np.unique(items, return_inverse=True)
    return RatingTable(users, items, table.ratings[keep], table.timestamps[keep],
                       table.user_ids[ukeep], table.item_ids[ikeep])


def binarize_and_filter(table: RatingTable, threshold: float = POSITIVE_THRESHOLD,
                        min_interactions: int = MIN_USER_INTERACTIONS) -> InteractionDataset:
    table = filter_ratings(table, threshold, min_interactions)
    return from_pairs(table.users, table.items, table.user_ids, table.item_ids)


def from_pairs(users, items, user_ids=None, item_ids=None, n_users=None, n_items=None) -> InteractionDataset:
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    n_users = int(users.max()) + 1 if n_users is None else n_users
    n_items = int(items.max()) + 1 if n_items is None else n_items
    order = np.lexsort((items, users))
    users, items = users[order], items[order]
    bounds = np.searchsorted(users, np.arange(n_users + 1))
    rows = tuple(np.unique(items[bounds[u]:bounds[u + 1]]) for u in range(n_users))
    return InteractionDataset(
        n_users=n_users,
        n_items=n_items,
        rows=rows,
        user_ids=np.arange(n_users) if user_ids is None else np.asarray(user_ids),
        item_ids=np.arange(n_items) if item_ids is None else np.asarray(item_ids),
    )


def _rows_to_csr(rows, n_items: int) -> sparse.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
    data = np.ones(len(indices), dtype=np.float32)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), n_items))


def split_users(dataset: InteractionDataset, ratios=(0.8, 0.1, 0.1),
                foldin_fraction: float = 0.8, seed: int = 0) -> InteractionDataset:
    """Partition users into train/validation/test and fold in held-out users.

    Each held-out user reveals ``round(foldin_fraction * n)`` of their items
    (at least one, leaving at least one target).
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if not 0 < foldin_fraction < 1:
        raise DataError(f"fold-in fraction must lie in (0, 1), got {foldin_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n_users)
    n_train = int(np.floor(ratios[0] * dataset.n_users + 0.5))
    n_val = int(np.floor(ratios[1] * dataset.n_users + 0.5))
    n_val = min(n_val, dataset.n_users - n_train)
    split = {
        "train": np.sort(perm[:n_train]),
        "validation": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    foldin = {}
    for u in np.concatenate([split["validation"], split["test"]]):
        items = dataset.rows[u]
        n = len(items)
        if n < 2:
            raise DataError(f"held-out user {dataset.user_ids[u]} has {n} item(s); cannot fold in")
        n_in = min(max(int(np.floor(foldin_fraction * n + 0.5)), 1), n - 1)
        foldin[int(u)] = np.sort(rng.permutation(items)[:n_in])
    return dataclasses.replace(dataset, split=split, foldin=foldin,
                               foldin_fraction=float(foldin_fraction), seed=int(seed))


# --------------------------------------------------------------------------
# concept schema


def _parse_list(field: str) -> list[str]:
    return [x.strip() for x in field.split(";") if x.strip()]


_ML100K_GENRES = ("unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
                  "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
                  "Romance", "Sci-Fi", "Thriller", "War", "Western")


def read_metadata(path) -> dict[int, dict[str, list[str]]]:
    """Read item metadata into ``{item_id: {concept: [labels]}}``.

    Supports the native format (``item, year, director, genres, actors``
    with ``;``-separated lists; tab, comma or ``|`` delimited) and the
    MovieLens-100k ``u.item`` layout (pipe-separated, 24 fields), from which
    year and genres are taken and director/actor are left unknown.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"metadata file not found: {path}")
    lines = [ln for ln in path.read_text(encoding="latin-1").splitlines() if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty metadata file")
    first = lines[0]
    if first.count("|") == 23:
        return _read_ml100k_items(lines)
    delim = "\t" if "\t" in first else ("|" if "|" in first else ",")
    meta = {}
    for lineno, line in enumerate(lines, start=1):
        parts = [p.strip() for p in line.split(delim)]
        if lineno == 1 and not parts[0].lstrip("-").isdigit():
            continue  # header
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            item = int(parts[0])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: bad item id {parts[0]!r}") from exc
        meta[item] = {
            "year": _parse_list(parts[1]),
            "director": _parse_list(parts[2]),
            "genre": _parse_list(parts[3]),
            "actor": _parse_list(parts[4]),
        }
    return meta


def _read_ml100k_items(lines) -> dict:
    meta = {}
    for line in lines:
        parts = line.split("|")
        # release date first, then a "(YYYY)" suffix on the title
        year = re.search(r"(\d{4})\s*$", parts[2].strip()) or re.search(r"\((\d{4})\)\s*$", parts[1].strip())
        genres = [g for g, flag in zip(_ML100K_GENRES, parts[5:]) if flag.strip() == "1" and g != "unknown"]
        meta[int(parts[0])] = {
            "year": [year.group(1)] if year else [],
            "director": [],
            "genre": genres,
            "actor": [],
        }
    return meta


def _label_sort_key(label: str):
    return (0, int(label), "") if label.lstrip("-").isdigit() else (1, 0, label)


def build_schema(meta: dict, item_ids: Sequence[int], edges: Iterable | None = None,
                 concepts: Sequence[str] = CONCEPTS) -> ConceptSchema:
    """Assemble a :class:`ConceptSchema` for the dataset's items (in dense order)."""
    concepts = tuple(concepts)
    edges = DEFAULT_EDGES if edges is None else tuple(edges)
    index = {name: i for i, name in enumerate(concepts)}
    dag = np.zeros((len(concepts), len(concepts)), dtype=np.int64)
    for src, dst in edges:
        if src not in index or dst not in index:
            raise DataError(f"edge {src}->{dst} names an unknown concept")
        dag[index[src], index[dst]] = 1
    check_acyclic(dag, concepts)

    labels_all, counts, vocabs = [], [], []
    for name in concepts:
        vocab = sorted({lab for rec in meta.values() for lab in rec.get(name, [])}, key=_label_sort_key)
        lookup = {lab: j for j, lab in enumerate(vocab)}
        labels = []
        for item in item_ids:
            labs = meta.get(int(item), {}).get(name, [])
            ids = tuple(sorted({lookup[x] for x in labs}))
            labels.append(ids if ids else (UNKNOWN,))
        labels_all.append(tuple(labels))
        counts.append(len(vocab))
        vocabs.append(tuple(vocab))
    return ConceptSchema(concepts, tuple(labels_all), tuple(counts), dag, tuple(vocabs))


def load_concept_schema(path, item_ids: Sequence[int], edges: Iterable | None = None) -> ConceptSchema:
    """Read item metadata and build the four-concept schema.

    Default edges are director -> genre and genre -> actor; ``edges``
    overrides them (an empty sequence gives an edgeless graph).
    """
    return build_schema(read_metadata(path), item_ids, edges)


# --------------------------------------------------------------------------
# user concept features


def concentration(hist: np.ndarray, m: int) -> float:
    """Normalized Herfindahl index of a category histogram, in [0, 1]."""
    total = hist.sum()
    if total <= 0 or m == 0:
        return 0.0
    if m == 1:
        return 1.0
    h = float(np.dot(hist, hist))
    return float(np.clip((h - 1.0 / m) / (1.0 - 1.0 / m), 0.0, 1.0))


def build_user_concept_features(items: Sequence[int], schema: ConceptSchema) -> UserConceptFeature:
    items = list(items)
    if not items:
        raise DataError("user has no interactions")
    hists, c = [], []
    for labels, m in zip(schema.item_labels, schema.category_counts):
        hist = np.zeros(m)
        for item in items:
            labs = [x for x in labels[item] if x != UNKNOWN]
            for x in labs:
                hist[x] += 1.0 / len(labs)
        if hist.sum() > 0:
            hist /= hist.sum()
        hists.append(hist)
        c.append(concentration(hist, m))
    return UserConceptFeature(np.array(c), tuple(hists))


def feature_matrices(X: sparse.spmatrix, schema: ConceptSchema, label_mats=None):
    """Vectorized features for a batch of users.

    Returns ``(histograms, c)`` where ``histograms`` is a list of
    ``n_users x m_i`` arrays and ``c`` is ``n_users x k``.
    """
    label_mats = schema.label_matrices() if label_mats is None else label_mats
    X = sparse.csr_matrix(X, dtype=np.float64)
    X.data[:] = 1.0
    hists, cols = [], []
    for L, m in zip(label_mats, schema.category_counts):
        H = np.asarray((X @ L).todense()) if m else np.zeros((X.shape[0], 0))
        tot = H.sum(axis=1, keepdims=True)
        H = np.divide(H, tot, out=np.zeros_like(H), where=tot > 0)
        if m == 0:
            cc = np.zeros(X.shape[0])
        elif m == 1:
            cc = (tot[:, 0] > 0).astype(float)
        else:
            cc = np.clip(((H * H).sum(axis=1) - 1.0 / m) / (1.0 - 1.0 / m), 0.0, 1.0)
            cc[tot[:, 0] <= 0] = 0.0
        hists.append(H)
        cols.append(cc)
    return hists, np.stack(cols, axis=1)


# --------------------------------------------------------------------------
# on-disk format


def save_dataset(dataset: InteractionDataset, schema: ConceptSchema, out_dir) -> Path:
    """Write ``interactions.tsv``, ``split.json`` and ``schema.json`` to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w") as fh:
        fh.write("user\titem\tvalue\n")
        for u, row in enumerate(dataset.rows):
            for i in row:
                fh.write(f"{u}\t{int(i)}\t1\n")
    split = {
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "user_ids": [int(x) for x in dataset.user_ids],
        "item_ids": [int(x) for x in dataset.item_ids],
        "seed": dataset.seed,
        "foldin_fraction": dataset.foldin_fraction,
        "split": {k: [int(u) for u in v] for k, v in (dataset.split or {}).items()},
        "foldin": {str(u): [int(i) for i in v] for u, v in sorted((dataset.foldin or {}).items())},
    }
    (out / "split.json").write_text(json.dumps(split, sort_keys=True) + "\n")
    schema_doc = {
        "concepts": list(schema.concept_names),
        "prior_dag": schema.prior_dag.tolist(),
        "category_counts": list(schema.category_counts),
        "category_names": [list(v) for v in schema.category_names],
        "item_labels": [[list(labs) for labs in per] for per in schema.item_labels],
    }
    (out / "schema.json").write_text(json.dumps(schema_doc, sort_keys=True) + "\n")
    return out


def load_dataset(data_dir) -> tuple[InteractionDataset, ConceptSchema]:
    d = Path(data_dir)
    for name in ("interactions.tsv", "split.json", "schema.json"):
        if not (d / name).exists():
            raise FileNotFoundError(f"missing {name} in dataset directory {d}")
    meta = json.loads((d / "split.json").read_text())
    tri = np.loadtxt(d / "interactions.tsv", dtype=np.int64, skiprows=1, ndmin=2)
    ds = from_pairs(tri[:, 0], tri[:, 1], meta["user_ids"], meta["item_ids"],
                    n_users=meta["n_users"], n_items=meta["n_items"])
    if meta["split"]:
        ds = dataclasses.replace(
            ds,
            split={k: np.asarray(v, dtype=np.int64) for k, v in meta["split"].items()},
            foldin={int(u): np.asarray(v, dtype=np.int64) for u, v in meta["foldin"].items()},
            foldin_fraction=meta["foldin_fraction"],
            seed=meta["seed"],
        )
    sd = json.loads((d / "schema.json").read_text())
    schema = ConceptSchema(
        tuple(sd["concepts"]),
        tuple(tuple(tuple(labs) for labs in per) for per in sd["item_labels"]),
        tuple(sd["category_counts"]),
        np.asarray(sd["prior_dag"], dtype=np.int64),
        tuple(tuple(v) for v in sd["category_names"]),
    )
    check_acyclic(schema.prior_dag, schema.concept_names)
    return ds, schema
