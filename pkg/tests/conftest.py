import numpy as np
import pytest

from cadvae.data import ConceptSchema, build_schema, from_pairs, split_users

ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def record():
    """Record one acceptance line: ``record(name, ok, detail)``."""

    def _record(name, ok, detail=""):
        ACCEPTANCE[name] = (bool(ok), detail)
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")

    return _record


def write_ratings(path, rows, delim="\t"):
    path.write_text("".join(delim.join(str(x) for x in r) + "\n" for r in rows))
    return path


@pytest.fixture
def tiny_files(tmp_path):
    """Ratings and metadata for 12 users x 10 items, all users above the filter."""
    rng = np.random.default_rng(7)
    rows = []
    for u in range(1, 13):
        items = rng.choice(np.arange(1, 11), size=8, replace=False)
        for i in items:
            rows.append((u, int(i), int(rng.integers(3, 6)), 880000000 + u * 100 + int(i)))
    ratings = write_ratings(tmp_path / "ratings.tsv", rows)
    meta_lines = []
    for i in range(1, 11):
        meta_lines.append(f"{i}\t{1990 + i % 3}\t{100 + i % 2}\t{i % 4};{(i + 1) % 4}\t{i % 5}")
    meta = tmp_path / "items.tsv"
    meta.write_text("\n".join(meta_lines) + "\n")
    return ratings, meta


@pytest.fixture(scope="session")
def small_world():
    """Random 60-user dataset with a four-concept schema, already split."""
    rng = np.random.default_rng(3)
    n_users, n_items = 60, 40
    users, items = [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=rng.integers(6, 15), replace=False)
        users.extend([u] * len(chosen))
        items.extend(chosen.tolist())
    ds = from_pairs(users, items, n_users=n_users, n_items=n_items)
    meta = {
        i: {
            "year": [str(1990 + i % 4)],
            "director": [str(i % 5)] if i % 7 else [],
            "genre": [str(i % 3), str((i + 1) % 6)],
            "actor": [str(i % 6)],
        }
        for i in range(n_items)
    }
    schema = build_schema(meta, range(n_items))
    return split_users(ds, (0.7, 0.15, 0.15), 0.8, seed=0), schema


def make_schema(labels_per_concept, counts, dag=None, names=None) -> ConceptSchema:
    k = len(counts)
    return ConceptSchema(
        tuple(names or (f"c{i}" for i in range(k))),
        tuple(tuple(tuple(l) for l in per) for per in labels_per_concept),
        tuple(counts),
        np.zeros((k, k), dtype=np.int64) if dag is None else np.asarray(dag),
    )
