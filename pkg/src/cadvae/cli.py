"""Command-line entry points: prepare, train, eval, project, synth, sweep.

Exit codes: 0 success, 2 input error, 3 training divergence, 4 artifact mismatch.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .data import DataError, binarize_and_filter, load_concept_schema, load_dataset, load_ratings, save_dataset, split_users
from .graph import CycleError, export_graph
from .model import Checkpoint, config_hash
from .trainer import TrainConfig, TrainingDiverged, evaluate_model, export_projection, train

EXIT_INPUT = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4

log = logging.getLogger("cadvae")


class ArtifactMismatch(Exception):
    pass


def tool_version() -> str:
    try:
        return version("cadvae")
    except PackageNotFoundError:
        return "0+unknown"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command: str, config: dict, seed, extra: dict | None = None) -> Path:
    """Deterministic run record: identical inputs give byte-identical files."""
    doc = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "tool_version": tool_version(),
    }
    doc.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _edges(text: str | None):
    if text is None:
        return None
    edges = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        src, sep, dst = part.partition(">")
        if not sep:
            raise DataError(f"edge {part!r} must look like parent>child")
        edges.append((src.strip(), dst.strip()))
    return edges


def _data_dir(arg):
    if arg:
        return Path(arg)
    env = os.environ.get("CADVAE_DATA_DIR")
    if env:
        return Path(env)
    raise DataError("no --data given and CADVAE_DATA_DIR is not set")


def _load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    if not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return TrainConfig.from_file(path)


def _check_compatible(ck: Checkpoint, dataset, schema):
    arch = ck.architecture()
    if arch["n_items"] != dataset.n_items:
        raise ArtifactMismatch(f"checkpoint has {arch['n_items']} items, dataset has {dataset.n_items}")
    if tuple(arch["category_counts"]) != tuple(schema.category_counts):
        raise ArtifactMismatch(
            f"checkpoint concept vocabularies {arch['category_counts']} differ from dataset {list(schema.category_counts)}")
    if arch["prior_dag"] != schema.prior_dag.tolist():
        raise ArtifactMismatch("checkpoint prior graph differs from dataset schema")


# --------------------------------------------------------------------------
# subcommands


def cmd_prepare(args) -> int:
    for p in (args.ratings, args.metadata):
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    table = load_ratings(args.ratings, header=args.header)
    dataset = binarize_and_filter(table)
    dataset = split_users(dataset, _floats(args.ratios), args.foldin, args.seed)
    schema = load_concept_schema(args.metadata, dataset.item_ids, _edges(args.edges))
    out = save_dataset(dataset, schema, args.out)
    config = {"ratios": _floats(args.ratios), "foldin": args.foldin, "edges": args.edges, "header": args.header}
    write_manifest(out, "prepare", config, args.seed, {
        "inputs": {"ratings": _sha256(args.ratings), "metadata": _sha256(args.metadata)},
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_interactions": dataset.nnz,
        "split_sizes": {k: int(len(v)) for k, v in dataset.split.items()},
        "concepts": list(schema.concept_names),
        "category_counts": list(schema.category_counts),
    })
    print(f"prepared {dataset.n_users} users x {dataset.n_items} items -> {out}")
    return 0


def _train_run(data_dir, config: TrainConfig, out_dir) -> tuple[Checkpoint, dict]:
    dataset, schema = load_dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "metrics.jsonl"
    log_path.unlink(missing_ok=True)
    (out / "config.txt").write_text(config.to_text())
    try:
        ck = train(dataset, schema, config, log_path=log_path)
    except TrainingDiverged as exc:
        if exc.checkpoint is not None:
            exc.checkpoint.save(out / "last_good")
        write_manifest(out, "train", config.to_dict(), config.seed, {"status": "diverged", "error": str(exc)})
        raise
    ck.save(out / "model")
    export_graph(ck.model.causal, out / "graph.json")
    val = evaluate_model(ck.model, dataset, schema, "validation") if len(dataset.split.get("validation", ())) else {}
    write_manifest(out, "train", config.to_dict(), config.seed, {
        "status": "ok",
        "data": _sha256(Path(data_dir) / "interactions.tsv"),
        "best_epoch": ck.epoch,
        "validation": val,
    })
    return ck, val


def cmd_train(args) -> int:
    config = _load_config(args.config)
    ck, val = _train_run(_data_dir(args.data), config, args.out)
    print(json.dumps({"best_epoch": ck.epoch, "validation": val}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    data_dir = _data_dir(args.data)
    dataset, schema = load_dataset(data_dir)
    ck = Checkpoint.load(args.ckpt)
    _check_compatible(ck, dataset, schema)
    ks = _ints(args.k)
    res = evaluate_model(ck.model, dataset, schema, args.split, ndcg_ks=ks, recall_ks=ks, independence=True)
    metrics = {key: res[key] for key in sorted(res) if key.startswith(("ndcg@", "recall@"))}
    report = {"split": args.split, "k": ks, "metrics": metrics, "independence": res["independence"]}
    if "skipped_users" in res:
        report["skipped_users"] = res["skipped_users"]
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    out = Path(args.out) if args.out else Path(args.ckpt).with_suffix("").parent / f"eval_{args.split}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_project(args) -> int:
    dataset, schema = load_dataset(_data_dir(args.data))
    ck = Checkpoint.load(args.ckpt)
    _check_compatible(ck, dataset, schema)
    path, _ = export_projection(ck, dataset, schema, args.out, method=args.method, seed=args.seed)
    print(f"wrote {dataset.n_users * schema.k} rows -> {path}")
    return 0


def cmd_synth(args) -> int:
    from .synthetic import SyntheticSpec, chain_adjacency, gen_synthetic

    weights = _floats(args.weights)
    k = len(weights) + 1
    kw = dict(k=k, d=args.d, A=chain_adjacency(weights), n_users=args.n_users, budget=args.budget,
              items_per_cell=max(args.budget, args.items_per_cell), seed=args.seed)
    if args.linear or k != 3:
        # identity when --linear, otherwise a fixed mild nonlinearity per concept
        kw.update(g_a=(1.0,) * k, g_b=(0.0,) * k, g_s=(0.0 if args.linear else 0.3,) * k)
    spec = SyntheticSpec(**kw)
    dataset, schema, truth = gen_synthetic(spec)
    dataset = split_users(dataset, _floats(args.ratios), args.foldin, args.seed)
    out = save_dataset(dataset, schema, args.out)
    np.savez(out / "ground_truth.npz", eps=truth.eps, z=truth.z, c=truth.c, A=truth.A)
    write_manifest(out, "synth", {"weights": _floats(args.weights), "d": args.d, "n_users": args.n_users,
                                  "budget": args.budget, "ratios": _floats(args.ratios), "foldin": args.foldin,
                                  "linear": args.linear}, args.seed)
    print(f"synthesized {dataset.n_users} users x {dataset.n_items} items -> {out}")
    return 0


def cmd_sweep(args) -> int:
    from scipy.stats import spearmanr

    data_dir = _data_dir(args.data)
    base = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, schema = load_dataset(data_dir)
    rows = []
    for beta in _floats(args.beta):
        cfg = TrainConfig(**{**base.to_dict(), "beta_max": beta})
        run_dir = out / f"beta_{beta:g}"
        row = {"beta": beta, "independence": float("nan"), "ndcg@100": float("nan"),
               "config_hash": cfg.hash(), "status": "ok"}
        try:
            ck, _ = _train_run(data_dir, cfg, run_dir)
            res = evaluate_model(ck.model, dataset, schema, args.split, independence=True)
            row["independence"] = res["independence"]["mean"]
            row["ndcg@100"] = res["ndcg@100"]
        except Exception as exc:  # one failed run must not stop the sweep
            log.warning("beta=%g failed: %s", beta, exc)
            row["status"] = f"failed: {type(exc).__name__}"
        rows.append(row)
        print(f"beta={beta:g} independence={row['independence']:.5f} ndcg@100={row['ndcg@100']:.5f} {row['status']}")

    with open(out / "sweep.tsv", "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["beta", "independence", "ndcg@100", "config_hash", "status"])
        for r in rows:
            w.writerow([f"{r['beta']:g}", f"{r['independence']:.6f}", f"{r['ndcg@100']:.6f}", r["config_hash"], r["status"]])
    ok = [r for r in rows if r["status"] == "ok"]
    rho = float(spearmanr([r["independence"] for r in ok], [r["ndcg@100"] for r in ok])[0]) if len(ok) > 2 else float("nan")
    write_manifest(out, "sweep", {**base.to_dict(), "beta_grid": _floats(args.beta), "split": args.split},
                   base.seed, {"spearman": rho, "runs": len(rows), "failed": len(rows) - len(ok)})
    print(f"spearman(independence, ndcg@100) = {rho:.4f}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cadvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="binarize, filter and split a rating log")
    s.add_argument("--ratings", required=True)
    s.add_argument("--metadata", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--foldin", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--header", action="store_true", help="skip a header line in the ratings file")
    s.add_argument("--edges", default=None, help="override prior edges, e.g. 'director>genre,genre>actor'")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train a model on a prepared dataset")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="ranking metrics and independence on a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--split", default="test", choices=("validation", "test"))
    s.add_argument("--k", default="20,50,100")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("project", help="2-D projection of concept representations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--method", default="tsne", choices=("tsne", "pca"))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("synth", help="generate a synthetic dataset from a chain SCM")
    s.add_argument("--out", required=True)
    s.add_argument("--weights", default="0.8,-0.8", help="chain edge weights")
    s.add_argument("--d", type=int, default=4)
    s.add_argument("--n-users", type=int, default=10_000)
    s.add_argument("--budget", type=int, default=20)
    s.add_argument("--items-per-cell", type=int, default=20)
    s.add_argument("--ratios", default="0.8,0.1,0.1")
    s.add_argument("--foldin", type=float, default=0.8)
    s.add_argument("--linear", action="store_true", help="identity element-wise transform")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sweep", help="train over a grid of beta values")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--beta", default="1,5,10,20,50")
    s.add_argument("--split", default="validation", choices=("validation", "test"))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FileNotFoundError, DataError, CycleError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
