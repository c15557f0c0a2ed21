"""Training loop, validation and representation export."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import sparse

from . import metrics as M
from .data import ConceptSchema, DataError, InteractionDataset, feature_matrices
from .model import CaDVAEModule, Checkpoint, config_hash
from .objective import LossBreakdown, kl_epsilon, kl_z, log_q_z, recon_loglik, sup_a, sup_z, total_loss

log = logging.getLogger(__name__)

NDCG_KS = (50, 100)
RECALL_KS = (20, 50)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    d: int = 20
    beta_max: float = 20.0
    beta_anneal_steps: int = 2000
    gamma1: float = 1.0
    gamma2: float = 1.0
    lr: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    g_mode: str = "monotone"
    likelihood: str = "multinomial"
    hidden: int = 600
    prior_hidden: int = 32
    dropout: float = 0.5
    weight_decay: float = 0.0
    ablate_causal: bool = False
    eval_batch_size: int = 1024

    def __post_init__(self):
        for name in ("d", "batch_size", "max_epochs", "hidden", "prior_hidden", "eval_batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.beta_anneal_steps < 1:
            raise ValueError("beta_anneal_steps must be >= 1")
        if min(self.beta_max, self.gamma1, self.gamma2, self.weight_decay) < 0:
            raise ValueError("beta_max, gamma1, gamma2 and weight_decay must be non-negative")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.g_mode not in ("monotone", "linear", "linear_bypass"):
            raise ValueError(f"unknown g_mode {self.g_mode!r}")
        if self.likelihood not in ("multinomial", "gaussian"):
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a flat ``key = value`` file (``#`` comments allowed)."""
        values = {}
        fields = {f.name: f.type for f in dataclasses.fields(cls)}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=") if "=" in line else line.partition(":")
            key, value = key.strip(), value.strip()
            if not sep or key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown or malformed entry {line!r}")
            values[key] = _coerce(value, fields[key])
        return cls(**values)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in dataclasses.asdict(self).items())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def transform_mode(self) -> str:
        return "linear" if self.g_mode in ("linear", "linear_bypass") else "monotone"


def _coerce(value: str, typ):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ == "int":
        return int(float(value)) if float(value).is_integer() else int(value)
    if typ == "float":
        return float(value)
    return value


def beta_at(step: int, config: TrainConfig) -> float:
    """Linear warm-up of the z-prior weight from 0 to ``beta_max``."""
    return config.beta_max * min(1.0, step / config.beta_anneal_steps)


# --------------------------------------------------------------------------
# batches


class UserFeatures:
    """Dense model inputs for a fixed set of users."""

    def __init__(self, X: sparse.csr_matrix, schema: ConceptSchema, label_mats=None):
        self.X = sparse.csr_matrix(X, dtype=np.float32)
        self.hists, self.c = feature_matrices(self.X, schema, label_mats)

    def __len__(self):
        return self.X.shape[0]

    def batch(self, idx, dtype=torch.float32):
        x = torch.as_tensor(self.X[idx].toarray(), dtype=dtype)
        hists = [torch.as_tensor(h[idx], dtype=dtype) for h in self.hists]
        c = torch.as_tensor(self.c[idx], dtype=dtype)
        return x, hists, c


def build_model(n_items: int, schema: ConceptSchema, config: TrainConfig) -> CaDVAEModule:
    model = CaDVAEModule(
        n_items,
        schema.category_counts,
        schema.prior_dag,
        d=config.d,
        hidden=config.hidden,
        prior_hidden=config.prior_hidden,
        g_mode=config.transform_mode,
        dropout=config.dropout,
        concept_names=schema.concept_names,
    )
    if config.ablate_causal:
        model.causal.freeze_zero()
    return model


def compute_loss(model: CaDVAEModule, x, hists, c, noise, beta: float, gamma1: float, gamma2: float,
                 likelihood: str = "multinomial", generator=None) -> LossBreakdown:
    out = model(x, hists, c, noise=noise, generator=generator)
    g = model.causal.g
    A = model.causal.A.to(x.dtype)
    lam1, lam2 = model.prior_params(hists, c)
    logq = log_q_z(out["eps"], out["mu"], out["log_sigma"], out["m"], g)
    return total_loss(
        recon_loglik(out["logits"], x, likelihood),
        kl_epsilon(out["mu"], out["log_sigma"]),
        kl_z(out["z"], logq, lam1, lam2),
        sup_a(c, A),
        sup_z(out["z"], A, g),
        beta=beta,
        gamma1=gamma1,
        gamma2=gamma2,
    )


@torch.no_grad()
def score_users(model: CaDVAEModule, feats: UserFeatures, batch_size: int = 1024):
    """Decoder logits and posterior-mean blocks for every user in ``feats``."""
    dtype = next(model.parameters()).dtype
    scores, blocks = [], []
    was = model.training
    model.eval()
    try:
        for start in range(0, len(feats), batch_size):
            idx = np.arange(start, min(start + batch_size, len(feats)))
            x, hists, c = feats.batch(idx, dtype)
            out = model(x, hists, c)
            scores.append(out["logits"].numpy())
            blocks.append(out["z"].numpy())
    finally:
        model.train(was)
    return np.concatenate(scores), np.concatenate(blocks)


def _heldout_features(dataset: InteractionDataset, schema: ConceptSchema, split: str, label_mats=None):
    if dataset.split is None or split not in dataset.split:
        raise DataError(f"dataset has no {split!r} split")
    users = dataset.split[split]
    if len(users) == 0:
        raise DataError(f"{split!r} split is empty")
    X_in, targets = dataset.heldout(users)
    return users, UserFeatures(X_in, schema, label_mats), targets


def evaluate_model(model: CaDVAEModule, dataset: InteractionDataset, schema: ConceptSchema,
                   split: str = "validation", ndcg_ks=NDCG_KS, recall_ks=RECALL_KS,
                   independence: bool = False, label_mats=None, batch_size: int = 1024) -> dict:
    users, feats, targets = _heldout_features(dataset, schema, split, label_mats)
    scores, blocks = score_users(model, feats, batch_size)
    foldin = [dataset.foldin[int(u)] for u in users]
    res = M.evaluate_rankings(scores, foldin, targets, ndcg_ks, recall_ks, user_ids=users)
    out = dict(res.metrics)
    if res.skipped:
        out["skipped_users"] = len(res.skipped)
    if independence:
        out["independence"] = M.concept_independence(blocks, schema.concept_names)
    return out


# --------------------------------------------------------------------------
# training


def _append_jsonl(path, record: dict):
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def train(dataset: InteractionDataset, schema: ConceptSchema, config: TrainConfig,
          log_path=None, dtype=torch.float32) -> Checkpoint:
    """Fit a model on the training users, early-stopping on validation NDCG@100.

    Returns the checkpoint with the best validation NDCG@100 (the last epoch
    when there is no validation split). Raises :class:`TrainingDiverged`,
    carrying the last good checkpoint, if the loss becomes non-finite.
    """
    if dataset.split is None:
        raise DataError("dataset must be split before training")
    label_mats = schema.label_matrices()
    X_train = dataset.matrix(dataset.split["train"])
    val = None
    if len(dataset.split.get("validation", ())) > 0:
        users = dataset.split["validation"]
        X_in, targets = dataset.heldout(users)
        val = (X_in, [dataset.foldin[int(u)] for u in users], targets)
    return fit(X_train, schema, config, val, log_path, dtype, label_mats)


def fit(X_train, schema: ConceptSchema, config: TrainConfig, validation=None, log_path=None,
        dtype=torch.float32, label_mats=None) -> Checkpoint:
    """Core loop on raw matrices.

    ``validation`` is ``(X_foldin, foldin_rows, target_rows)`` or ``None``.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)

    label_mats = schema.label_matrices() if label_mats is None else label_mats
    feats = UserFeatures(X_train, schema, label_mats)
    if validation is not None:
        vfeats = UserFeatures(validation[0], schema, label_mats)
        vfoldin, vtargets = validation[1], validation[2]

    model = build_model(X_train.shape[1], schema, config).to(dtype)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    cfg = config.to_dict()

    history: list[dict] = []
    best_state, best_score, best_epoch = None, -math.inf, 0
    last_good = copy.deepcopy(model.state_dict())
    step, bad_epochs = 0, 0
    for epoch in range(1, config.max_epochs + 1):
        model.train()
        order = rng.permutation(len(feats))
        sums: dict[str, float] = {}
        n_seen = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, hists, c = feats.batch(idx, dtype)
            noise = torch.randn((len(idx), model.k, model.d), generator=gen, dtype=dtype)
            beta = beta_at(step, config)
            br = compute_loss(model, x, hists, c, noise, beta, config.gamma1, config.gamma2,
                              config.likelihood, generator=gen)
            if not torch.isfinite(br.total):
                ck = _checkpoint(model, last_good, cfg, epoch - 1, config.seed, history)
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}", ck)
            opt.zero_grad()
            br.total.backward()
            opt.step()
            model.causal.enforce_mask()
            step += 1
            for key, v in br.as_dict().items():
                sums[key] = sums.get(key, 0.0) + v * len(idx)
            n_seen += len(idx)
        last_good = copy.deepcopy(model.state_dict())

        record = {"epoch": epoch, "step": step, "beta": beta_at(step, config)}
        record.update({k: v / n_seen for k, v in sums.items()})
        if validation is not None:
            scores, _ = score_users(model, vfeats, config.eval_batch_size)
            res = M.evaluate_rankings(scores, vfoldin, vtargets, NDCG_KS, RECALL_KS)
            record["validation"] = res.metrics
            score = res.metrics["ndcg@100"]
        else:
            score = float(epoch)
        history.append(record)
        _append_jsonl(log_path, record)
        log.info("epoch %d loss %.4f score %.5f", epoch, record["total"], score)

        if score > best_score:
            best_state, best_score, best_epoch = copy.deepcopy(model.state_dict()), score, epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if validation is not None and bad_epochs > config.patience:
                break

    return _checkpoint(model, best_state, cfg, best_epoch, config.seed, history)


def _checkpoint(model, state, cfg, epoch, seed, history) -> Checkpoint:
    best = copy.deepcopy(model)
    best.load_state_dict(state)
    best.eval()
    return Checkpoint(best, cfg, epoch, seed, list(history))


def validate(checkpoint: Checkpoint, dataset: InteractionDataset, schema: ConceptSchema) -> dict:
    """NDCG@{50,100} and Recall@{20,50} on the validation fold."""
    return evaluate_model(checkpoint.model, dataset, schema, "validation")


# --------------------------------------------------------------------------
# representations


def user_representations(checkpoint: Checkpoint, dataset: InteractionDataset, schema: ConceptSchema,
                         users: Sequence[int] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior-mean concept blocks ``(n_users, k, d)`` from full histories."""
    users = np.arange(dataset.n_users) if users is None else np.asarray(users)
    feats = UserFeatures(dataset.matrix(users), schema)
    _, blocks = score_users(checkpoint.model, feats)
    return users, blocks


def export_projection(checkpoint: Checkpoint, dataset: InteractionDataset, schema: ConceptSchema,
                      out_path, method: str = "tsne", seed: int = 0, users=None):
    """Write one 2-D point per (user, concept) block; returns ``(path, coords)``."""
    users, blocks = user_representations(checkpoint, dataset, schema, users)
    coords = M.project_blocks(blocks, method, seed)
    ids = [int(dataset.user_ids[u]) for u in users]
    return M.write_projection(coords, schema.concept_names, ids, out_path), coords
