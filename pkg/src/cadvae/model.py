"""Encoder, conditional prior, causal layer and decoder."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .graph import CausalLayer

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 3.0
PRIOR_SCALE_FLOOR = 1e-3


class CaDVAEModule(nn.Module):
    """Causal disentangled VAE over ``k`` concept blocks of width ``d``.

    Parameters
    ----------
    n_items : int
        Catalog size.
    category_counts : sequence of int
        Vocabulary size ``m_i`` of every concept.
    prior_dag : array-like
        Binary ``k x k`` prior adjacency.
    d : int
        Latent dimensions per concept.
    hidden : int
        Width of the encoder trunk and decoder hidden layer.
    prior_hidden : int
        Width of each per-concept prior network.
    g_mode : {"monotone", "linear"}
        Element-wise transform of the causal layer.
    dropout : float
        Input dropout on the normalized interaction vector while training.
    """

    def __init__(self, n_items: int, category_counts: Sequence[int], prior_dag, d: int = 20,
                 hidden: int = 600, prior_hidden: int = 32, g_mode: str = "monotone",
                 dropout: float = 0.5, concept_names: Sequence[str] | None = None):
        super().__init__()
        self.n_items = int(n_items)
        self.category_counts = tuple(int(m) for m in category_counts)
        self.k = len(self.category_counts)
        self.d = int(d)
        self.dropout = float(dropout)
        n_feat = sum(self.category_counts) + self.k

        self.trunk = nn.Linear(self.n_items + n_feat, hidden)
        self.heads = nn.ModuleList(nn.Linear(hidden, 2 * self.d) for _ in range(self.k))
        self.priors = nn.ModuleList(
            nn.Sequential(nn.Linear(m + 1, prior_hidden), nn.Tanh(), nn.Linear(prior_hidden, 2 * self.d))
            for m in self.category_counts
        )
        self.causal = CausalLayer(prior_dag, g_mode, concept_names)
        self.decoder = nn.Sequential(nn.Linear(self.k * self.d, hidden), nn.Tanh(), nn.Linear(hidden, self.n_items))
        self._init_weights()

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.normal_(mod.bias, std=1e-3)

    # -- pieces -------------------------------------------------------------

    def encode(self, x, hists: Sequence[torch.Tensor], c, generator: torch.Generator | None = None):
        """Return posterior ``(mu, log_sigma)``, each ``(batch, k, d)``.

        Dropout is applied only when ``self.training`` and a generator is given.
        """
        norms = x.norm(dim=1, keepdim=True)
        if torch.any(norms == 0):
            raise ValueError("encoder input has a user with no interactions")
        x = x / norms
        if self.training and generator is not None and self.dropout > 0:
            keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= self.dropout
            x = x * keep / (1 - self.dropout)
        h = torch.tanh(self.trunk(torch.cat([x, *hists, c], dim=1)))
        out = torch.stack([head(h) for head in self.heads], dim=1)
        mu, log_sigma = out[..., : self.d], out[..., self.d:]
        return mu, log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)

    @staticmethod
    def reparameterize(mu, log_sigma, noise):
        return mu + torch.exp(log_sigma) * noise

    def prior_params(self, hists: Sequence[torch.Tensor], c):
        """Conditional prior ``N(lambda1, lambda2^2)`` per concept block."""
        outs = [net(torch.cat([h, c[:, i: i + 1]], dim=1)) for i, (net, h) in enumerate(zip(self.priors, hists))]
        out = torch.stack(outs, dim=1)
        lam1 = out[..., : self.d]
        lam2 = F.softplus(out[..., self.d:]) + PRIOR_SCALE_FLOOR
        return lam1, lam2

    def decode(self, z):
        return self.decoder(z.flatten(start_dim=-2))

    def forward(self, x, hists, c, noise=None, generator=None):
        """Full pass; ``noise=None`` uses the posterior mean."""
        mu, log_sigma = self.encode(x, hists, c, generator)
        eps = mu if noise is None else self.reparameterize(mu, log_sigma, noise)
        z, m = self.causal(eps)
        return {"mu": mu, "log_sigma": log_sigma, "eps": eps, "m": m, "z": z, "logits": self.decode(z)}

    @torch.no_grad()
    def representations(self, x, hists, c):
        """Posterior-mean endogenous blocks ``z``, shape ``(batch, k, d)``."""
        was = self.training
        self.eval()
        try:
            mu, _ = self.encode(x, hists, c)
            return self.causal(mu)[0]
        finally:
            self.train(was)

    def count_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def parameter_count(n_items: int, category_counts: Sequence[int], d: int, hidden: int, prior_hidden: int = 32) -> int:
    k = len(category_counts)
    n_feat = sum(category_counts) + k
    enc = (n_items + n_feat + 1) * hidden + k * (hidden + 1) * 2 * d
    prior = sum((m + 2) * prior_hidden + (prior_hidden + 1) * 2 * d for m in category_counts)
    dec = (k * d + 1) * hidden + (hidden + 1) * n_items
    causal = k * k + 3 * k
    return enc + prior + dec + causal


def budget_hidden(n_items: int, category_counts: Sequence[int], d: int = 100, prior_hidden: int = 32) -> int:
    """Hidden width that brings the model to about ``2 * n_items * d`` parameters."""
    base = parameter_count(n_items, category_counts, d, 0, prior_hidden)
    per_unit = parameter_count(n_items, category_counts, d, 1, prior_hidden) - base
    return max(1, round((2 * n_items * d - base) / per_unit))


# --------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    """Trainable parameters plus the metadata needed to rebuild the model."""

    model: CaDVAEModule
    config: dict
    epoch: int = 0
    seed: int = 0
    history: list = field(default_factory=list)

    def architecture(self) -> dict:
        m = self.model
        return {
            "n_items": m.n_items,
            "category_counts": list(m.category_counts),
            "prior_dag": m.causal.mask.int().tolist(),
            "concept_names": m.causal.names,
            "d": m.d,
            "hidden": m.trunk.out_features,
            "prior_hidden": m.priors[0][0].out_features,
            "g_mode": m.causal.g.mode,
            "dropout": m.dropout,
            "ablate_causal": m.causal.frozen_zero,
        }

    def save(self, path) -> Path:
        """Write ``<path>.npz`` (arrays) and ``<path>.json`` (metadata)."""
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        base.parent.mkdir(parents=True, exist_ok=True)
        arrays = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        with open(base.with_suffix(".npz"), "wb") as fh:
            np.savez(fh, **arrays)
        meta = {
            "architecture": self.architecture(),
            "config": self.config,
            "config_hash": config_hash(self.config),
            "epoch": self.epoch,
            "seed": self.seed,
            "history": self.history,
        }
        base.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return base.with_suffix(".npz")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        base = path.with_suffix("") if path.suffix in (".npz", ".json") else path
        meta = json.loads(base.with_suffix(".json").read_text())
        arch = dict(meta["architecture"])
        ablate = arch.pop("ablate_causal", False)
        with np.load(base.with_suffix(".npz")) as data:
            state = {k: torch.from_numpy(data[k].copy()) for k in data.files}
        model = CaDVAEModule(**arch)
        dtype = state["trunk.weight"].dtype
        model.to(dtype)
        if ablate:
            model.causal.freeze_zero()
        model.load_state_dict(state)
        return cls(model, meta["config"], meta["epoch"], meta["seed"], meta["history"])
