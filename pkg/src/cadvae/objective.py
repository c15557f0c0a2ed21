"""Loss terms of the training objective.

Every term is returned per user (shape ``(batch,)``); :func:`total_loss`
averages over the batch and combines them as::

    total = -(recon - kl_eps - beta * kl_z) + gamma1 * sup_a + gamma2 * sup_z
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch.nn import functional as F

from .graph import ElementwiseTransform, scm_residual

LOG_2PI = math.log(2 * math.pi)


def recon_loglik(logits, x, likelihood: str = "multinomial"):
    """Log-likelihood of the clicks ``x`` under the decoder logits."""
    if likelihood == "multinomial":
        return (F.log_softmax(logits, dim=-1) * x).sum(dim=-1)
    if likelihood == "gaussian":
        # unit-variance additive noise, constant dropped
        return -0.5 * ((x - logits) ** 2).sum(dim=-1)
    raise ValueError(f"unknown likelihood {likelihood!r}")


def kl_epsilon(mu, log_sigma):
    """Closed-form ``KL(N(mu, sigma^2) || N(0, I))`` summed over blocks."""
    var = torch.exp(2 * log_sigma)
    return 0.5 * (var + mu ** 2 - 1 - 2 * log_sigma).flatten(start_dim=1).sum(dim=1)


def gaussian_log_prob(x, mean, log_sigma):
    return (-0.5 * ((x - mean) * torch.exp(-log_sigma)) ** 2 - log_sigma - 0.5 * LOG_2PI).flatten(start_dim=1).sum(dim=1)


def log_q_z(eps, mu, log_sigma, m, g: ElementwiseTransform | None):
    """Density of ``z = F(eps)`` by change of variables.

    The linear solve has unit determinant, so only ``g`` contributes:
    ``log q(z) = log q(eps) - sum log g'(m)``.
    """
    logq = gaussian_log_prob(eps, mu, log_sigma)
    if g is None:
        return logq
    return logq - g.log_abs_det_jacobian(m)


def kl_z(z, logq, lam1, lam2):
    """Single-sample estimate ``log q(z) - log p(z | c)``."""
    out = logq - gaussian_log_prob(z, lam1, torch.log(lam2))
    if not torch.all(torch.isfinite(out)):
        raise FloatingPointError("non-finite density in kl_z")
    return out


def sup_a(c, A):
    """``||c - sigmoid(A^T c)||^2`` per user; ``c`` is ``(batch, k)``."""
    return ((c - torch.sigmoid(c @ A)) ** 2).sum(dim=-1)


def sup_z(z, A, g: ElementwiseTransform | None = None):
    """Squared norm of the SCM residual (the recovered exogenous noise)."""
    r = scm_residual(z, A, g)
    return (r ** 2).flatten(start_dim=1).sum(dim=1)


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    kl_eps: torch.Tensor
    kl_z: torch.Tensor
    sup_a: torch.Tensor
    sup_z: torch.Tensor
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("recon", "kl_eps", "kl_z", "sup_a", "sup_z", "total")}


def total_loss(recon, kl_eps, kl_z_, sup_a_, sup_z_, beta: float = 1.0,
               gamma1: float = 0.0, gamma2: float = 0.0) -> LossBreakdown:
    """Batch-mean loss terms and the combined objective."""
    if min(beta, gamma1, gamma2) < 0:
        raise ValueError("beta, gamma1 and gamma2 must be non-negative")
    terms = [t.mean() if isinstance(t, torch.Tensor) and t.ndim else torch.as_tensor(t, dtype=torch.float64)
             for t in (recon, kl_eps, kl_z_, sup_a_, sup_z_)]
    r, ke, kz, sa, sz = terms
    total = -(r - ke) + gamma1 * sa + gamma2 * sz
    if beta != 0:
        total = total + beta * kz
    return LossBreakdown(r, ke, kz, sa, sz, total)
