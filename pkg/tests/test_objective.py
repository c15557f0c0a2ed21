import math

import numpy as np
import pytest
import torch

from cadvae.graph import ElementwiseTransform, causal_transform
from cadvae.objective import (
    gaussian_log_prob,
    kl_epsilon,
    kl_z,
    log_q_z,
    recon_loglik,
    sup_a,
    sup_z,
    total_loss,
)

D = torch.float64


def t(x):
    return torch.as_tensor(np.array(x, dtype=float), dtype=D)


def test_recon_uniform_logits():
    assert recon_loglik(torch.zeros(1, 4, dtype=D), t([[0, 1, 0, 1]])).item() == pytest.approx(-2.77259, abs=1e-5)
    x = t([[0, 1, 0, 1, 0, 0, 0, 1]])
    assert recon_loglik(torch.zeros(1, 8, dtype=D), x).item() == pytest.approx(-3 * math.log(8), abs=1e-12)


def test_recon_dominant_logit_approaches_zero():
    logits = torch.zeros(1, 5, dtype=D)
    logits[0, 2] = 50.0
    val = recon_loglik(logits, t([[0, 0, 1, 0, 0]])).item()
    assert -1e-12 < val <= 0


def test_recon_permutation_invariant():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(3, 10, generator=g, dtype=D)
    x = (torch.rand(3, 10, generator=g) < 0.3).to(D)
    perm = torch.randperm(10, generator=g)
    assert torch.allclose(recon_loglik(logits, x), recon_loglik(logits[:, perm], x[:, perm]))


def test_kl_eps_examples():
    assert kl_epsilon(torch.zeros(2, 3, 4, dtype=D), torch.zeros(2, 3, 4, dtype=D)).abs().max() == 0
    assert kl_epsilon(t([[[1.0]]]), t([[[0.0]]])).item() == pytest.approx(0.5)


def test_kl_eps_monte_carlo():
    rng = np.random.default_rng(0)
    mu, log_sigma = t([[[0.7, -1.2]]]), t([[[-0.4, 0.3]]])
    n = 1_000_000
    eps = mu + torch.exp(log_sigma) * t(rng.normal(size=(n, 1, 2)))
    samples = (gaussian_log_prob(eps, mu.expand_as(eps), log_sigma.expand_as(eps))
               - gaussian_log_prob(eps, torch.zeros_like(eps), torch.zeros_like(eps))).numpy()
    se = samples.std() / math.sqrt(n)
    assert abs(samples.mean() - kl_epsilon(mu, log_sigma).item()) <= 3 * se


def test_kl_z_zero_when_prior_equals_posterior():
    g = ElementwiseTransform.identity(2)
    mu, log_sigma = t(np.ones((4, 2, 3)) * 0.2), t(np.full((4, 2, 3), -0.5))
    eps = mu + torch.exp(log_sigma) * t(np.random.default_rng(1).normal(size=(4, 2, 3)))
    z = causal_transform(eps, torch.zeros(2, 2, dtype=D), g)
    logq = log_q_z(eps, mu, log_sigma, eps, g)
    assert kl_z(z, logq, mu, torch.exp(log_sigma)).abs().max().item() < 1e-12


def test_linear_log_det():
    g = ElementwiseTransform.from_params([2.0, 0.25, 1.5], [0.0, 1.0, -1.0], mode="linear")
    eps = torch.zeros(1, 3, 4, dtype=D)
    base = gaussian_log_prob(eps, eps, eps)
    got = log_q_z(eps, eps, eps, eps, g) - base
    assert got.item() == pytest.approx(-4 * (math.log(2.0) + math.log(0.25) + math.log(1.5)), abs=1e-12)


def test_kl_z_monte_carlo_nonnegative():
    rng = np.random.default_rng(2)
    A = torch.zeros(2, 2, dtype=D)
    A[0, 1] = 0.6
    g = ElementwiseTransform.from_params([1.3, 0.8], [0.1, -0.2], [0.4, -0.3])
    n = 200_000
    mu = t(np.broadcast_to([[0.3], [-0.5]], (n, 2, 1)))
    ls = t(np.full((n, 2, 1), -0.2))
    eps = mu + torch.exp(ls) * t(rng.normal(size=(n, 2, 1)))
    with torch.no_grad():
        z, m = causal_transform(eps, A, g, return_pre=True)
        vals = kl_z(z, log_q_z(eps, mu, ls, m, g), torch.zeros_like(z), torch.ones_like(z)).numpy()
    assert vals.mean() >= -3 * vals.std() / math.sqrt(n)
    assert vals.mean() > 0


def test_kl_z_non_finite_raises():
    z = torch.zeros(1, 1, 1, dtype=D)
    with pytest.raises(FloatingPointError):
        kl_z(z, torch.tensor([float("nan")], dtype=D), z, torch.ones_like(z))


def test_sup_a_examples():
    assert sup_a(t([[1.0, 0.0]]), torch.zeros(2, 2, dtype=D)).item() == pytest.approx(0.5)
    A = torch.zeros(2, 2, dtype=D)
    A[0, 1] = 1.7
    c = t([[0.5, 1 / (1 + math.exp(-1.7 * 0.5))]])  # fixed point of c = sigmoid(A^T c)
    assert sup_a(c, A).item() == pytest.approx(0.0, abs=1e-14)
    rng = np.random.default_rng(3)
    cs = t(rng.uniform(size=(50, 2)))
    assert torch.all(sup_a(cs, A) >= 0)


def test_sup_z_examples():
    A = torch.zeros(3, 3, dtype=D)
    A[0, 1], A[1, 2] = 0.5, -1.0
    assert sup_z(torch.zeros(2, 3, 4, dtype=D), A).abs().max() == 0
    z = causal_transform(t([[[1.0], [0.0], [1.0]]]), A)
    assert sup_z(z, A).item() == pytest.approx(2.0, abs=1e-12)
    zero = torch.zeros(3, 3, dtype=D)
    z = t(np.random.default_rng(4).normal(size=(5, 3, 2)))
    assert torch.allclose(sup_z(2 * z, zero), 4 * sup_z(z, zero))


def test_total_loss_reductions():
    rng = np.random.default_rng(5)
    terms = [t(rng.normal(size=7)) for _ in range(5)]
    out = total_loss(*terms, beta=0.5, gamma1=2.0, gamma2=3.0)
    r, ke, kz, sa, sz = (x.mean().item() for x in terms)
    assert out.total.item() == pytest.approx(-(r - ke - 0.5 * kz) + 2 * sa + 3 * sz, abs=1e-12)
    assert set(out.as_dict()) == {"recon", "kl_eps", "kl_z", "sup_a", "sup_z", "total"}
    with pytest.raises(ValueError):
        total_loss(*terms, gamma1=-1)


def test_gamma_zero_isolates_terms():
    rng = np.random.default_rng(6)
    terms = [t(rng.normal(size=4)) for _ in range(5)]
    base = total_loss(*terms, beta=0, gamma1=0, gamma2=0).total.item()
    assert base == pytest.approx(-(terms[0].mean() - terms[1].mean()).item(), abs=1e-12)


def test_beta_zero_drops_kl_z_gradient():
    w = torch.ones(3, dtype=D, requires_grad=True)
    kz = (w ** 2) * torch.tensor([1.0, float("inf"), 2.0], dtype=D)  # even an infinite term is skipped
    recon = w * 2
    out = total_loss(recon, torch.zeros(3, dtype=D), kz, torch.zeros(3, dtype=D), torch.zeros(3, dtype=D), beta=0)
    out.total.backward()
    assert torch.allclose(w.grad, torch.full((3,), -2 / 3, dtype=D))
