"""Causal layer over concept blocks.

A latent state is an array of shape ``(..., k, d)``: ``k`` concept blocks of
``d`` dimensions each. The weighted adjacency ``A`` is ``k x k`` and acts
uniformly on every dimension of a block, so ``A[i, j]`` is the effect of
concept ``i`` on concept ``j``.

Forward map::

    m = (I - A^T)^{-1} eps        (exact solve in topological order)
    z = g(m)                      (element-wise, per-concept parameters)

Inverse map / SCM residual::

    eps_j = g_j^{-1}(z_j) - sum_i A[i, j] g_i^{-1}(z_i)
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

MARGIN = 1e-3
NEWTON_TOL = 1e-10
NEWTON_MAXITER = 100


class CycleError(ValueError):
    """Raised when a prior adjacency contains a directed cycle."""

    def __init__(self, cycle: Sequence):
        self.cycle = list(cycle)
        path = " -> ".join(str(c) for c in self.cycle + self.cycle[:1])
        super().__init__(f"prior graph is cyclic: {path}")


class ConvergenceError(RuntimeError):
    pass


def check_acyclic(mask, names: Sequence[str] | None = None) -> list[int]:
    """Return a topological order of the concepts in ``mask``.

    Kahn's algorithm with lowest-index-first tie breaking, so the order is
    deterministic. Raises :class:`CycleError` naming one cycle otherwise.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {mask.shape}")
    k = mask.shape[0]
    if np.any(np.diag(mask) != 0):
        i = int(np.flatnonzero(np.diag(mask))[0])
        raise CycleError([names[i] if names else i])
    adj = mask != 0
    indeg = adj.sum(axis=0).astype(int)
    ready = sorted(int(i) for i in np.flatnonzero(indeg == 0))
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for j in np.flatnonzero(adj[i]):
            indeg[j] -= 1
            if indeg[j] == 0:
                ready.append(int(j))
                ready.sort()
    if len(order) == k:
        return order
    cycle = _find_cycle(adj, set(range(k)) - set(order))
    raise CycleError([names[i] for i in cycle] if names else cycle)


def _find_cycle(adj: np.ndarray, remaining: set[int]) -> list[int]:
    # every node left after Kahn's algorithm has a predecessor in `remaining`;
    # walking predecessors must revisit a node
    start = min(remaining)
    seen: list[int] = []
    node = start
    while node not in seen:
        seen.append(node)
        node = next(int(p) for p in np.flatnonzero(adj[:, node]) if p in remaining)
    cycle = seen[seen.index(node):]
    cycle.reverse()
    return cycle


def masked_weights(A_raw, mask):
    """Element-wise product ``A_raw * mask``; accepts numpy arrays or tensors."""
    if tuple(A_raw.shape) != tuple(mask.shape) or len(A_raw.shape) != 2:
        raise ValueError(f"shape mismatch: weights {tuple(A_raw.shape)} vs mask {tuple(mask.shape)}")
    if isinstance(A_raw, torch.Tensor):
        return A_raw * torch.as_tensor(mask, dtype=A_raw.dtype, device=A_raw.device)
    return np.asarray(A_raw, dtype=float) * np.asarray(mask, dtype=float)


# --------------------------------------------------------------------------
# element-wise transform g


def _newton_inverse(v, a, b, s, tol=NEWTON_TOL, maxiter=NEWTON_MAXITER):
    """Solve ``a*u + b + s*tanh(u) = v`` for ``u`` (float64, no grad).

    Since tanh is bounded the root lies in
    ``[(v - b - |s|) / a, (v - b + |s|) / a]``; Newton steps leaving the
    bracket are replaced by bisection.
    """
    v = v.detach().double()
    a, b, s = (t.detach().double() for t in (a, b, s))
    lo = (v - b - s.abs()) / a
    hi = (v - b + s.abs()) / a
    u = (v - b) / a
    for _ in range(maxiter):
        t = torch.tanh(u)
        f = a * u + b + s * t - v
        if torch.all(f.abs() <= tol):
            return u
        fp = a + s * (1 - t * t)
        hi = torch.where(f > 0, u, hi)
        lo = torch.where(f < 0, u, lo)
        step = u - f / fp
        bad = ~torch.isfinite(step) | (step < lo) | (step > hi)
        u = torch.where(bad, 0.5 * (lo + hi), step)
        if torch.all((hi - lo) <= 4 * torch.finfo(torch.float64).eps * (1 + u.abs())):
            t = torch.tanh(u)
            if torch.all((a * u + b + s * t - v).abs() <= tol):
                return u
            break
    resid = float((a * u + b + s * torch.tanh(u) - v).abs().max())
    raise ConvergenceError(f"Newton inverse did not converge (max residual {resid:.3e})")


class _MonotoneInverse(torch.autograd.Function):
    # gradients by the implicit function theorem: du = (dv - u da - db - tanh(u) ds) / g'(u)

    @staticmethod
    def forward(ctx, v, a, b, s):
        u = _newton_inverse(v, a, b, s).to(v.dtype)
        ctx.save_for_backward(u, a, s)
        ctx.shapes = (a.shape, b.shape, s.shape)
        return u

    @staticmethod
    def backward(ctx, grad):
        u, a, s = ctx.saved_tensors
        t = torch.tanh(u)
        inv = grad / (a + s * (1 - t * t))
        sa, sb, ss = ctx.shapes
        return (
            inv,
            (-inv * u).sum_to_size(sa),
            (-inv).sum_to_size(sb),
            (-inv * t).sum_to_size(ss),
        )


class ElementwiseTransform(nn.Module):
    """Per-concept monotone map applied to every dimension of a block.

    ``mode="monotone"``: ``g_i(u) = a_i*u + b_i + s_i*tanh(u)`` with
    ``a_i = |s_i| + MARGIN + softplus(rho_i)``, so ``g_i' >= a_i - |s_i| > 0``.

    ``mode="linear"``: ``g_i(u) = a_i*u + b_i`` with ``a_i = exp(log_a_i)``;
    the identity at initialization. Used for ablations and exact linear
    oracles.
    """

    def __init__(self, k: int, mode: str = "monotone", *, s_init: float = 0.1):
        super().__init__()
        if mode not in ("monotone", "linear"):
            raise ValueError(f"unknown transform mode {mode!r}")
        self.k = k
        self.mode = mode
        self.b = nn.Parameter(torch.zeros(k))
        if mode == "monotone":
            self.s = nn.Parameter(torch.full((k,), float(s_init)))
            # a = 1 at init
            target = 1.0 - abs(s_init) - MARGIN
            self.rho = nn.Parameter(torch.full((k,), math.log(math.expm1(target))))
        else:
            self.log_a = nn.Parameter(torch.zeros(k))

    @classmethod
    def from_params(cls, a, b, s=None, mode: str = "monotone", dtype=torch.float64):
        """Build a transform with explicit ``a``, ``b``, ``s`` per concept."""
        a = torch.as_tensor(np.asarray(a, dtype=float), dtype=dtype)
        b = torch.as_tensor(np.asarray(b, dtype=float), dtype=dtype)
        g = cls(len(a), mode).to(dtype)
        with torch.no_grad():
            g.b.copy_(b)
            if mode == "linear":
                if torch.any(a <= 0):
                    raise ValueError("linear transform needs a > 0")
                g.log_a.copy_(torch.log(a))
            else:
                s = torch.as_tensor(np.asarray(s, dtype=float), dtype=dtype)
                gap = a - s.abs() - MARGIN
                if torch.any(gap <= 0):
                    raise ValueError(f"monotone transform needs a > |s| + {MARGIN}")
                g.s.copy_(s)
                g.rho.copy_(gap + torch.log(-torch.expm1(-gap)))  # softplus^{-1}
        return g

    @classmethod
    def identity(cls, k: int, dtype=torch.float64):
        return cls.from_params(np.ones(k), np.zeros(k), mode="linear", dtype=dtype)

    def params(self):
        """Return ``(a, b, s)`` each shaped ``(k, 1)`` for broadcasting over blocks."""
        if self.mode == "monotone":
            s = self.s
            a = s.abs() + MARGIN + F.softplus(self.rho)
        else:
            a = torch.exp(self.log_a)
            s = torch.zeros_like(a)
        return a[:, None], self.b[:, None], s[:, None]

    def forward(self, m):
        a, b, s = self.params()
        if self.mode == "linear":
            return a * m + b
        return a * m + b + s * torch.tanh(m)

    def derivative(self, m):
        a, _, s = self.params()
        if self.mode == "linear":
            return a.expand_as(m)
        t = torch.tanh(m)
        return a + s * (1 - t * t)

    def inverse(self, z):
        a, b, s = self.params()
        if self.mode == "linear":
            return (z - b) / a
        return _MonotoneInverse.apply(z, a.to(z.dtype), b.to(z.dtype), s.to(z.dtype))

    def log_abs_det_jacobian(self, m):
        """``sum log g'(m)`` over the trailing ``(k, d)`` axes."""
        return torch.log(self.derivative(m)).sum(dim=(-2, -1))


# --------------------------------------------------------------------------
# structural causal model


def _tensor_args(*arrays):
    numpy_in = isinstance(arrays[0], np.ndarray) or not isinstance(arrays[0], torch.Tensor)
    dtype = torch.float64 if numpy_in else arrays[0].dtype
    out = [a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=float), dtype=dtype)
           for a in arrays]
    return numpy_in, [t.to(dtype) for t in out]


def _back(numpy_in, t):
    return t.detach().numpy() if numpy_in else t


def _solve_blocks(eps, A, order):
    # (I - A^T) m = eps  <=>  m_j = eps_j + sum_i A[i, j] m_i ; parents come first in `order`.
    # Sums run over every earlier node (not just current nonzeros) so zero weights still get gradients.
    k = A.shape[0]
    blocks: list = [None] * k
    done: list[int] = []
    for j in order:
        acc = eps[..., j, :]
        for i in done:
            acc = acc + A[i, j] * blocks[i]
        blocks[j] = acc
        done.append(j)
    return torch.stack(blocks, dim=-2)


def linear_solve(eps, A, order: Sequence[int] | None = None):
    """Solve ``(I - A^T) m = eps`` block-wise by forward substitution."""
    numpy_in, (eps, A) = _tensor_args(eps, A)
    if order is None:
        order = check_acyclic(A.detach().numpy() != 0)
    return _back(numpy_in, _solve_blocks(eps, A, order))


def causal_transform(eps, A, g: ElementwiseTransform | None = None,
                     order: Sequence[int] | None = None, return_pre: bool = False):
    """Map exogenous blocks ``eps`` to endogenous blocks ``z = g((I - A^T)^{-1} eps)``.

    ``g=None`` is the identity (linear bypass). With ``return_pre`` the
    pre-nonlinearity blocks ``m`` are returned as well.
    """
    numpy_in, (eps, A) = _tensor_args(eps, A)
    if not torch.all(torch.isfinite(eps)):
        raise ValueError("exogenous input contains non-finite values")
    if order is None:
        order = check_acyclic(A.detach().numpy() != 0)
    m = _solve_blocks(eps, A, order)
    z = m if g is None else g(m)
    if return_pre:
        return _back(numpy_in, z), _back(numpy_in, m)
    return _back(numpy_in, z)


def scm_residual(z, A, g: ElementwiseTransform | None = None):
    """Per-block residual ``g_j^{-1}(z_j) - sum_i A[i, j] g_i^{-1}(z_i)``.

    Equals the exogenous noise that generated ``z``.
    """
    numpy_in, (z, A) = _tensor_args(z, A)
    u = z if g is None else g.inverse(z)
    # (A^T u)_j = sum_i A[i, j] u_i, applied on the block axis
    parents = torch.einsum("ij,...id->...jd", A, u)
    return _back(numpy_in, u - parents)


inverse_transform = scm_residual


def det_i_minus_at(A) -> float:
    A = np.asarray(A.detach() if isinstance(A, torch.Tensor) else A, dtype=float)
    return float(np.linalg.det(np.eye(A.shape[0]) - A.T))


class CausalLayer(nn.Module):
    """Trainable SCM layer: masked adjacency plus element-wise transform."""

    def __init__(self, prior_dag, mode: str = "monotone", names: Sequence[str] | None = None):
        super().__init__()
        mask = np.asarray(prior_dag, dtype=float)
        self.order = check_acyclic(mask, names)
        self.names = list(names) if names is not None else [str(i) for i in range(len(mask))]
        self.register_buffer("mask", torch.as_tensor(mask, dtype=torch.float32))
        self.A_raw = nn.Parameter(torch.zeros_like(self.mask))
        self.g = ElementwiseTransform(len(mask), mode)
        self.frozen_zero = False

    @property
    def k(self) -> int:
        return self.mask.shape[0]

    @property
    def A(self):
        if self.frozen_zero:
            return torch.zeros_like(self.mask)
        return self.A_raw * self.mask

    def freeze_zero(self):
        """Ablation: force ``A = 0`` and stop its gradients."""
        self.frozen_zero = True
        self.A_raw.requires_grad_(False)
        with torch.no_grad():
            self.A_raw.zero_()

    @torch.no_grad()
    def enforce_mask(self):
        self.A_raw.mul_(self.mask)

    def forward(self, eps):
        """Return ``(z, m)``."""
        m = _solve_blocks(eps, self.A.to(eps.dtype), self.order)
        return self.g(m), m

    def residual(self, z):
        return scm_residual(z, self.A.to(z.dtype), self.g)

    def to_dict(self) -> dict:
        a, b, s = (t.detach().double().flatten().tolist() for t in self.g.params())
        return {
            "concepts": self.names,
            "prior_dag": self.mask.int().tolist(),
            "A": self.A.detach().double().tolist(),
            "topological_order": [self.names[i] for i in self.order],
            "transform": {"mode": self.g.mode, "a": a, "b": b, "s": s},
        }


def export_graph(layer: CausalLayer, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(layer.to_dict(), indent=2) + "\n")
    return path
