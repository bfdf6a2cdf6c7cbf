"""Shared fixtures and independent oracles for the test-suite."""
from __future__ import annotations

import math

import numpy as np
import pytest
import torch
from torch import nn

from gevae.graphcore import Graph, er_graph
from gevae.utils import float64_modules


def random_graph(rng: np.random.Generator, n_max: int = 30, p: float | None = None) -> Graph:
    n = int(rng.integers(1, n_max + 1))
    return er_graph(n, rng.uniform(0.05, 0.6) if p is None else p, rng)


def permute_rows(x, perm):
    """Rows of ``x`` relabelled like nodes: ``out[perm[i]] = x[i]``."""
    perm = np.asarray(perm)
    if isinstance(x, torch.Tensor):
        out = torch.empty_like(x)
        out[..., torch.as_tensor(perm), :] = x
        return out
    out = np.empty_like(x)
    out[perm] = x
    return out


def dense_joint_loglik(a: np.ndarray, m: np.ndarray, zstar: np.ndarray, eps: float = 1e-8) -> float:
    """Pair-by-pair ``log p(A, M | Z*)``: edges ``log(lam e^{-lam m})``, non-edges ``-lam``."""
    lam = zstar @ zstar.T
    total = 0.0
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            if a[i, j]:
                rate = max(lam[i, j], eps)
                total += math.log(rate) - rate * m[i, j]
            else:
                total -= lam[i, j]
    return total


def dense_marginal_loglik(a: np.ndarray, zstar: np.ndarray, eps: float = 1e-8) -> float:
    lam = zstar @ zstar.T
    iu = np.triu_indices(a.shape[0], 1)
    rate, edge = lam[iu], a[iu] > 0
    return float(np.sum(np.log(-np.expm1(-np.maximum(rate[edge], eps)))) - np.sum(rate[~edge]))


def perturb(module: torch.nn.Module, scale: float, seed: int = 0) -> torch.nn.Module:
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def gradient_check(loss_fn, params, count: int = 20, seed: int = 0, h: float = 1e-6,
                   min_grad: float = 1e-6):
    """Compare autograd with central differences on ``count`` random scalar entries.

    Entries are drawn among those with ``|grad| > min_grad``. Returns the list
    of relative errors.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    candidates = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        for idx in torch.nonzero(g.abs() > min_grad).tolist():
            candidates.append((k, tuple(idx)))
    rng = np.random.default_rng(seed)
    assert len(candidates) >= count, f"only {len(candidates)} parameters carry gradient"
    picks = rng.choice(len(candidates), size=count, replace=False)
    errors = []
    with torch.no_grad():
        for c in picks:
            k, idx = candidates[c]
            p = params[k]
            orig = p[idx].item()
            p[idx] = orig + h
            up = float(loss_fn())
            p[idx] = orig - h
            down = float(loss_fn())
            p[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(grads[k][idx])
            errors.append(abs(an - fd) / max(abs(an), abs(fd)))
    return errors


class ConstantDecoder(nn.Module):
    """Ignores its input; every node gets the same pre-positivity row."""

    def __init__(self, row):
        super().__init__()
        self.row = nn.Parameter(torch.as_tensor(row, dtype=torch.float64))

    def forward(self, x, mask):
        return self.row.expand(*x.shape[:2], -1) * mask[..., None]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def f64():
    return float64_modules


def simple_spectrum_graphs(count: int, seed: int, P: int = 4, n_range=(6, 16), p: float = 0.4):
    """ER graphs whose Laplacian spectrum is simple and whose eigen-signs are unambiguous."""
    from gevae.embed import laplacian_eigenmap
    from gevae.graphcore import laplacian

    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        g = er_graph(int(rng.integers(*n_range)), p, rng)
        emb = laplacian_eigenmap(g, P)
        if np.diff(np.linalg.eigvalsh(laplacian(g))).min() > 1e-6 and not emb.sign_ambiguous:
            out.append(g)
    return out


# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d} {status}: {title} ({detail})")
