"""Graph sampling from the decoder.

Two samplers share one law for ``A | Z*``. The naive one draws every pair
``i < j`` as ``Bernoulli(1 - exp(-z*_i . z*_j))`` in ``O(n^2)``. The fast one
treats each edge indicator as ``[Poisson(z*_i . z*_j) >= 1]`` and splits the
Poisson counts over decoder channels: channel ``d`` contributes
``E_d ~ Poisson(0.5 * ((sum_i z*_id)^2 - sum_i z*_id^2))`` pair draws whose
endpoints are picked with probability proportional to ``z*_id`` (self pairs
are redrawn). Its expected cost is ``O(n D + |E|)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .graphcore import Graph
from .utils import spawn_seeds

logger = logging.getLogger(__name__)


@dataclass
class SampleRequest:
    """Either a trained ``model`` (latents drawn from the prior) or a fixed ``zstar``."""

    n: int
    seed: int = 0
    model: object = None
    zstar: np.ndarray | None = None

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if self.model is None and self.zstar is None:
            raise ValueError("a model or a fixed zstar is required")


def per_dimension_rates(zstar: np.ndarray) -> np.ndarray:
    """``0.5 * ((sum_i z_id)^2 - sum_i z_id^2)`` for each channel ``d``."""
    z = np.asarray(zstar, dtype=float)
    col = z.sum(axis=0)
    rates = 0.5 * (col * col - (z * z).sum(axis=0))
    if np.any(rates < 0):
        logger.warning("clamping negative per-channel rates %s to 0", rates[rates < 0])
        rates = np.maximum(rates, 0.0)
    return rates


def sample_edge_count(zstar: np.ndarray, rng: np.random.Generator):
    """Total Poisson pair count and its per-channel parts ``(E, E_d)``."""
    counts = rng.poisson(per_dimension_rates(zstar))
    return int(counts.sum()), counts


def _draw_endpoints(cdf: np.ndarray, count: int, rng: np.random.Generator):
    total = cdf[-1]
    n = cdf.shape[0]

    def draw(k):
        return np.minimum(np.searchsorted(cdf, rng.random(k) * total, side="right"), n - 1)

    src, dst = draw(count), draw(count)
    same = np.flatnonzero(src == dst)
    while same.size:
        src[same], dst[same] = draw(same.size), draw(same.size)
        same = same[src[same] == dst[same]]
    return src, dst


def sample_from_zstar_fast(zstar: np.ndarray, rng: np.random.Generator) -> Graph:
    z = np.asarray(zstar, dtype=float)
    n = z.shape[0]
    _, counts = sample_edge_count(z, rng)
    pairs = []
    for d in np.flatnonzero(counts):
        weights = z[:, d]
        # a positive rate needs at least two nodes with positive weight
        assert np.count_nonzero(weights > 0) >= 2, "positive rate with fewer than two weighted nodes"
        src, dst = _draw_endpoints(np.cumsum(weights), int(counts[d]), rng)
        pairs.append(np.stack([np.minimum(src, dst), np.maximum(src, dst)], axis=1))
    if not pairs:
        return Graph(n)
    edges = np.unique(np.concatenate(pairs, axis=0), axis=0)
    return Graph(n, edges)


def pair_probabilities(zstar: np.ndarray, eps_rate: float = 1e-8) -> np.ndarray:
    """Dense ``1 - exp(-max(z_i . z_j, eps))``; diagonal set to zero."""
    z = np.asarray(zstar, dtype=float)
    prob = -np.expm1(-np.maximum(z @ z.T, eps_rate))
    np.fill_diagonal(prob, 0.0)
    return prob


def sample_from_zstar_naive(zstar: np.ndarray, rng: np.random.Generator,
                            eps_rate: float = 1e-8) -> Graph:
    z = np.asarray(zstar, dtype=float)
    n = z.shape[0]
    i, j = np.triu_indices(n, k=1)
    prob = pair_probabilities(z, eps_rate)[i, j]
    keep = rng.random(prob.shape[0]) < prob
    return Graph(n, np.stack([i[keep], j[keep]], axis=1))


def prior_zstar(model, n: int, seed: int) -> np.ndarray:
    """``Z ~ N(0, I)`` then ``Z* = decode(Z)`` for a single graph of ``n`` nodes."""
    gen = torch.Generator().manual_seed(int(seed))
    z = torch.randn(1, n, model.config.embed_dim, generator=gen, dtype=torch.float64)
    with torch.no_grad():
        zstar = model.decode_zstar(z, torch.ones(1, n, dtype=torch.bool))
    return zstar[0].numpy()


def _resolve(req: SampleRequest):
    if req.zstar is not None:
        z = np.asarray(req.zstar, dtype=float)
        if z.shape[0] != req.n:
            raise ValueError(f"zstar has {z.shape[0]} rows for n={req.n}")
        return z, np.random.default_rng(int(req.seed))
    latent_seed, graph_seed = spawn_seeds(req.seed, ["latent", "graph"]).values()
    return prior_zstar(req.model, req.n, latent_seed), np.random.default_rng(graph_seed)


def sample_graph_naive(req: SampleRequest) -> Graph:
    z, rng = _resolve(req)
    eps = req.model.config.eps_rate if req.model is not None else 1e-8
    return sample_from_zstar_naive(z, rng, eps)


def sample_graph_fast(req: SampleRequest) -> Graph:
    z, rng = _resolve(req)
    return sample_from_zstar_fast(z, rng)
