"""Model evaluation: importance-sampled likelihood, graph statistics and MMD."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import torch

from .embed import EmbeddingMatrix, laplacian_eigenmap
from .graphcore import Graph, ladder_graph
from .model import GEVAE, GraphBatch, gaussian_logpdf, marginal_loglik
from .sampler import sample_from_zstar_fast
from .utils import torch_generator

LN2 = math.log(2.0)

# ----------------------------------------------------------------------------
# Likelihood
# ----------------------------------------------------------------------------


def log_importance_weights(model: GEVAE, batch: GraphBatch, generator=None, noise=None,
                           sigma: float | None = None) -> torch.Tensor:
    """``log p(Z) + log p(A | Z) + log|det df/dZ0| - log q(Z0 | A)`` per batch row.

    The auxiliaries are integrated out exactly, pair by pair.
    """
    enc = model.encode(batch.embedding, batch.mask, noise=noise, generator=generator, sigma=sigma)
    zstar = model.zstar_from_z0(enc.z0, batch.mask)
    log_lik = marginal_loglik(batch, zstar, model.config.eps_rate)
    log_prior = gaussian_logpdf(enc.z, 0.0, 1.0, batch.mask)
    return log_prior + log_lik + enc.log_det - enc.log_q_z0


@torch.no_grad()
def is_loglik(model: GEVAE, g: Graph, emb: EmbeddingMatrix, num_samples: int = 128,
              seed: int = 0, sigma: float | None = None) -> tuple[float, float]:
    """Importance-sampled ``log p(A)`` with the encoder as proposal.

    Returns ``(loglik, bits_per_dim)`` where bits are normalized by the
    ``n (n - 1) / 2`` node pairs.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    batch = GraphBatch.collate([g], [emb]).repeat(num_samples)
    log_w = log_importance_weights(model, batch, generator=torch_generator(seed), sigma=sigma)
    if not torch.isfinite(log_w).all():
        raise ArithmeticError("non-finite importance weights")
    loglik = float(torch.logsumexp(log_w, dim=0) - math.log(num_samples))
    return loglik, bits_per_dim(loglik, g.n)


def bits_per_dim(loglik: float, n: int) -> float:
    return -loglik / (LN2 * max(n * (n - 1) / 2.0, 1.0))


def er_density(graphs: Sequence[Graph]) -> float:
    """Edge density pooled over all pairs of all graphs."""
    edges = sum(g.num_edges for g in graphs)
    pairs = sum(g.num_pairs for g in graphs)
    return edges / pairs if pairs else 0.0


def er_bits_per_dim(g: Graph, p: float) -> float:
    """Exact bits/dim of ``g`` under an Erdos-Renyi model with edge probability ``p``."""
    pairs = g.num_pairs
    if pairs == 0:
        return 0.0
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    e = g.num_edges
    return -(e * math.log2(p) + (pairs - e) * math.log2(1.0 - p)) / pairs


# ----------------------------------------------------------------------------
# Graph statistics
# ----------------------------------------------------------------------------


def degree_hist(g: Graph) -> np.ndarray:
    """Counts of nodes with degree ``0..max_degree``."""
    return np.bincount(g.degrees(), minlength=1).astype(float)


def clustering_coeffs(g: Graph) -> np.ndarray:
    """Local clustering coefficient per node; 0 where degree < 2."""
    adj = g.adjacency()
    triangles = np.asarray((adj @ adj).multiply(adj).sum(axis=1)).ravel() / 2.0
    deg = g.degrees().astype(float)
    wedges = deg * (deg - 1.0) / 2.0
    out = np.zeros(g.n)
    ok = wedges > 0
    out[ok] = triangles[ok] / wedges[ok]
    return out


ORBIT_IDS = tuple(range(4, 15))


def _orbit_of(sub_deg: tuple[int, ...], num_edges: int, d: int) -> int:
    """Node orbit (numbered 4..14) of a node with induced degree ``d``."""
    if num_edges == 3:
        if max(sub_deg) == 3:  # star
            return 7 if d == 3 else 6
        return 4 if d == 1 else 5  # path
    if num_edges == 4:
        if max(sub_deg) == 2:  # 4-cycle
            return 8
        return {1: 9, 2: 10, 3: 11}[d]  # paw
    if num_edges == 5:  # diamond
        return 12 if d == 2 else 13
    return 14  # K4


def connected_quadruples(g: Graph):
    """Yield every connected induced 4-node subset once (ESU enumeration)."""
    nbrs = [set(nb.tolist()) for nb in g.neighbors()]

    def extend(sub, closed, ext, root):
        if len(sub) == 4:
            yield tuple(sub)
            return
        ext = list(ext)
        while ext:
            w = ext.pop()
            new = [u for u in nbrs[w] if u > root and u not in closed]
            yield from extend(sub + [w], closed | nbrs[w] | {w}, ext + new, root)

    for v in range(g.n):
        start = [u for u in nbrs[v] if u > v]
        yield from extend([v], nbrs[v] | {v}, start, v)


def orbit_counts(g: Graph) -> np.ndarray:
    """Per-node counts of the 11 node orbits of connected 4-node graphlets.

    Column ``k`` holds orbit ``4 + k``: path end/middle (4, 5), star leaf/centre
    (6, 7), 4-cycle (8), paw tail/side/centre (9, 10, 11), diamond
    degree-2/degree-3 (12, 13) and K4 (14).
    """
    nbrs = [set(nb.tolist()) for nb in g.neighbors()]
    counts = np.zeros((g.n, len(ORBIT_IDS)), dtype=np.int64)
    for quad in connected_quadruples(g):
        deg = tuple(sum(1 for u in quad if u != v and u in nbrs[v]) for v in quad)
        m = sum(deg) // 2
        for v, d in zip(quad, deg):
            counts[v, _orbit_of(deg, m, d) - 4] += 1
    return counts


STATISTICS = ("degree", "clustering", "orbit")


@dataclass
class GraphStatistic:
    """One graph's summary as a normalized histogram-like vector."""

    kind: str
    values: np.ndarray


def graph_statistic(g: Graph, kind: str, clustering_bins: int = 100) -> GraphStatistic:
    if kind == "degree":
        vec = degree_hist(g)
    elif kind == "clustering":
        vec, _ = np.histogram(clustering_coeffs(g), bins=clustering_bins, range=(0.0, 1.0))
        vec = vec.astype(float)
    elif kind == "orbit":
        vec = orbit_counts(g).sum(axis=0).astype(float)
    else:
        raise ValueError(f"unknown statistic {kind!r}; expected one of {STATISTICS}")
    total = vec.sum()
    return GraphStatistic(kind, vec / total if total > 0 else vec)


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-dist^2 / (2 bandwidth^2))`` over ``tv`` or ``l2`` distance."""

    distance: str = "tv"
    bandwidth: float = 1.0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> float:
        size = max(len(x), len(y))
        xp = np.pad(x, (0, size - len(x)))
        yp = np.pad(y, (0, size - len(y)))
        if self.distance == "tv":
            dist = 0.5 * np.abs(xp - yp).sum()
        elif self.distance == "l2":
            dist = float(np.sqrt(((xp - yp) ** 2).sum()))
        else:
            raise ValueError(f"unknown distance {self.distance!r}")
        return math.exp(-dist * dist / (2.0 * self.bandwidth ** 2))


@dataclass
class MmdReport:
    kind: str
    mmd: float
    kernel: dict
    size_a: int
    size_b: int
    estimator: str = "biased"

    def to_dict(self) -> dict:
        return asdict(self)


def _gram(a, b, kernel):
    return np.array([[kernel(x.values, y.values) for y in b] for x in a])


def mmd(sample_a: Sequence[GraphStatistic], sample_b: Sequence[GraphStatistic],
        kernel: KernelSpec | None = None, estimator: str = "biased") -> MmdReport:
    """Squared maximum mean discrepancy between two sets of statistics.

    ``biased`` is the V-statistic (never negative, zero for identical
    samples); ``unbiased`` drops the diagonal of the within-sample terms.
    """
    kernel = kernel or KernelSpec()
    if not sample_a or not sample_b:
        raise ValueError("both samples must be non-empty")
    kinds = {s.kind for s in sample_a} | {s.kind for s in sample_b}
    if len(kinds) != 1:
        raise ValueError(f"statistic kinds differ: {sorted(kinds)}")
    kaa, kbb, kab = _gram(sample_a, sample_a, kernel), _gram(sample_b, sample_b, kernel), \
        _gram(sample_a, sample_b, kernel)
    if estimator == "biased":
        value = kaa.mean() + kbb.mean() - 2.0 * kab.mean()
    elif estimator == "unbiased":
        na, nb = len(sample_a), len(sample_b)
        if na < 2 or nb < 2:
            raise ValueError("unbiased estimator needs at least two items per sample")
        value = ((kaa.sum() - np.trace(kaa)) / (na * (na - 1))
                 + (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1)) - 2.0 * kab.mean())
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return MmdReport(kinds.pop(), float(value), asdict(kernel), len(sample_a), len(sample_b),
                     estimator)


def mmd_graphs(graphs_a: Sequence[Graph], graphs_b: Sequence[Graph], kind: str,
               kernel: KernelSpec | None = None, estimator: str = "biased") -> MmdReport:
    return mmd([graph_statistic(g, kind) for g in graphs_a],
               [graph_statistic(g, kind) for g in graphs_b], kernel, estimator)


# ----------------------------------------------------------------------------
# Latent interpolation and figure data
# ----------------------------------------------------------------------------


@dataclass
class Interpolation:
    weights: np.ndarray
    latents: list = field(default_factory=list)
    graphs: list = field(default_factory=list)


@torch.no_grad()
def interpolate_latents(model: GEVAE, g_a: Graph, emb_a: EmbeddingMatrix, g_b: Graph,
                        emb_b: EmbeddingMatrix, steps: int, seed: int = 0) -> Interpolation:
    """Decode and sample graphs along the straight line between two encodings.

    Encodings are noise-free (``Z = f(Embed(A))``). A smaller graph is padded
    with masked nodes whose latent rows stay at zero, and every step is
    decoded with all ``max(n_a, n_b)`` nodes.
    """
    if steps < 1:
        raise ValueError("steps must be at least 1")
    n = max(g_a.n, g_b.n)
    batch = GraphBatch.collate([g_a, g_b], [emb_a, emb_b])
    z, _ = model.flow(batch.embedding, batch.mask)
    rng = np.random.default_rng(seed)
    weights = np.linspace(0.0, 1.0, steps) if steps > 1 else np.zeros(1)
    out = Interpolation(weights)
    full = torch.ones(1, n, dtype=torch.bool)
    for t in weights:
        zt = (1.0 - t) * z[0:1] + t * z[1:2]
        zstar = model.decode_zstar(zt, full)[0].numpy()
        out.latents.append(zt[0].numpy())
        out.graphs.append(sample_from_zstar_fast(zstar, rng))
    return out


def ladder_tables(rungs: Sequence[int] = (4, 8, 16, 32), dim: int = 8) -> dict:
    """Laplacian eigenmap of ladder graphs: rung count -> (eigenvalues, coordinates)."""
    tables = {}
    for k in rungs:
        emb = laplacian_eigenmap(ladder_graph(k), dim)
        cols = emb.valid_columns
        tables[int(k)] = (emb.eigenvalues[:cols], emb.values[:, :cols])
    return tables


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std()), "count": int(v.size)}
