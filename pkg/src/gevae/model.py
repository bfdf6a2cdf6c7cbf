"""Graph embedding VAE: encoder, Bernoulli-Exponential decoder and ELBO.

Encoder::

    Z0 | A ~ Normal(Embed(A), sigma^2 I),    Z = f(Z0)

Decoder::

    Z ~ Normal(0, I),    Z* = softplus(ISABStack(f^-1(Z))),
    m_ij ~ Exponential(z*_i . z*_j),  a_ij = [m_ij < 1]

The joint likelihood of ``(A, M)`` and the truncated-exponential posterior of
``M`` only touch the edge list and per-channel column sums of ``Z*``, so the
ELBO costs ``O(|V| + |E|)`` per graph.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import ISABStack
from .embed import EmbeddingMatrix
from .flow import Flow
from .graphcore import Graph
from .utils import float64_modules

LOG_2PI = math.log(2.0 * math.pi)
DTYPE = torch.float64


class ElboNumericalError(ArithmeticError):
    def __init__(self, message: str, terms: dict | None = None):
        if terms:
            message += " (" + ", ".join(f"{k}={v}" for k, v in terms.items()) + ")"
        super().__init__(message)
        self.terms = terms or {}


@dataclass
class ModelConfig:
    """Architecture and likelihood hyperparameters."""

    embed_dim: int = 6
    decoder_dim: int | None = None
    flow_depth: int = 6
    bins: int = 8
    tail_bound: float = 3.0
    width: int = 64
    heads: int = 4
    inducing_points: int = 32
    conditioner_depth: int = 2
    decoder_depth: int = 3
    sigma: float = 0.1
    eps_rate: float = 1e-8

    def __post_init__(self):
        if self.decoder_dim is None:
            self.decoder_dim = self.embed_dim
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Graphs padded to a common node count with a flat edge list.

    ``edge_graph[e]`` is the batch index of edge ``e`` and ``edge_src``/
    ``edge_dst`` are its endpoints (``src < dst``) inside that graph.
    """

    graphs: list
    embedding: torch.Tensor
    mask: torch.Tensor
    edge_graph: torch.Tensor
    edge_src: torch.Tensor
    edge_dst: torch.Tensor
    num_nodes: torch.Tensor
    num_edges: torch.Tensor

    @property
    def size(self) -> int:
        return len(self.graphs)

    @property
    def num_pairs(self) -> torch.Tensor:
        return self.num_nodes * (self.num_nodes - 1) / 2.0

    @classmethod
    def collate(cls, graphs: Sequence[Graph], embeddings: Sequence[EmbeddingMatrix] | None = None,
                embed_dim: int | None = None) -> "GraphBatch":
        graphs = list(graphs)
        if not graphs:
            raise ValueError("empty batch")
        rows = max(g.n for g in graphs)
        if embeddings is None:
            if embed_dim is None:
                raise ValueError("embed_dim is required without embeddings")
            values = torch.zeros(len(graphs), rows, embed_dim, dtype=DTYPE)
        else:
            dims = {e.dim for e in embeddings}
            if len(dims) != 1:
                raise ValueError(f"embeddings disagree on P: {sorted(dims)}")
            values = torch.zeros(len(graphs), rows, dims.pop(), dtype=DTYPE)
            for b, (g, e) in enumerate(zip(graphs, embeddings)):
                if int(e.mask.sum()) != g.n:
                    raise ValueError(f"embedding {b} has {int(e.mask.sum())} rows for n={g.n}")
                values[b, : g.n] = torch.as_tensor(e.values[: g.n], dtype=DTYPE)
        mask = torch.zeros(len(graphs), rows, dtype=torch.bool)
        for b, g in enumerate(graphs):
            mask[b, : g.n] = True
        edges = [torch.from_numpy(np.array(g.edges, dtype=np.int64)).reshape(-1, 2) for g in graphs]
        edge_graph = torch.cat([torch.full((len(e),), b, dtype=torch.long) for b, e in enumerate(edges)])
        flat = torch.cat(edges, dim=0)
        return cls(
            graphs=graphs,
            embedding=values,
            mask=mask,
            edge_graph=edge_graph,
            edge_src=flat[:, 0],
            edge_dst=flat[:, 1],
            num_nodes=torch.tensor([g.n for g in graphs], dtype=DTYPE),
            num_edges=torch.tensor([g.num_edges for g in graphs], dtype=DTYPE),
        )

    def repeat(self, k: int) -> "GraphBatch":
        """Each graph ``k`` times in a row (importance sampling)."""
        idx = torch.arange(self.size).repeat_interleave(k)
        rep = GraphBatch.collate([self.graphs[i] for i in idx.tolist()],
                                 embed_dim=self.embedding.shape[-1])
        return replace(rep, embedding=self.embedding[idx])


# ----------------------------------------------------------------------------
# Likelihood pieces
# ----------------------------------------------------------------------------


def _segment_sum(values: torch.Tensor, index: torch.Tensor, size: int) -> torch.Tensor:
    out = values.new_zeros(size)
    return out.index_add(0, index, values)


def edge_rates(batch: GraphBatch, zstar: torch.Tensor, eps_rate: float = 1e-8) -> torch.Tensor:
    """``max(z*_i . z*_j, eps_rate)`` for every edge in the batch."""
    zi = zstar[batch.edge_graph, batch.edge_src]
    zj = zstar[batch.edge_graph, batch.edge_dst]
    return (zi * zj).sum(dim=-1).clamp_min(eps_rate)


def total_pair_rate(zstar: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """``sum_{i<j} z*_i . z*_j`` per graph from column sums, ``O(n D)``."""
    if mask is not None:
        zstar = zstar * mask[..., None].to(zstar.dtype)
    col = zstar.sum(dim=1)
    return 0.5 * ((col * col).sum(dim=-1) - (zstar * zstar).sum(dim=(1, 2)))


def joint_loglik(batch: GraphBatch, m: torch.Tensor, zstar: torch.Tensor,
                 eps_rate: float = 1e-8) -> torch.Tensor:
    """``log p(A, M | Z*)`` per graph.

    ``sum_E [log lambda_ij - lambda_ij (m_ij - 1)] - sum_{i<j} lambda_ij``
    where ``m`` holds one auxiliary value per edge of the batch.
    """
    rate = edge_rates(batch, zstar, eps_rate)
    per_edge = torch.log(rate) - rate * (m - 1.0)
    return _segment_sum(per_edge, batch.edge_graph, batch.size) - total_pair_rate(zstar, batch.mask)


def marginal_loglik(batch: GraphBatch, zstar: torch.Tensor, eps_rate: float = 1e-8) -> torch.Tensor:
    """``log p(A | Z*)`` with the auxiliaries integrated out.

    Edges contribute ``log(1 - exp(-lambda))`` and non-edges ``-lambda``;
    evaluated as ``sum_E [log(1 - e^-lambda) + lambda] - sum_{i<j} lambda``.
    """
    rate = edge_rates(batch, zstar, eps_rate)
    per_edge = torch.log(-torch.expm1(-rate)) + rate
    return _segment_sum(per_edge, batch.edge_graph, batch.size) - total_pair_rate(zstar, batch.mask)


def truncated_exponential_icdf(u: torch.Tensor, rate: torch.Tensor) -> torch.Tensor:
    """Inverse CDF of ``Exponential(rate)`` truncated to ``[0, 1)``."""
    return -torch.log1p(u * torch.expm1(-rate)) / rate


def truncated_exponential_logpdf(m: torch.Tensor, rate: torch.Tensor) -> torch.Tensor:
    return torch.log(rate) - rate * m - torch.log(-torch.expm1(-rate))


def sample_aux_posterior(batch: GraphBatch, zstar: torch.Tensor, generator: torch.Generator | None = None,
                         u: torch.Tensor | None = None, eps_rate: float = 1e-8):
    """Reparameterized draw of ``M`` on the edges, and ``log q(M | A, Z*)`` per graph.

    Non-edges sit at ``m = 1`` with zero log-density and are not materialized.
    """
    rate = edge_rates(batch, zstar, eps_rate)
    if u is None:
        u = torch.rand(rate.shape, generator=generator, dtype=rate.dtype)
    m = truncated_exponential_icdf(u, rate)
    log_q = _segment_sum(truncated_exponential_logpdf(m, rate), batch.edge_graph, batch.size)
    return m, log_q


def gaussian_logpdf(x: torch.Tensor, mean: torch.Tensor | float, sigma: float,
                    mask: torch.Tensor) -> torch.Tensor:
    """Isotropic normal log-density summed over valid rows, per graph."""
    z = (x - mean) / sigma
    dens = -0.5 * z * z - math.log(sigma) - 0.5 * LOG_2PI
    return (dens * mask[..., None].to(x.dtype)).sum(dim=(1, 2))


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------


@dataclass
class Encoding:
    z: torch.Tensor
    z0: torch.Tensor
    log_q: torch.Tensor
    log_q_z0: torch.Tensor
    log_det: torch.Tensor


class GEVAE(nn.Module):
    """Latent-variable graph model with a flow-enriched embedding posterior.

    Parameters
    ----------
    config : ModelConfig
    seed : int, optional
        Seeds parameter initialization without touching the global RNG state.
    decoder : nn.Module, optional
        Replaces the ISAB decoder; called as ``decoder(z0, mask)`` and must
        return pre-positivity outputs of shape ``(B, n, decoder_dim)``.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int | None = 0,
                 decoder: nn.Module | None = None, positive=None):
        super().__init__()
        self.config = config = config or ModelConfig()
        with float64_modules(seed):
            self.flow = Flow(config.embed_dim, config.flow_depth, config.bins, config.tail_bound,
                             config.width, config.heads, config.inducing_points,
                             config.conditioner_depth)
            self.decoder = decoder if decoder is not None else ISABStack(
                config.embed_dim, config.decoder_dim, config.width, config.heads,
                config.inducing_points, config.decoder_depth)
        self.positive = positive if positive is not None else F.softplus
        self.to(DTYPE)

    @property
    def sigma(self) -> float:
        return self.config.sigma

    def encode(self, embedding: torch.Tensor, mask: torch.Tensor, noise: torch.Tensor | None = None,
               generator: torch.Generator | None = None, sigma: float | None = None) -> Encoding:
        """Reparameterized ``Z ~ q(Z | A)`` and its log-density per graph."""
        if embedding.shape[-1] != self.config.embed_dim:
            raise ValueError(f"embedding width {embedding.shape[-1]} does not match "
                             f"P={self.config.embed_dim}")
        sigma = self.sigma if sigma is None else sigma
        valid = mask[..., None].to(embedding.dtype)
        if noise is None:
            noise = torch.randn(embedding.shape, generator=generator, dtype=embedding.dtype)
        z0 = (embedding + sigma * noise) * valid
        # from the noise itself: (z0 - embedding) / sigma cancels badly for tiny sigma
        count = mask.sum(dim=1).to(embedding.dtype) * embedding.shape[-1]
        log_q_z0 = gaussian_logpdf(noise, 0.0, 1.0, mask) - math.log(sigma) * count
        z, log_det = self.flow(z0, mask)
        return Encoding(z, z0, log_q_z0 - log_det, log_q_z0, log_det)

    def zstar_from_z0(self, z0: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        out = self.positive(self.decoder(z0, mask))
        return out * mask[..., None].to(out.dtype)

    def decode_zstar(self, z: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``Z* = positive(ISABStack(f^-1(Z)))``; padded rows are zero."""
        if mask is None:
            mask = torch.ones(z.shape[:2], dtype=torch.bool)
        z0, _ = self.flow.inverse(z, mask)
        return self.zstar_from_z0(z0, mask)


@dataclass
class ElboReport:
    """Per-graph ELBO terms; ``elbo = log_prior + recon - log_q_z0 - log_q_m + log_det``."""

    elbo: torch.Tensor
    log_prior: torch.Tensor
    recon: torch.Tensor
    log_q_z0: torch.Tensor
    log_q_m: torch.Tensor
    log_det: torch.Tensor
    num_edges: torch.Tensor
    num_pairs: torch.Tensor

    @property
    def elbo_per_edge(self) -> torch.Tensor:
        return self.elbo / self.num_edges.clamp_min(1.0)

    @property
    def recon_per_edge(self) -> torch.Tensor:
        return self.recon / self.num_edges.clamp_min(1.0)

    @property
    def bits_per_dim(self) -> torch.Tensor:
        return -self.elbo / (math.log(2.0) * self.num_pairs.clamp_min(1.0))

    def summary(self) -> dict:
        """Batch means as floats."""
        out = {name: float(getattr(self, name).detach().mean())
               for name in ("elbo", "log_prior", "recon", "log_q_z0", "log_q_m", "log_det")}
        out["elbo_per_edge"] = float(self.elbo_per_edge.detach().mean())
        out["recon_per_edge"] = float(self.recon_per_edge.detach().mean())
        out["bits_per_dim"] = float(self.bits_per_dim.detach().mean())
        return out


def elbo(model: GEVAE, batch: GraphBatch, generator: torch.Generator | None = None,
         noise: torch.Tensor | None = None, u: torch.Tensor | None = None,
         sigma: float | None = None) -> ElboReport:
    """Single-sample reparameterized ELBO for every graph in ``batch``.

    The decoder is fed ``Z0`` directly, which equals ``f^-1(Z)`` exactly.
    """
    eps = model.config.eps_rate
    enc = model.encode(batch.embedding, batch.mask, noise=noise, generator=generator, sigma=sigma)
    zstar = model.zstar_from_z0(enc.z0, batch.mask)
    m, log_q_m = sample_aux_posterior(batch, zstar, generator=generator, u=u, eps_rate=eps)
    recon = joint_loglik(batch, m, zstar, eps)
    log_prior = gaussian_logpdf(enc.z, 0.0, 1.0, batch.mask)
    value = log_prior + recon - enc.log_q_z0 - log_q_m + enc.log_det
    report = ElboReport(value, log_prior, recon, enc.log_q_z0, log_q_m, enc.log_det,
                        batch.num_edges, batch.num_pairs)
    if not torch.isfinite(value).all():
        raise ElboNumericalError("non-finite ELBO", report.summary())
    return report
