"""Permutation-equivariant node embeddings: Laplacian eigenmaps and graph LLE.

Both methods return the eigenvectors for the ``P`` smallest eigenvalues of a
symmetric graph operator, with a deterministic sign convention so that
relabelling the nodes of a graph with a simple spectrum permutes the rows of
the embedding and changes nothing else.
"""
from __future__ import annotations

import io
import logging
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graphcore import Graph, laplacian

logger = logging.getLogger(__name__)

METHODS = ("eigenmap", "lle")
CACHE_VERSION = 2
DEGENERACY_GAP = 1e-6


class EmbeddingError(ArithmeticError):
    """Eigensolver failure for a specific graph."""

    def __init__(self, message: str, graph_id=None):
        prefix = f"graph {graph_id}: " if graph_id is not None else ""
        super().__init__(prefix + message)
        self.graph_id = graph_id


@dataclass
class EmbeddingMatrix:
    """Node coordinates for one graph, possibly zero-padded.

    Attributes
    ----------
    values : ndarray, shape (rows, P)
        Row ``i`` is the embedding of node ``i``. Rows at and beyond ``n`` are
        padding and are exactly zero.
    mask : ndarray of bool, shape (rows,)
        True for real nodes.
    eigenvalues : ndarray, shape (P,)
        Eigenvalue per column; columns with no eigenvector (``n < P``) hold 0.
    valid_columns : int
        ``min(n, P)``; remaining columns are zero.
    degenerate : bool
        True when a repeated eigenvalue among the kept columns (or across the
        cut at ``P``) makes the basis depend on the node ordering.
    sign_ambiguous : bool
        True when some kept column has opposite-signed entries tied for the
        largest magnitude, so the lowest-index tie break depends on labels.
    """

    values: np.ndarray
    mask: np.ndarray
    method: str
    eigenvalues: np.ndarray
    valid_columns: int
    degenerate: bool
    sign_ambiguous: bool = False

    @property
    def n(self) -> int:
        return int(self.mask.sum())

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def padded(self, rows: int) -> "EmbeddingMatrix":
        if rows < self.values.shape[0]:
            raise ValueError(f"cannot pad {self.values.shape[0]} rows down to {rows}")
        values = np.zeros((rows, self.dim))
        values[: self.values.shape[0]] = self.values
        mask = np.zeros(rows, dtype=bool)
        mask[: self.mask.shape[0]] = self.mask
        return EmbeddingMatrix(values, mask, self.method, self.eigenvalues.copy(),
                               self.valid_columns, self.degenerate, self.sign_ambiguous)


def fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive.

    Ties in magnitude go to the lowest row index. Magnitudes are compared after
    rounding to 12 decimals so that numerically equal entries tie.
    """
    out = np.array(vectors, dtype=float, copy=True)
    if out.size == 0:
        return out
    mags = np.round(np.abs(out), 12)
    rows = np.argmax(mags, axis=0)
    signs = np.sign(out[rows, np.arange(out.shape[1])])
    signs[signs == 0] = 1.0
    return out * signs


def sign_ambiguous(vectors: np.ndarray) -> bool:
    """True if any column has entries of both signs tied for the largest magnitude."""
    v = np.asarray(vectors, dtype=float)
    if v.size == 0:
        return False
    mags = np.round(np.abs(v), 12)
    top = mags == mags.max(axis=0, keepdims=True)
    return bool(np.any(np.any(top & (v > 0), axis=0) & np.any(top & (v < 0), axis=0)))


def _spectral_embedding(op: np.ndarray, P: int, graph_id=None):
    try:
        evals, evecs = np.linalg.eigh(op)
    except np.linalg.LinAlgError as exc:
        raise EmbeddingError(f"eigendecomposition failed: {exc}", graph_id) from exc
    if not (np.all(np.isfinite(evals)) and np.all(np.isfinite(evecs))):
        raise EmbeddingError("eigendecomposition returned non-finite values", graph_id)
    k = min(P, op.shape[0])
    kept = evals[: k + 1] if k < op.shape[0] else evals[:k]
    degenerate = bool(np.any(np.diff(kept) < DEGENERACY_GAP))
    values = np.zeros((op.shape[0], P))
    values[:, :k] = fix_signs(evecs[:, :k])
    eigenvalues = np.zeros(P)
    eigenvalues[:k] = evals[:k]
    return values, eigenvalues, k, degenerate, sign_ambiguous(evecs[:, :k])


def laplacian_eigenmap(g: Graph, P: int, graph_id=None) -> EmbeddingMatrix:
    """Eigenvectors of ``D - A`` for the ``P`` smallest eigenvalues.

    The constant eigenvector (eigenvalue 0) is kept. When ``g.n < P`` the
    trailing columns are zero and ``valid_columns < P``.
    """
    if int(P) < 1:
        raise ValueError(f"P must be positive, got {P}")
    values, evals, k, degenerate, ambiguous = _spectral_embedding(laplacian(g), int(P), graph_id)
    degenerate = degenerate or k < P
    return EmbeddingMatrix(values, np.ones(g.n, dtype=bool), "eigenmap", evals, k, degenerate,
                           ambiguous)


def lle_weights(g: Graph, k_neighbors: int | None = None, reg: float = 1e-3) -> np.ndarray:
    """Locally linear reconstruction weights over graph neighbourhoods.

    Each node is represented by its adjacency row. Node ``i`` is reconstructed
    from its graph neighbours (all of them, or the ``k_neighbors`` closest in
    Hamming distance between adjacency rows, keeping every neighbour tied with
    the k-th so the choice does not depend on labels). Weights sum to one.
    Isolated nodes get an all-zero row.
    """
    a = g.dense()
    nbrs = g.neighbors()
    w = np.zeros((g.n, g.n))
    for i, nb in enumerate(nbrs):
        if nb.size == 0:
            continue
        diffs = a[i][None, :] - a[nb]
        if k_neighbors is not None and nb.size > k_neighbors:
            dist = np.abs(diffs).sum(axis=1)
            cutoff = np.sort(dist)[k_neighbors - 1]
            keep = dist <= cutoff
            nb, diffs = nb[keep], diffs[keep]
        gram = diffs @ diffs.T
        trace = np.trace(gram)
        gram = gram + np.eye(nb.size) * (reg * trace if trace > 0 else reg)
        coef = np.linalg.solve(gram, np.ones(nb.size))
        w[i, nb] = coef / coef.sum()
    return w


def lle_embed(g: Graph, P: int, k_neighbors: int | None = None, reg: float = 1e-3,
              graph_id=None) -> EmbeddingMatrix:
    """Locally linear embedding with the graph adjacency as neighbourhood.

    Coordinates are the bottom ``P`` eigenvectors of ``(I - W)^T (I - W)``
    restricted to non-isolated nodes; isolated nodes embed to the zero row.
    """
    if int(P) < 1:
        raise ValueError(f"P must be positive, got {P}")
    P = int(P)
    w = lle_weights(g, k_neighbors, reg)
    active = g.degrees() > 0
    values = np.zeros((g.n, P))
    evals = np.zeros(P)
    k, degenerate, ambiguous = 0, True, False
    if active.any():
        idx = np.flatnonzero(active)
        resid = np.eye(idx.size) - w[np.ix_(idx, idx)]
        sub_vals, evals, k, degenerate, ambiguous = _spectral_embedding(resid.T @ resid, P,
                                                                        graph_id)
        values[idx] = sub_vals
    return EmbeddingMatrix(values, np.ones(g.n, dtype=bool), "lle", evals, k,
                           degenerate or k < P, ambiguous)


def embed(g: Graph, P: int, method: str = "eigenmap", graph_id=None, **kwargs) -> EmbeddingMatrix:
    if method == "eigenmap":
        return laplacian_eigenmap(g, P, graph_id=graph_id)
    if method == "lle":
        return lle_embed(g, P, graph_id=graph_id, **kwargs)
    raise ValueError(f"unknown embedding method {method!r}; expected one of {METHODS}")


def embed_batch(graphs: Sequence[Graph], P: int, method: str = "eigenmap",
                **kwargs) -> list[EmbeddingMatrix]:
    """Embed every graph and zero-pad all results to the largest node count."""
    if len(graphs) == 0:
        raise ValueError("embed_batch needs at least one graph")
    singles = [embed(g, P, method, graph_id=k, **kwargs) for k, g in enumerate(graphs)]
    rows = max(g.n for g in graphs)
    return [e.padded(rows) for e in singles]


class EmbeddingCache:
    """On-disk cache of embeddings keyed by (graph digest, P, method).

    Each entry is a versioned ``.npz`` file; writes go to a temporary file in
    the same directory followed by an atomic rename.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path(self, g: Graph, P: int, method: str) -> Path:
        return self.directory / f"{g.digest()[:32]}_{method}_P{int(P)}.npz"

    def load(self, g: Graph, P: int, method: str) -> EmbeddingMatrix | None:
        path = self.path(g, P, method)
        if not path.exists():
            return None
        with np.load(path) as data:
            if int(data["version"]) != CACHE_VERSION or int(data["n"]) != g.n:
                return None
            return EmbeddingMatrix(
                values=data["values"].copy(),
                mask=np.ones(g.n, dtype=bool),
                method=str(data["method"]),
                eigenvalues=data["eigenvalues"].copy(),
                valid_columns=int(data["valid_columns"]),
                degenerate=bool(data["degenerate"]),
                sign_ambiguous=bool(data["sign_ambiguous"]),
            )

    def store(self, g: Graph, emb: EmbeddingMatrix) -> Path:
        path = self.path(g, emb.dim, emb.method)
        buf = io.BytesIO()
        np.savez(buf, version=CACHE_VERSION, n=g.n, P=emb.dim, method=emb.method,
                 values=emb.values[: g.n], eigenvalues=emb.eigenvalues,
                 valid_columns=emb.valid_columns, degenerate=emb.degenerate,
                 sign_ambiguous=emb.sign_ambiguous)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(buf.getvalue())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return path

    def get(self, g: Graph, P: int, method: str = "eigenmap", **kwargs) -> EmbeddingMatrix:
        hit = self.load(g, P, method)
        if hit is not None:
            return hit
        emb = embed(g, P, method, **kwargs)
        self.store(g, emb)
        return emb


def embed_dataset(graphs: Sequence[Graph], P: int, method: str = "eigenmap",
                  cache: EmbeddingCache | None = None, workers: int = 1,
                  **kwargs) -> list[EmbeddingMatrix]:
    """Unpadded embeddings for a list of graphs, optionally cached and parallel."""
    def one(item):
        k, g = item
        if cache is not None:
            return cache.get(g, P, method, **kwargs)
        return embed(g, P, method, graph_id=k, **kwargs)

    items = list(enumerate(graphs))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, items))
    return [one(it) for it in items]
