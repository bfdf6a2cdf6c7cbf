"""Undirected graph container, permutations, synthetic datasets and edge-list I/O.

Graphs are stored as a node count plus a sorted canonical edge array with
``i < j`` in every row. Dense adjacency matrices are only built on request.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _components

logger = logging.getLogger(__name__)

__all__ = [
    "Graph",
    "GraphDataset",
    "GraphError",
    "InvalidPermutationError",
    "ParameterError",
    "EdgeListFormatError",
    "permute_graph",
    "invert_permutation",
    "laplacian",
    "connected_components",
    "generate",
    "community_graph",
    "grid_graph",
    "ladder_graph",
    "er_graph",
    "read_edge_list",
    "write_edge_list",
    "save_dataset",
    "load_dataset",
]


class GraphError(ValueError):
    """Raised when a graph violates its structural invariants."""


class InvalidPermutationError(GraphError):
    pass


class ParameterError(ValueError):
    """Raised for invalid dataset generator parameters."""


class EdgeListFormatError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


def _canonical_edges(edges, n: int) -> np.ndarray:
    arr = np.asarray(edges, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    if np.any(arr < 0) or np.any(arr >= n):
        raise GraphError(f"edge index out of range for n={n}")
    if np.any(arr[:, 0] == arr[:, 1]):
        raise GraphError("self-loops are not allowed")
    arr = np.sort(arr, axis=1)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    return arr[order]


@dataclass(frozen=True, eq=False)
class Graph:
    """Simple undirected graph on nodes ``0..n-1``.

    Parameters
    ----------
    n : int
        Number of nodes, at least 1.
    edges : array-like of shape (m, 2)
        Unordered node pairs. They are canonicalized to ``i < j`` and sorted
        lexicographically; duplicates and self-loops raise :class:`GraphError`.
    """

    n: int
    edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise GraphError(f"node count must be positive, got {self.n}")
        edges = _canonical_edges(self.edges, n)
        if len(edges) > 1:
            dup = np.all(edges[1:] == edges[:-1], axis=1)
            if dup.any():
                i, j = edges[1:][dup][0]
                raise GraphError(f"duplicate edge ({i}, {j})")
        edges.setflags(write=False)
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "edges", edges)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def num_pairs(self) -> int:
        return self.n * (self.n - 1) // 2

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edges, other.edges)

    def __hash__(self) -> int:
        return hash((self.n, self.edges.tobytes()))

    def __repr__(self) -> str:
        return f"Graph(n={self.n}, m={self.num_edges})"

    def digest(self) -> str:
        """Stable content hash, used as a cache key."""
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        h.update(np.ascontiguousarray(self.edges, dtype="<i8").tobytes())
        return h.hexdigest()

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n).astype(np.int64)

    def adjacency(self) -> sp.csr_matrix:
        """Sparse symmetric adjacency matrix."""
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * self.num_edges)
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        a[self.edges[:, 0], self.edges[:, 1]] = 1.0
        a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def neighbors(self) -> list[np.ndarray]:
        adj = self.adjacency()
        return [adj.indices[adj.indptr[k]:adj.indptr[k + 1]].copy() for k in range(self.n)]

    @classmethod
    def from_dense(cls, a) -> "Graph":
        a = np.asarray(a)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError("adjacency must be square")
        if not np.array_equal(a, a.T):
            raise GraphError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise GraphError("self-loops are not allowed")
        i, j = np.nonzero(np.triu(a, 1))
        return cls(a.shape[0], np.stack([i, j], axis=1))


def _check_permutation(perm, n: int) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    if p.ndim != 1 or p.shape[0] != n:
        raise InvalidPermutationError(
            f"permutation length {p.shape[0] if p.ndim == 1 else p.shape} does not match n={n}"
        )
    if not np.array_equal(np.sort(p), np.arange(n)):
        raise InvalidPermutationError("permutation is not a bijection on range(n)")
    return p


def invert_permutation(perm) -> np.ndarray:
    p = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0])
    return inv


def permute_graph(g: Graph, perm) -> Graph:
    """Relabel node ``i`` as ``perm[i]``, i.e. ``A -> P A P^T``."""
    p = _check_permutation(perm, g.n)
    return Graph(g.n, p[g.edges])


def laplacian(g: Graph, sparse: bool = False):
    """Unnormalized Laplacian ``D - A``."""
    adj = g.adjacency()
    lap = sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
    if sparse:
        return lap.tocsr()
    return lap.toarray()


def connected_components(g: Graph) -> np.ndarray:
    """Component label per node."""
    _, labels = _components(g.adjacency(), directed=False)
    return labels


# ----------------------------------------------------------------------------
# Generators
# ----------------------------------------------------------------------------


def _check_prob(name: str, p: float) -> float:
    p = float(p)
    if not (0.0 <= p <= 1.0) or math.isnan(p):
        raise ParameterError(f"{name} must lie in [0, 1], got {p}")
    return p


def _check_range(name: str, lo: int, hi: int, minimum: int = 1) -> tuple[int, int]:
    lo, hi = int(lo), int(hi)
    if lo < minimum or hi < lo:
        raise ParameterError(f"{name} range must satisfy {minimum} <= min <= max, got [{lo}, {hi}]")
    return lo, hi


def _er_block(rng: np.random.Generator, rows: np.ndarray, cols: np.ndarray, p: float, same: bool):
    if same:
        i, j = np.triu_indices(len(rows), k=1)
        pairs = np.stack([rows[i], rows[j]], axis=1)
    else:
        ii, jj = np.meshgrid(rows, cols, indexing="ij")
        pairs = np.stack([ii.ravel(), jj.ravel()], axis=1)
    keep = rng.random(len(pairs)) < p
    return pairs[keep]


def er_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    if int(n) < 1:
        raise ParameterError(f"n must be positive, got {n}")
    p = _check_prob("p", p)
    nodes = np.arange(int(n))
    return Graph(int(n), _er_block(rng, nodes, nodes, p, same=True))


def community_graph(sizes: Sequence[int], p_in: float, p_out: float, rng: np.random.Generator) -> Graph:
    """Stochastic block graph: ER(p_in) inside clusters, ER(p_out) between them."""
    p_in = _check_prob("p_in", p_in)
    p_out = _check_prob("p_out", p_out)
    if len(sizes) == 0 or any(int(s) < 1 for s in sizes):
        raise ParameterError(f"cluster sizes must be positive, got {list(sizes)}")
    bounds = np.cumsum([0, *map(int, sizes)])
    blocks = [np.arange(bounds[k], bounds[k + 1]) for k in range(len(sizes))]
    parts = []
    for a in range(len(blocks)):
        parts.append(_er_block(rng, blocks[a], blocks[a], p_in, same=True))
        for b in range(a + 1, len(blocks)):
            parts.append(_er_block(rng, blocks[a], blocks[b], p_out, same=False))
    return Graph(int(bounds[-1]), np.concatenate(parts, axis=0))


def grid_graph(rows: int, cols: int) -> Graph:
    rows, cols = int(rows), int(cols)
    if rows < 1 or cols < 1:
        raise ParameterError(f"grid dimensions must be positive, got {rows}x{cols}")
    idx = np.arange(rows * cols).reshape(rows, cols)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return Graph(rows * cols, np.concatenate([horiz, vert], axis=0))


def ladder_graph(rungs: int) -> Graph:
    """Two rails of ``rungs`` nodes joined rung by rung; node ``k + i`` sits opposite ``i``."""
    k = int(rungs)
    if k < 1:
        raise ParameterError(f"rung count must be positive, got {rungs}")
    a = np.arange(k)
    rails = [np.stack([a[:-1], a[1:]], axis=1), np.stack([a[:-1] + k, a[1:] + k], axis=1)]
    rung_edges = np.stack([a, a + k], axis=1)
    return Graph(2 * k, np.concatenate([*rails, rung_edges], axis=0))


_DEFAULTS = {
    "community": {"num_graphs": 200, "num_clusters": 2, "cluster_min": 10, "cluster_max": 15,
                  "p_in": 0.3, "p_out": 0.05},
    "grid": {"num_graphs": 200, "rows_min": 3, "rows_max": 8, "cols_min": 3, "cols_max": 8},
    "ladder": {"rungs": [4, 8, 16, 32]},
    "er": {"num_graphs": 200, "n": 20, "p": 0.2},
}


@dataclass(frozen=True)
class GraphDataset:
    """Immutable collection of graphs with a train/test tag per graph."""

    graphs: tuple
    splits: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(self, "splits", tuple(self.splits))
        if len(self.graphs) != len(self.splits):
            raise ValueError("one split tag is required per graph")
        bad = set(self.splits) - {"train", "test"}
        if bad:
            raise ValueError(f"unknown split tags {sorted(bad)}")

    def __len__(self) -> int:
        return len(self.graphs)

    def split(self, tag: str) -> list[Graph]:
        return [g for g, s in zip(self.graphs, self.splits) if s == tag]

    @property
    def train(self) -> list[Graph]:
        return self.split("train")

    @property
    def test(self) -> list[Graph]:
        return self.split("test")


def _assign_splits(count: int, train_fraction: float, rng: np.random.Generator) -> list[str]:
    if not 0.0 < train_fraction <= 1.0:
        raise ParameterError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n_train = int(round(train_fraction * count))
    if count > 1:
        n_train = min(max(n_train, 1), count - 1) if train_fraction < 1.0 else count
    order = rng.permutation(count)
    tags = ["test"] * count
    for k in order[:n_train]:
        tags[k] = "train"
    return tags


def generate(kind: str, params: dict | None = None, seed: int = 0,
             train_fraction: float = 2.0 / 3.0) -> GraphDataset:
    """Build a synthetic dataset; output is a deterministic function of ``seed``.

    Kinds and their parameters (defaults in brackets):

    - ``community``: num_graphs [200], num_clusters [2], cluster_min [10],
      cluster_max [15], p_in [0.3], p_out [0.05]. Cluster sizes are drawn
      uniformly from ``[cluster_min, cluster_max]``.
    - ``grid``: num_graphs [200], rows_min/rows_max/cols_min/cols_max [3..8].
    - ``ladder``: rungs, a list of rung counts, one graph per entry.
    - ``er``: num_graphs [200], n [20], p [0.2].
    """
    if kind not in _DEFAULTS:
        raise ParameterError(f"unknown dataset kind {kind!r}; expected one of {sorted(_DEFAULTS)}")
    cfg = dict(_DEFAULTS[kind])
    unknown = set(params or {}) - set(cfg)
    if unknown:
        raise ParameterError(f"unknown parameters for {kind}: {sorted(unknown)}")
    cfg.update(params or {})
    rng = np.random.default_rng(seed)

    graphs: list[Graph] = []
    if kind == "community":
        count = int(cfg["num_graphs"])
        k = int(cfg["num_clusters"])
        if count < 1 or k < 1:
            raise ParameterError("num_graphs and num_clusters must be positive")
        lo, hi = _check_range("cluster size", cfg["cluster_min"], cfg["cluster_max"])
        _check_prob("p_in", cfg["p_in"])
        _check_prob("p_out", cfg["p_out"])
        for _ in range(count):
            sizes = rng.integers(lo, hi + 1, size=k)
            graphs.append(community_graph(sizes, cfg["p_in"], cfg["p_out"], rng))
    elif kind == "grid":
        count = int(cfg["num_graphs"])
        if count < 1:
            raise ParameterError("num_graphs must be positive")
        rlo, rhi = _check_range("rows", cfg["rows_min"], cfg["rows_max"])
        clo, chi = _check_range("cols", cfg["cols_min"], cfg["cols_max"])
        for _ in range(count):
            graphs.append(grid_graph(rng.integers(rlo, rhi + 1), rng.integers(clo, chi + 1)))
    elif kind == "ladder":
        rungs = cfg["rungs"]
        if isinstance(rungs, (int, np.integer)):
            rungs = [rungs]
        if len(rungs) == 0:
            raise ParameterError("rungs must be non-empty")
        graphs = [ladder_graph(k) for k in rungs]
    else:
        count = int(cfg["num_graphs"])
        if count < 1:
            raise ParameterError("num_graphs must be positive")
        for _ in range(count):
            graphs.append(er_graph(cfg["n"], cfg["p"], rng))

    splits = _assign_splits(len(graphs), train_fraction, rng)
    meta = {"kind": kind, "params": _jsonable(cfg), "seed": int(seed),
            "train_fraction": float(train_fraction)}
    return GraphDataset(graphs, splits, meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# ----------------------------------------------------------------------------
# Edge-list I/O
# ----------------------------------------------------------------------------


def write_edge_list(g: Graph, path) -> None:
    """Write ``n m`` followed by one ``i j`` line per canonical edge."""
    path = Path(path)
    lines = [f"{g.n} {g.num_edges}"]
    lines.extend(f"{i} {j}" for i, j in g.edges)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _parse_ints(text: str, path, lineno: int, count: int) -> list[int]:
    parts = text.split()
    if len(parts) != count:
        raise EdgeListFormatError(f"expected {count} integers, got {text.strip()!r}", path, lineno)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise EdgeListFormatError(f"non-integer token in {text.strip()!r}", path, lineno) from None


def read_edge_list(path) -> Graph:
    """Parse an edge-list file.

    Pairs are canonicalized to ``i < j``; repeated pairs are dropped with a
    warning. Self-loops, out-of-range indices and malformed lines raise
    :class:`EdgeListFormatError` carrying the line number.
    """
    header = None
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    duplicates = 0
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            if header is None:
                n, m = _parse_ints(text, path, lineno, 2)
                if n < 1 or m < 0:
                    raise EdgeListFormatError(f"invalid header 'n m' = {n} {m}", path, lineno)
                header = (n, m)
                continue
            i, j = _parse_ints(text, path, lineno, 2)
            n = header[0]
            if i == j:
                raise EdgeListFormatError(f"self-loop ({i}, {j})", path, lineno)
            if not (0 <= i < n and 0 <= j < n):
                raise EdgeListFormatError(f"node index out of range [0, {n}) in ({i}, {j})", path, lineno)
            pair = (min(i, j), max(i, j))
            if pair in seen:
                duplicates += 1
                continue
            seen.add(pair)
            edges.append(pair)
    if header is None:
        raise EdgeListFormatError("missing 'n m' header", path)
    if duplicates:
        logger.warning("%s: dropped %d duplicate edge(s)", path, duplicates)
    if header[1] != len(edges) + duplicates:
        logger.warning("%s: header declares %d edges, found %d lines", path, header[1],
                       len(edges) + duplicates)
    return Graph(header[0], edges)


MANIFEST = "manifest.json"


def save_dataset(ds: GraphDataset, directory) -> Path:
    """Write one edge-list file per graph plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds))))
    entries = []
    for k, (g, tag) in enumerate(zip(ds.graphs, ds.splits)):
        name = f"graph_{k:0{width}d}.txt"
        write_edge_list(g, directory / name)
        entries.append({"file": name, "split": tag})
    manifest = {"version": 1, "meta": ds.meta, "graphs": entries}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return directory / MANIFEST


def load_dataset(directory) -> GraphDataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    graphs, splits = [], []
    for entry in manifest["graphs"]:
        graphs.append(read_edge_list(directory / entry["file"]))
        splits.append(entry.get("split", "train"))
    return GraphDataset(graphs, splits, manifest.get("meta", {}))


def iter_graph_files(directory) -> Iterable[Path]:
    return sorted(Path(directory).glob("*.txt"))
