"""Immutable sparse graph with normalized-Laplacian and energy operators.

Graphs are stored as a directed edge list that is closed under reversal:
every undirected edge contributes both (i, j) and (j, i). Direction only
matters downstream, where learned per-edge transport weights live.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .runtime import philox


class Graph:
    """Sparse symmetric graph over ``n_nodes`` nodes.

    Directed edges are sorted lexicographically by (source, target), held
    in ``edge_src`` / ``edge_dst``, and indexed CSR-style by ``out_indptr``
    so that the outbound edges of node i occupy the contiguous slice
    ``out_indptr[i]:out_indptr[i+1]``. ``rev_edge`` maps each directed
    edge to its reverse orientation. Instances are immutable after
    construction and safe to share across threads.
    """

    def __init__(self, n_nodes: int, edge_src: np.ndarray, edge_dst: np.ndarray):
        self.n_nodes = int(n_nodes)
        self.edge_src = edge_src
        self.edge_dst = edge_dst
        self.n_edges = len(edge_src)

        self.degree = np.bincount(edge_src, minlength=self.n_nodes).astype(np.int64)
        self.isolated = self.degree == 0
        self.out_indptr = np.concatenate(([0], np.cumsum(self.degree)))

        # Reverse-edge permutation: position of (dst, src) in the sorted list.
        key = edge_src * self.n_nodes + edge_dst
        rev_key = edge_dst * self.n_nodes + edge_src
        self.rev_edge = np.searchsorted(key, rev_key)
        if self.n_edges:
            clipped = np.minimum(self.rev_edge, self.n_edges - 1)
            if not np.array_equal(key[clipped], rev_key):
                raise ValueError("edge set is not closed under reversal")
            self.rev_edge = clipped

        deg = self.degree.astype(np.float64)
        with np.errstate(divide="ignore"):
            d_inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1.0)), 0.0)
        self._deg_mask = (deg > 0).astype(np.float64)
        # D^{-1/2} A D^{-1/2}, with the convention that isolated nodes get
        # all-zero rows (their D^{-1/2} entry is 0).
        weights = d_inv_sqrt[edge_src] * d_inv_sqrt[edge_dst]
        self._adj_norm = sp.csr_matrix(
            (weights, (edge_dst, edge_src)), shape=(self.n_nodes, self.n_nodes)
        )
        self._adj = sp.csr_matrix(
            (np.ones(self.n_edges), (edge_dst, edge_src)), shape=(self.n_nodes, self.n_nodes)
        )
        self._selectors: dict[str, tuple] = {}

    def edge_selector(self, kind: str):
        """Cached (matrix, transpose) pair of constant sparse selectors:
        'src'/'dst' gather node rows onto edges (transpose scatter-adds
        edges back onto nodes); 'rev' permutes edges onto their reverses."""
        if kind not in self._selectors:
            m, n = self.n_edges, self.n_nodes
            ones = np.ones(m)
            rows = np.arange(m)
            if kind == "src":
                mat = sp.csr_matrix((ones, (rows, self.edge_src)), shape=(m, n))
            elif kind == "dst":
                mat = sp.csr_matrix((ones, (rows, self.edge_dst)), shape=(m, n))
            elif kind == "rev":
                mat = sp.csr_matrix((ones, (rows, self.rev_edge)), shape=(m, m))
            else:
                raise ValueError(f"unknown selector {kind!r}")
            self._selectors[kind] = (mat, mat.T.tocsr())
        return self._selectors[kind]

    def out_edges(self, i: int) -> slice:
        return slice(self.out_indptr[i], self.out_indptr[i + 1])

    def neighbors(self, i: int) -> np.ndarray:
        return self.edge_dst[self.out_edges(i)]

    def adjacency(self) -> sp.csr_matrix:
        return self._adj

    def __repr__(self) -> str:  # pragma: no cover
        return f"Graph(n_nodes={self.n_nodes}, directed_edges={self.n_edges})"


def build_graph(edge_list, n_nodes: int, symmetrize: bool = True) -> Graph:
    """Construct a :class:`Graph` from (i, j) pairs.

    Self-loops are dropped and duplicates removed. With ``symmetrize=True``
    the reverse of every edge is added; with ``symmetrize=False`` the input
    must already be closed under reversal.
    """
    if n_nodes < 1:
        raise ValueError("n_nodes must be >= 1")
    edges = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if len(edges):
        bad = (edges < 0) | (edges >= n_nodes)
        if bad.any():
            offender = edges[bad.any(axis=1)][0]
            raise ValueError(
                f"edge ({offender[0]}, {offender[1]}) out of range for n_nodes={n_nodes}"
            )
        edges = edges[edges[:, 0] != edges[:, 1]]
    if symmetrize and len(edges):
        edges = np.concatenate([edges, edges[:, ::-1]], axis=0)
    if len(edges):
        keys = edges[:, 0] * n_nodes + edges[:, 1]
        keys = np.unique(keys)
        src, dst = keys // n_nodes, keys % n_nodes
    else:
        src = dst = np.zeros(0, dtype=np.int64)
    return Graph(n_nodes, src, dst)


def laplacian_apply(g: Graph, u: np.ndarray) -> np.ndarray:
    """Apply the symmetric normalized Laplacian D^{-1/2}(D-A)D^{-1/2}.

    Row i of the result is u_i - sum_{j in N_i} u_j / sqrt(d_i d_j) for
    nodes with neighbors; isolated nodes map to zero rows.
    """
    u = np.asarray(u)
    if u.shape[0] != g.n_nodes:
        raise ValueError(f"feature rows {u.shape[0]} != n_nodes {g.n_nodes}")
    if u.ndim == 1:
        return g._deg_mask * u - g._adj_norm @ u
    return g._deg_mask[:, None] * u - g._adj_norm @ u


def laplacian_dense(g: Graph) -> np.ndarray:
    """Dense normalized Laplacian (test support; small graphs only)."""
    eye = np.diag(g._deg_mask)
    return eye - g._adj_norm.toarray()


def dirichlet_energy(g: Graph, u: np.ndarray) -> float:
    """Mean squared feature difference across directed edges.

    E(U) = (1/n) * sum_i sum_{j in N_i} ||U_i - U_j||^2, each undirected
    pair counted once per orientation. Zero iff U is constant on every
    connected component.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim == 1:
        u = u[:, None]
    if u.shape[0] != g.n_nodes:
        raise ValueError(f"feature rows {u.shape[0]} != n_nodes {g.n_nodes}")
    diff = u[g.edge_src] - u[g.edge_dst]
    return float((diff * diff).sum() / g.n_nodes)


@dataclass
class EnergyReport:
    """Per-layer Dirichlet energies and the values relative to layer 0."""

    per_layer_energy: list[float]
    relative_energy: list[float]

    @classmethod
    def from_energies(cls, energies) -> "EnergyReport":
        energies = [float(e) for e in energies]
        base = energies[0] if energies and energies[0] > 0 else 1.0
        return cls(energies, [e / base for e in energies])


def erdos_renyi(n: int, p: float, seed: int) -> Graph:
    """G(n, p) random graph: each unordered pair kept with probability p,
    then symmetrized. Deterministic for a fixed seed."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p={p} outside [0, 1]")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = philox(seed)
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(len(iu)) < p
    pairs = np.stack([iu[keep], ju[keep]], axis=1)
    return build_graph(pairs, n, symmetrize=True)
