"""k-NN hypergraphs over ROIs and the row-normalised propagation operator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ValidationError

FC_TOL = 1e-9


def validate_fc(fc: np.ndarray, *, name: str = "fc") -> np.ndarray:
    """Check the FC invariants (square, finite, symmetric, unit diagonal, |r| <= 1)."""
    fc = np.asarray(fc, dtype=np.float64)
    if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
        raise ValidationError(f"{name}: expected a square matrix, got shape {fc.shape}")
    if not np.all(np.isfinite(fc)):
        raise ValidationError(f"{name}: non-finite entries")
    if np.max(np.abs(fc - fc.T), initial=0.0) > FC_TOL:
        raise ValidationError(f"{name}: not symmetric within {FC_TOL}")
    if np.max(np.abs(np.diag(fc) - 1.0), initial=0.0) > FC_TOL:
        raise ValidationError(f"{name}: diagonal is not 1 within {FC_TOL}")
    if np.max(np.abs(fc), initial=0.0) > 1.0 + FC_TOL:
        raise ValidationError(f"{name}: correlations outside [-1, 1]")
    return fc


@dataclass(frozen=True)
class Hypergraph:
    incidence: np.ndarray  # N x K, entries in {0, 1}
    members: tuple[tuple[int, ...], ...]
    k_per_edge: int

    @property
    def n_nodes(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_hyperedges(self) -> int:
        return self.incidence.shape[1]

    @property
    def hyperedge_degrees(self) -> np.ndarray:
        return self.incidence.sum(axis=0)

    @classmethod
    def from_members(cls, members, n_nodes: int) -> Hypergraph:
        members = tuple(tuple(sorted(int(i) for i in m)) for m in members)
        H = np.zeros((n_nodes, len(members)))
        for j, m in enumerate(members):
            H[list(m), j] = 1.0
        sizes = {len(m) for m in members}
        return cls(H, members, sizes.pop() if len(sizes) == 1 else -1)

    def permuted(self, perm) -> Hypergraph:
        """Relabel node ``perm[i]`` as node ``i``; hyperedges follow their centres."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        members = [tuple(int(inv[v]) for v in self.members[perm[j]]) for j in range(len(perm))]
        return Hypergraph.from_members(members, self.n_nodes)


def build_knn_hyperedges(fc, k: int) -> Hypergraph:
    """One hyperedge per ROI: the ROI itself plus its ``k - 1`` most correlated ROIs.

    Neighbours are ranked by signed correlation, ties going to the lower index.
    """
    fc = validate_fc(fc)
    n = fc.shape[0]
    if not 2 <= k <= n:
        raise ParameterError(f"k must satisfy 2 <= k <= N={n}, got {k}")
    members = []
    idx = np.arange(n)
    for j in range(n):
        others = idx[idx != j]
        # lexsort: last key is primary; stable on index for equal correlations
        order = others[np.lexsort((others, -fc[j, others]))]
        members.append((j, *order[: k - 1].tolist()))
    return Hypergraph.from_members(members, n)


def _check_weights(w, n_edges: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.size != n_edges:
        raise ParameterError(f"expected {n_edges} hyperedge weights, got {w.size}")
    if not np.all(w > 0):
        raise ParameterError("hyperedge weights must be strictly positive")
    return w


def vertex_degrees(hg: Hypergraph, w) -> np.ndarray:
    """Weighted vertex degrees ``D_ii = sum_j w_j H_ij``."""
    w = _check_weights(w, hg.n_hyperedges)
    return hg.incidence @ w


def propagation_matrix(hg: Hypergraph, w) -> np.ndarray:
    """``D^-1 H diag(w) B^-1 H^T``; row-stochastic for any positive ``w``."""
    w = _check_weights(w, hg.n_hyperedges)
    d = vertex_degrees(hg, w)
    H = hg.incidence
    return (H * (w / hg.hyperedge_degrees)) @ H.T / d[:, None]
