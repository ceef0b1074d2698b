"""Semantic homophily measurements over meta-path subgraphs and KNN graphs."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .graph import HeteroGraph, MetaPath, SparseAdjacency, metapath_adjacency


def edge_hr(a: SparseAdjacency, y) -> float:
    """Fraction of undirected edges whose endpoints share a label (each edge counted once)."""
    y = np.asarray(y)
    if len(y) != a.n:
        raise ValueError(f"labels have length {len(y)}, adjacency has {a.n} nodes")
    rows, cols = a.upper_edges()
    if len(rows) == 0:
        raise ValueError("no edges")
    return int(np.count_nonzero(y[rows] == y[cols])) / len(rows)


def _require_labels(g: HeteroGraph) -> np.ndarray:
    if g.labels is None:
        raise ValueError("labels required")
    return g.labels


def mhr(g: HeteroGraph, mp: MetaPath) -> float:
    return edge_hr(metapath_adjacency(g, mp), _require_labels(g))


def node_hr(a: SparseAdjacency, y) -> np.ndarray:
    """Per-node same-label neighbor fraction; NaN marks isolated nodes."""
    y = np.asarray(y)
    m = a.matrix
    deg = np.diff(m.indptr)
    owner = np.repeat(np.arange(a.n), deg)
    hits = np.bincount(owner[y[m.indices] == y[owner]], minlength=a.n)
    out = np.full(a.n, np.nan)
    nz = deg > 0
    out[nz] = hits[nz] / deg[nz]
    return out


def nhr(g: HeteroGraph, mp: MetaPath) -> np.ndarray:
    return node_hr(metapath_adjacency(g, mp), _require_labels(g))


def knn_graph(x, k: int) -> SparseAdjacency:
    """Cosine k-NN graph (self excluded), symmetrized by union.

    Ties are broken toward the lower node index.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of nodes ({n})")
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise ValueError(f"node {zero[0]} has an all-zero feature row")
    xn = x / norms[:, None]
    rows, cols = [], []
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        sim = xn[start:stop] @ xn.T
        sim[np.arange(stop - start), np.arange(start, stop)] = -np.inf
        order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
        rows.append(np.repeat(np.arange(start, stop), k))
        cols.append(order.ravel())
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    m = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
    m = ((m + m.T) > 0).astype(np.float64)
    return SparseAdjacency(m.tocsr(), symmetric=True)


@dataclass
class HomophilyReport:
    mhr: dict[str, float]
    nhr: dict[str, np.ndarray]
    knn_hr: dict[int, float]
    isolated: dict[str, int]
    n_edges: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mhr": dict(self.mhr),
            "knn_hr": {str(k): v for k, v in self.knn_hr.items()},
            "isolated": dict(self.isolated),
            "n_edges": dict(self.n_edges),
            "nhr_summary": {
                name: {
                    "mean": float(np.nanmean(v)) if np.isfinite(v).any() else None,
                    "n_missing": int(np.isnan(v).sum()),
                }
                for name, v in self.nhr.items()
            },
        }

    def write_nhr_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("node_id\tmetapath\tvalue\n")
            for name, vals in self.nhr.items():
                for i, v in enumerate(vals):
                    fh.write(f"{i}\t{name}\t{'' if np.isnan(v) else repr(float(v))}\n")


def homophily_report(g: HeteroGraph, knn_ks: Iterable[int] = ()) -> HomophilyReport:
    y = _require_labels(g)
    mhrs, nhrs, isolated, n_edges = {}, {}, {}, {}
    for mp in g.metapaths:
        a = metapath_adjacency(g, mp)
        mhrs[mp.name] = edge_hr(a, y)
        nhrs[mp.name] = node_hr(a, y)
        isolated[mp.name] = int(np.count_nonzero(a.degrees() == 0))
        n_edges[mp.name] = a.nnz // 2
    knn = {int(k): edge_hr(knn_graph(g.features, int(k)), y) for k in knn_ks}
    return HomophilyReport(mhrs, nhrs, knn, isolated, n_edges)
