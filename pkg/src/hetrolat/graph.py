"""Heterogeneous graph container, meta-path subgraphs and sparse normalizations.

All adjacency matrices over target nodes travel as :class:`SparseAdjacency`,
a thin validated wrapper around a canonical ``scipy.sparse.csr_matrix``
(sorted column indices, no explicit zeros, float64 values).
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp


class GraphFormatError(ValueError):
    """Raised when a dataset directory or graph object violates its invariants."""


@dataclass(frozen=True)
class SparseAdjacency:
    """Square CSR matrix over target nodes.

    When ``symmetric`` is set the transpose equality is verified value-exactly
    at construction time.
    """

    matrix: sp.csr_matrix
    symmetric: bool = False

    def __post_init__(self):
        m = self.matrix
        if not sp.isspmatrix_csr(m):
            m = sp.csr_matrix(m)
        m = m.astype(np.float64, copy=True)
        m.eliminate_zeros()
        m.sum_duplicates()
        m.sort_indices()
        if m.shape[0] != m.shape[1]:
            raise GraphFormatError(f"adjacency must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        if self.symmetric and (m != m.T).nnz:
            raise GraphFormatError("adjacency flagged symmetric but A != A^T")

    @classmethod
    def from_edges(cls, n: int, rows, cols, values=None, symmetric: bool = False) -> SparseAdjacency:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if values is None:
            values = np.ones(len(rows))
        m = sp.csr_matrix((values, (rows, cols)), shape=(n, n))
        return cls(m, symmetric=symmetric)

    @classmethod
    def from_dense(cls, a, symmetric: bool = False) -> SparseAdjacency:
        return cls(sp.csr_matrix(np.asarray(a, dtype=np.float64)), symmetric=symmetric)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def data(self) -> np.ndarray:
        return self.matrix.data

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def degrees(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    def row(self, i: int) -> np.ndarray:
        """Column indices of the nonzeros of row ``i``."""
        return self.indices[self.indptr[i]:self.indptr[i + 1]]

    def upper_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Each undirected edge once, as (i, j) with i < j."""
        coo = sp.triu(self.matrix, k=1).tocoo()
        return coo.row.astype(np.int64), coo.col.astype(np.int64)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.n).tobytes())
        for arr in (self.indptr.astype(np.int64), self.indices.astype(np.int64), self.data):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class MetaPath:
    """A named chain of edge types; ``~name`` traverses an edge type backwards."""

    name: str
    steps: tuple[str, ...]

    @classmethod
    def parse(cls, line: str) -> MetaPath:
        if ":" not in line:
            raise GraphFormatError(f"malformed metapath line: {line!r}")
        name, chain = line.split(":", 1)
        steps = tuple(s.strip() for s in chain.split(",") if s.strip())
        if not name.strip() or not steps:
            raise GraphFormatError(f"malformed metapath line: {line!r}")
        return cls(name.strip(), steps)

    def __str__(self) -> str:
        return f"{self.name}: {','.join(self.steps)}"


@dataclass(frozen=True)
class EdgeType:
    name: str
    src_type: str
    dst_type: str
    src: np.ndarray
    dst: np.ndarray


@dataclass(frozen=True, eq=False)
class HeteroGraph:
    node_types: dict[str, int]
    edges: dict[str, EdgeType]
    target_type: str
    features: np.ndarray
    labels: np.ndarray | None = None
    metapaths: tuple[MetaPath, ...] = ()
    _adj_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.target_type not in self.node_types:
            raise GraphFormatError(f"unknown target type {self.target_type!r}")
        for et in self.edges.values():
            for side, t, idx in (("src", et.src_type, et.src), ("dst", et.dst_type, et.dst)):
                if t not in self.node_types:
                    raise GraphFormatError(f"edge type {et.name!r} references unknown node type {t!r}")
                if len(idx) and (idx.min() < 0 or idx.max() >= self.node_types[t]):
                    raise GraphFormatError(
                        f"index out of range in edge type {et.name!r} ({side} of type {t!r}, "
                        f"count {self.node_types[t]})"
                    )
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n:
            raise GraphFormatError(f"features must have {self.n} rows, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise GraphFormatError("features contain non-finite values")
        neg = np.flatnonzero((x < 0).any(axis=1))
        if len(neg):
            raise GraphFormatError(f"feature row {neg[0]} has negative entries")
        x.setflags(write=False)
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (self.n,):
                raise GraphFormatError(f"labels must have length {self.n}")
            if len(y) and y.min() < 0:
                raise GraphFormatError("label out of range: negative label")
            y.setflags(write=False)
            object.__setattr__(self, "labels", y)
        for mp in self.metapaths:
            _chain_types(self, mp)

    @property
    def n(self) -> int:
        return self.node_types[self.target_type]

    @property
    def n_classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def metapath(self, name: str) -> MetaPath:
        for mp in self.metapaths:
            if mp.name == name:
                return mp
        raise KeyError(name)

    def subgraphs(self) -> list[SparseAdjacency]:
        return [metapath_adjacency(self, mp) for mp in self.metapaths]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.target_type.encode())
        for t, c in sorted(self.node_types.items()):
            h.update(f"{t}:{c};".encode())
        for name in sorted(self.edges):
            et = self.edges[name]
            h.update(f"{name}:{et.src_type}:{et.dst_type};".encode())
            h.update(et.src.astype(np.int64).tobytes())
            h.update(et.dst.astype(np.int64).tobytes())
        h.update(np.ascontiguousarray(self.features).tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        for mp in self.metapaths:
            h.update(str(mp).encode())
        return h.hexdigest()


def _relation(g: HeteroGraph, step: str) -> tuple[str, str, sp.csr_matrix]:
    reverse = step.startswith("~")
    name = step[1:] if reverse else step
    if name not in g.edges:
        raise GraphFormatError(f"metapath references unknown edge type {name!r}")
    et = g.edges[name]
    shape = (g.node_types[et.src_type], g.node_types[et.dst_type])
    inc = sp.csr_matrix((np.ones(len(et.src)), (et.src, et.dst)), shape=shape)
    inc.data[:] = 1.0
    if reverse:
        return et.dst_type, et.src_type, inc.T.tocsr()
    return et.src_type, et.dst_type, inc


def _chain_types(g: HeteroGraph, mp: MetaPath) -> list[str]:
    types = []
    for step in mp.steps:
        name = step.lstrip("~")
        if name not in g.edges:
            raise GraphFormatError(f"metapath {mp.name!r} references unknown edge type {name!r}")
        et = g.edges[name]
        src, dst = (et.dst_type, et.src_type) if step.startswith("~") else (et.src_type, et.dst_type)
        if types and types[-1] != src:
            raise GraphFormatError(
                f"metapath {mp.name!r}: step {step!r} starts at {src!r} but previous step ends at {types[-1]!r}"
            )
        if not types:
            types.append(src)
        types.append(dst)
    if types[0] != g.target_type or types[-1] != g.target_type:
        raise GraphFormatError(f"metapath {mp.name!r} must start and end at {g.target_type!r}")
    return types


def metapath_adjacency(g: HeteroGraph, mp: MetaPath) -> SparseAdjacency:
    """Binary, symmetric, loop-free adjacency induced by ``mp`` over target nodes.

    Relations are composed by chained sparse products, each intermediate
    pruned back to 0/1. A composition that is not symmetric by itself
    (e.g. a directed citation relation) is symmetrized by union.
    """
    key = str(mp)
    if key in g._adj_cache:
        return g._adj_cache[key]
    _chain_types(g, mp)
    acc = None
    for step in mp.steps:
        _, _, rel = _relation(g, step)
        acc = rel if acc is None else acc @ rel
        acc.data[:] = 1.0
        acc.eliminate_zeros()
    acc = acc.tocsr()
    acc = ((acc + acc.T) > 0).astype(np.float64).tocsr()
    acc.setdiag(0.0)
    acc.eliminate_zeros()
    adj = SparseAdjacency(acc, symmetric=True)
    g._adj_cache[key] = adj
    return adj


def _self_loop_degrees(a: SparseAdjacency) -> np.ndarray:
    return a.degrees() + 1.0


def renorm_adj_sym(a: SparseAdjacency) -> SparseAdjacency:
    """D~^{-1/2} (A + I) D~^{-1/2}."""
    dinv = 1.0 / np.sqrt(_self_loop_degrees(a))
    at = a.matrix + sp.identity(a.n, format="csr")
    d = sp.diags(dinv)
    return SparseAdjacency((d @ at @ d).tocsr(), symmetric=False)


def renorm_lap_sym(a: SparseAdjacency) -> SparseAdjacency:
    """I - renorm_adj_sym(A)."""
    lap = sp.identity(a.n, format="csr") - renorm_adj_sym(a).matrix
    return SparseAdjacency(lap.tocsr(), symmetric=False)


def rw_normalize(a: SparseAdjacency) -> SparseAdjacency:
    """Row-stochastic D~^{-1} (A + I)."""
    at = a.matrix + sp.identity(a.n, format="csr")
    at = at.tocsr()
    # divide each row by its own sum so rows add up to 1 to the last ulp
    rowsum = np.add.reduceat(at.data, at.indptr[:-1])
    at.data = at.data / np.repeat(rowsum, np.diff(at.indptr))
    return SparseAdjacency(at, symmetric=False)


def spmm(a: SparseAdjacency, h: np.ndarray) -> np.ndarray:
    """Sparse @ dense with per-row summation in ascending column order."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[0] != a.n:
        raise ValueError(f"dimension mismatch: adjacency is {a.n}x{a.n}, dense has {h.shape[0]} rows")
    return np.asarray(a.matrix @ h)


# ---------------------------------------------------------------------------
# dataset directory I/O


def _read_lines(path: Path) -> list[str]:
    return path.read_text(encoding="utf-8").splitlines()


def load_graph(dataset_dir: str | Path) -> HeteroGraph:
    """Load and validate a dataset directory (see README for the layout)."""
    root = Path(dataset_dir)
    required = ["node_types.tsv", "features.tsv", "metapaths.txt"]
    for name in required:
        if not (root / name).is_file():
            raise FileNotFoundError(f"missing file: {root / name}")

    node_types: dict[str, int] = {}
    for line in _read_lines(root / "node_types.tsv"):
        if not line.strip() or line.startswith("#"):
            continue
        t, c = line.split("\t")
        node_types[t.strip()] = int(c)
    if not node_types:
        raise GraphFormatError("node_types.tsv is empty")

    edges: dict[str, EdgeType] = {}
    for path in sorted(root.glob("edges_*.tsv")):
        name = path.name[len("edges_"):-len(".tsv")]
        lines = _read_lines(path)
        if not lines or not lines[0].startswith("#"):
            raise GraphFormatError(f"{path.name}: missing '# src_type \\t dst_type' header")
        src_type, dst_type = (s.strip() for s in lines[0].lstrip("#").split("\t"))
        pairs = [ln.split("\t") for ln in lines[1:] if ln.strip()]
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        edges[name] = EdgeType(name, src_type, dst_type, arr[:, 0].copy(), arr[:, 1].copy())

    metapaths = tuple(
        MetaPath.parse(ln) for ln in _read_lines(root / "metapaths.txt") if ln.strip() and not ln.startswith("#")
    )
    target = _target_from_metapaths(node_types, edges, metapaths)

    feats = np.loadtxt(root / "features.tsv", delimiter="\t", dtype=np.float64, ndmin=2)
    labels = None
    if (root / "labels.tsv").is_file():
        labels = np.loadtxt(root / "labels.tsv", dtype=np.int64, ndmin=1)
    return HeteroGraph(node_types, edges, target, feats, labels, metapaths)


def _target_from_metapaths(node_types, edges, metapaths) -> str:
    if not metapaths:
        return next(iter(node_types))
    first = metapaths[0].steps[0]
    name = first.lstrip("~")
    if name not in edges:
        raise GraphFormatError(f"metapath references unknown edge type {name!r}")
    et = edges[name]
    return et.dst_type if first.startswith("~") else et.src_type


def save_graph(g: HeteroGraph, dataset_dir: str | Path, splits: dict[str, Sequence[int]] | None = None) -> Path:
    """Write ``g`` in the dataset directory layout read by :func:`load_graph`."""
    root = Path(dataset_dir)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "node_types.tsv", "w", encoding="utf-8") as fh:
        # target type first so single-type graphs without metapaths round-trip
        order = [g.target_type] + [t for t in g.node_types if t != g.target_type]
        for t in order:
            fh.write(f"{t}\t{g.node_types[t]}\n")
    for et in g.edges.values():
        with open(root / f"edges_{et.name}.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"# {et.src_type}\t{et.dst_type}\n")
            for s, d in zip(et.src.tolist(), et.dst.tolist()):
                fh.write(f"{s}\t{d}\n")
    np.savetxt(root / "features.tsv", g.features, delimiter="\t", fmt="%.17g")
    if g.labels is not None:
        np.savetxt(root / "labels.tsv", g.labels, fmt="%d")
    (root / "metapaths.txt").write_text("".join(f"{mp}\n" for mp in g.metapaths), encoding="utf-8")
    if splits:
        with open(root / "splits.tsv", "w", encoding="utf-8") as fh:
            for name, ids in splits.items():
                for i in ids:
                    fh.write(f"{int(i)}\t{name}\n")
    return root


SPLIT_NAMES = ("train20", "train40", "train60", "val", "test")


def load_splits(path: str | Path) -> dict[str, np.ndarray]:
    """Read ``node_id \\t split`` lines; a node may appear under several splits."""
    out: dict[str, list[int]] = {}
    for line in _read_lines(Path(path)):
        if not line.strip() or line.startswith("#"):
            continue
        node, name = line.split("\t")
        name = name.strip()
        if name not in SPLIT_NAMES:
            raise GraphFormatError(f"unknown split name {name!r}")
        out.setdefault(name, []).append(int(node))
    return {k: np.array(v, dtype=np.int64) for k, v in out.items()}
