"""Homophilic / heterophilic latent graphs mined from coupled structure-feature similarity.

Two builders are provided:

* :func:`build_latent_graphs_full` scores every pair of target nodes (quadratic,
  capped at ``dense_cap`` nodes);
* :func:`build_latent_graphs_scalable` restricts homophilic candidates to
  first-order meta-path neighbors and scores heterophilic candidates against
  a random anchor set.

Every top-K uses the same tie-break: higher score first, then lower node id.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .graph import SparseAdjacency, rw_normalize
from .homophily import edge_hr

DENSE_CAP = 20_000
_ROW_CHUNK = 256
_EDGE_CHUNK = 65_536


@dataclass(frozen=True)
class NeighborLists:
    """Ragged per-node id lists in offsets/ids form."""

    offsets: np.ndarray
    ids: np.ndarray

    @classmethod
    def from_lists(cls, lists: Sequence[Sequence[int]]) -> NeighborLists:
        lens = np.array([len(x) for x in lists], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
        ids = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if len(lists) else np.zeros(0, np.int64)
        return cls(offsets, ids.astype(np.int64))

    def __len__(self) -> int:
        return len(self.offsets) - 1

    def __getitem__(self, i: int) -> np.ndarray:
        return self.ids[self.offsets[i]:self.offsets[i + 1]]

    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def to_adjacency(self) -> SparseAdjacency:
        """Union-symmetrized 0/1 adjacency of the directed selections."""
        n = len(self)
        rows = np.repeat(np.arange(n), self.lengths())
        m = sp.csr_matrix((np.ones(len(rows)), (rows, self.ids)), shape=(n, n))
        m = ((m + m.T) > 0).astype(np.float64).tocsr()
        m.setdiag(0.0)
        m.eliminate_zeros()
        return SparseAdjacency(m, symmetric=True)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, NeighborLists)
            and np.array_equal(self.offsets, other.offsets)
            and np.array_equal(self.ids, other.ids)
        )


@dataclass(frozen=True)
class LatentGraphPair:
    homophilic: SparseAdjacency
    heterophilic: SparseAdjacency
    raw_homophilic: NeighborLists
    raw_heterophilic: NeighborLists
    positives: NeighborLists
    k: int
    k_pos: int

    @property
    def n(self) -> int:
        return self.homophilic.n

    def positive_sets(self) -> list[np.ndarray]:
        """Positive set per node: the node itself followed by its mined positives."""
        return [np.concatenate([[i], self.positives[i]]).astype(np.int64) for i in range(self.n)]


def diffusion_matrix(subgraphs: Sequence[SparseAdjacency]) -> SparseAdjacency:
    """Average of the random-walk normalized meta-path adjacencies."""
    if not subgraphs:
        raise ValueError("at least one subgraph required")
    n = subgraphs[0].n
    for a in subgraphs:
        if a.n != n:
            raise ValueError(f"size mismatch: {a.n} != {n}")
    acc = rw_normalize(subgraphs[0]).matrix.copy()
    for a in subgraphs[1:]:
        acc = acc + rw_normalize(a).matrix
    return SparseAdjacency((acc / len(subgraphs)).tocsr())


def _cos(dot, n2a, n2b):
    # sqrt of the product keeps cos(v, v) == 1 exactly
    denom = np.sqrt(n2a * n2b)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def coupled_similarity(m: SparseAdjacency, x, i: int, j: int) -> tuple[float, float, float]:
    """(structure cosine, feature cosine, their product) for one node pair."""
    x = np.asarray(x, dtype=np.float64)
    a = m.matrix
    if not a.has_canonical_format:
        a = a.copy()
        a.sum_duplicates()
    ci, vi = a.indices[a.indptr[i]:a.indptr[i + 1]], a.data[a.indptr[i]:a.indptr[i + 1]]
    cj, vj = a.indices[a.indptr[j]:a.indptr[j + 1]], a.data[a.indptr[j]:a.indptr[j + 1]]
    _, pi, pj = np.intersect1d(ci, cj, assume_unique=True, return_indices=True)
    sim_t = float(_cos(vi[pi] @ vj[pj], vi @ vi, vj @ vj))
    sim_f = float(_cos(x[i] @ x[j], x[i] @ x[i], x[j] @ x[j]))
    return sim_t, sim_f, sim_t * sim_f


class _Scorer:
    """Blocked coupled-similarity scoring shared by both builders."""

    def __init__(self, m: SparseAdjacency, x):
        self.m = m.matrix
        self.mt = self.m.T.tocsr()
        self.x = np.asarray(x, dtype=np.float64)
        self.m_n2 = np.asarray(self.m.multiply(self.m).sum(axis=1)).ravel()
        self.x_n2 = np.einsum("ij,ij->i", self.x, self.x)

    def block(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dot_t = (self.m[rows] @ self.mt[:, cols]).toarray()
        sim_t = _cos(dot_t, self.m_n2[rows][:, None], self.m_n2[cols][None, :])
        dot_f = self.x[rows] @ self.x[cols].T
        sim_f = _cos(dot_f, self.x_n2[rows][:, None], self.x_n2[cols][None, :])
        return sim_t, sim_f

    def pairs(self, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dot_t = np.asarray(self.m[rows].multiply(self.m[cols]).sum(axis=1)).ravel()
        sim_t = _cos(dot_t, self.m_n2[rows], self.m_n2[cols])
        dot_f = np.einsum("ij,ij->i", self.x[rows], self.x[cols])
        sim_f = _cos(dot_f, self.x_n2[rows], self.x_n2[cols])
        return sim_t, sim_f


def _top_rows(scores: np.ndarray, cols: np.ndarray, k: int) -> np.ndarray:
    # cols ascending + stable sort on -score => ties resolved by lower id
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    return cols[order]


def _finite_prefix(scores: np.ndarray, picked_idx: np.ndarray) -> np.ndarray:
    return np.isfinite(np.take_along_axis(scores, picked_idx, axis=1))


def build_latent_graphs_full(
    m: SparseAdjacency, x, k: int, k_pos: int, dense_cap: int = DENSE_CAP
) -> LatentGraphPair:
    """Exact latent graphs from the full pairwise similarity matrices."""
    n = m.n
    if n > dense_cap:
        raise ValueError(
            f"{n} nodes exceeds the dense cap of {dense_cap}; use build_latent_graphs_scalable instead"
        )
    if not 1 <= k < n:
        raise ValueError(f"K must satisfy 1 <= K < N (K={k}, N={n})")
    if k_pos < 0 or k_pos >= n:
        raise ValueError(f"k_pos must satisfy 0 <= k_pos < N (k_pos={k_pos})")
    scorer = _Scorer(m, x)
    cols = np.arange(n)
    kk = max(k, k_pos)
    hom, het, pos = [], [], []
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(n, start + _ROW_CHUNK))
        sim_t, sim_f = scorer.block(rows, cols)
        s = sim_t * sim_f
        w = (1.0 - sim_t) * (1.0 - sim_f)
        diag = (np.arange(len(rows)), rows)
        s[diag] = -np.inf
        w[diag] = -np.inf
        top_s = _top_rows(s, cols, kk)
        hom.extend(top_s[:, :k])
        pos.extend(top_s[:, :k_pos])
        het.extend(_top_rows(w, cols, k))
    return _assemble(hom, het, pos, k, k_pos)


def sample_anchors(n: int, m: int, seed: int) -> np.ndarray:
    if not 1 <= m <= n:
        raise ValueError(f"anchor count m must satisfy 1 <= m <= N (m={m}, N={n})")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=m, replace=False))


def build_latent_graphs_scalable(
    subgraphs: Sequence[SparseAdjacency],
    x,
    k: int,
    k_pos: int,
    m: int = 1000,
    seed: int = 0,
    diffusion: SparseAdjacency | None = None,
) -> LatentGraphPair:
    """Neighbor-restricted homophilic and anchor-based heterophilic latent graphs.

    Cost is linear in the number of meta-path edges plus ``N * m``.
    """
    mdiff = diffusion if diffusion is not None else diffusion_matrix(subgraphs)
    n = mdiff.n
    if k < 1:
        raise ValueError("K must be >= 1")
    if k_pos < 0:
        raise ValueError("k_pos must be >= 0")
    scorer = _Scorer(mdiff, x)

    union = subgraphs[0].matrix.copy()
    for a in subgraphs[1:]:
        union = union + a.matrix
    union = union.tocsr()
    union.sum_duplicates()
    union.sort_indices()
    coo = union.tocoo()
    er, ec = coo.row.astype(np.int64), coo.col.astype(np.int64)
    keep = er != ec
    er, ec = er[keep], ec[keep]
    score = np.empty(len(er))
    for start in range(0, len(er), _EDGE_CHUNK):
        sl = slice(start, start + _EDGE_CHUNK)
        st, sf = scorer.pairs(er[sl], ec[sl])
        score[sl] = st * sf
    order = np.lexsort((ec, -score, er))
    er, ec = er[order], ec[order]
    counts = np.bincount(er, minlength=n)
    starts = np.concatenate([[0], np.cumsum(counts)])
    rank = np.arange(len(er)) - starts[er]
    hom = NeighborLists(np.concatenate([[0], np.cumsum(np.minimum(counts, k))]), ec[rank < k])
    pos = NeighborLists(np.concatenate([[0], np.cumsum(np.minimum(counts, k_pos))]), ec[rank < k_pos])

    anchors = sample_anchors(n, m, seed)
    het = []
    for start in range(0, n, _ROW_CHUNK):
        rows = np.arange(start, min(n, start + _ROW_CHUNK))
        sim_t, sim_f = scorer.block(rows, anchors)
        w = (1.0 - sim_t) * (1.0 - sim_f)
        w[rows[:, None] == anchors[None, :]] = -np.inf
        kk = min(k, len(anchors))
        idx = np.argsort(-w, axis=1, kind="stable")[:, :kk]
        ok = _finite_prefix(w, idx)
        picked = anchors[idx]
        het.extend(p[o] for p, o in zip(picked, ok))
    het_lists = NeighborLists.from_lists(het)
    return LatentGraphPair(hom.to_adjacency(), het_lists.to_adjacency(), hom, het_lists, pos, k, k_pos)


def _assemble(hom, het, pos, k, k_pos) -> LatentGraphPair:
    hom_l = NeighborLists.from_lists(hom)
    het_l = NeighborLists.from_lists(het)
    pos_l = NeighborLists.from_lists(pos)
    return LatentGraphPair(hom_l.to_adjacency(), het_l.to_adjacency(), hom_l, het_l, pos_l, k, k_pos)


def latent_hr_audit(pair: LatentGraphPair, y, raw: bool = False) -> tuple[float, float]:
    """Homophily ratio of (homophilic, heterophilic) latent graphs.

    With ``raw=True`` the directed top-K selections are scored instead of the
    union-symmetrized graphs.
    """
    y = np.asarray(y)
    if not raw:
        return edge_hr(pair.homophilic, y), edge_hr(pair.heterophilic, y)

    def directed(lists: NeighborLists) -> float:
        if len(lists.ids) == 0:
            raise ValueError("no edges")
        src = np.repeat(np.arange(len(lists)), lists.lengths())
        return int(np.count_nonzero(y[src] == y[lists.ids])) / len(src)

    return directed(pair.raw_homophilic), directed(pair.raw_heterophilic)


# ---------------------------------------------------------------------------
# binary serialization: "LATG" | u32 version | u32 N | u32 K | u32 k_pos |
# CSR(A^S) | CSR(A^W) | ragged(positives) | ragged(raw A^S) | ragged(raw A^W)
# CSR = u32 nnz, u32[N+1] indptr, u32[nnz] indices, f64[nnz] data
# ragged = u32[N+1] offsets, u32[offsets[-1]] ids; all little-endian

MAGIC = b"LATG"
VERSION = 1


def _write_csr(fh, a: SparseAdjacency) -> None:
    fh.write(struct.pack("<I", a.nnz))
    fh.write(a.indptr.astype("<u4").tobytes())
    fh.write(a.indices.astype("<u4").tobytes())
    fh.write(a.data.astype("<f8").tobytes())


def _write_ragged(fh, lists: NeighborLists) -> None:
    fh.write(lists.offsets.astype("<u4").tobytes())
    fh.write(lists.ids.astype("<u4").tobytes())


def save_latent(pair: LatentGraphPair, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIII", VERSION, pair.n, pair.k, pair.k_pos))
        _write_csr(fh, pair.homophilic)
        _write_csr(fh, pair.heterophilic)
        for lists in (pair.positives, pair.raw_homophilic, pair.raw_heterophilic):
            _write_ragged(fh, lists)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.pos + size > len(self.buf):
            raise ValueError("truncated latent graph file")
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos)
        self.pos += size
        return out

    def csr(self, n: int) -> SparseAdjacency:
        nnz = int(self.take("<u4", 1)[0])
        indptr = self.take("<u4", n + 1).astype(np.int64)
        indices = self.take("<u4", nnz).astype(np.int64)
        data = self.take("<f8", nnz).astype(np.float64)
        return SparseAdjacency(sp.csr_matrix((data, indices, indptr), shape=(n, n)), symmetric=True)

    def ragged(self, n: int) -> NeighborLists:
        offsets = self.take("<u4", n + 1).astype(np.int64)
        ids = self.take("<u4", int(offsets[-1])).astype(np.int64)
        return NeighborLists(offsets, ids)


def load_latent(path: str | Path) -> LatentGraphPair:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a latent graph file (bad magic)")
    r = _Reader(buf)
    r.pos = 4
    version, n, k, k_pos = (int(v) for v in r.take("<u4", 4))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    a_s = r.csr(n)
    a_w = r.csr(n)
    pos = r.ragged(n)
    raw_s = r.ragged(n)
    raw_w = r.ragged(n)
    return LatentGraphPair(a_s, a_w, raw_s, raw_w, pos, k, k_pos)
