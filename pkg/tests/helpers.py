"""Random instances and brute-force reference implementations used across the suite.

The oracles deliberately avoid the package's sparse machinery: plain Python
loops over edge lists and dense rows.
"""
from __future__ import annotations

import math

import numpy as np

from hetrolat.graph import EdgeType, HeteroGraph, MetaPath


def random_hetero(seed: int, n_p: int = 12, n_a: int = 6, n_s: int = 3, n_classes: int = 3,
                  p_pa: float = 0.2, p_ps: float = 0.3, p_cite: float = 0.0, d_f: int = 4,
                  zero_rows: int = 0) -> HeteroGraph:
    """Publication/author/subject style graph (P, A, S) with PAP, PSP (and PCP when p_cite > 0)."""
    rng = np.random.default_rng(seed)

    def bip(n_src, n_dst, p):
        m = rng.random((n_src, n_dst)) < p
        s, d = np.nonzero(m)
        return s.astype(np.int64), d.astype(np.int64)

    edges = {
        "pa": EdgeType("pa", "P", "A", *bip(n_p, n_a, p_pa)),
        "ps": EdgeType("ps", "P", "S", *bip(n_p, n_s, p_ps)),
    }
    mps = [MetaPath("PAP", ("pa", "~pa")), MetaPath("PSP", ("ps", "~ps"))]
    if p_cite > 0:
        edges["cites"] = EdgeType("cites", "P", "P", *bip(n_p, n_p, p_cite))
        mps.append(MetaPath("PCP", ("cites",)))
    x = rng.random((n_p, d_f))
    if zero_rows:
        x[rng.choice(n_p, size=zero_rows, replace=False)] = 0.0
    y = rng.integers(0, n_classes, size=n_p)
    return HeteroGraph({"P": n_p, "A": n_a, "S": n_s}, edges, "P", x, y, tuple(mps))


def random_symmetric(rng, n: int, p: float) -> np.ndarray:
    a = np.triu(rng.random((n, n)) < p, k=1)
    return (a | a.T).astype(np.float64)


# ---------------------------------------------------------------------------
# oracles


def brute_metapath(g: HeteroGraph, mp: MetaPath) -> set[tuple[int, int]]:
    """Ordered pairs (i, j), i != j, joined by an instance of ``mp`` in either direction."""
    succ = []
    for step in mp.steps:
        et = g.edges[step.lstrip("~")]
        pairs = zip(et.dst.tolist(), et.src.tolist()) if step.startswith("~") else zip(et.src.tolist(), et.dst.tolist())
        table: dict[int, set[int]] = {}
        for u, v in pairs:
            table.setdefault(u, set()).add(v)
        succ.append(table)
    out = set()
    for start in range(g.n):
        frontier = {start}
        for table in succ:
            frontier = {v for u in frontier for v in table.get(u, ())}
        for end in frontier:
            if end != start:
                out.add((start, end))
                out.add((end, start))
    return out


def brute_edge_hr(a: np.ndarray, y) -> float:
    same = total = 0
    n = len(a)
    for i in range(n):
        for j in range(i + 1, n):
            if a[i][j]:
                total += 1
                same += int(y[i] == y[j])
    return same / total


def brute_nhr(a: np.ndarray, y) -> list[float | None]:
    out = []
    for i in range(len(a)):
        nb = [j for j in range(len(a)) if j != i and a[i][j]]
        out.append(None if not nb else sum(y[j] == y[i] for j in nb) / len(nb))
    return out


def brute_rw(a: np.ndarray) -> list[list[float]]:
    n = len(a)
    rows = []
    for i in range(n):
        row = [float(a[i][j]) + (1.0 if i == j else 0.0) for j in range(n)]
        s = sum(row)
        rows.append([v / s for v in row])
    return rows


def brute_cos(u, v) -> float:
    dot = sum(p * q for p, q in zip(u, v))
    nu = math.sqrt(sum(p * p for p in u))
    nv = math.sqrt(sum(q * q for q in v))
    if nu == 0 or nv == 0:
        return 0.0
    return min(1.0, max(0.0, dot / (nu * nv)))


def brute_scores(m: np.ndarray, x: np.ndarray):
    """Dense (S, W) by double loop; diagonal set to None."""
    n = len(m)
    s = [[None] * n for _ in range(n)]
    w = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            st = brute_cos(m[i], m[j])
            sf = brute_cos(x[i], x[j])
            s[i][j] = st * sf
            w[i][j] = (1 - st) * (1 - sf)
    return s, w


def brute_topk(scores_row, k: int, candidates) -> list[int]:
    cands = [j for j in candidates if scores_row[j] is not None]
    return sorted(cands, key=lambda j: (-scores_row[j], j))[:k]


def assert_same_ranking(picked, expected, scores_row, tol: float = 1e-12) -> None:
    """Lists must agree position by position; a mismatch is tolerated only between near-equal scores.

    Our scores and the oracle's come from different summation orders, so two
    genuinely distinct nodes whose scores agree to the last few ulps may swap.
    """
    picked = [int(v) for v in picked]
    assert len(picked) == len(expected), (picked, expected)
    assert len(set(picked)) == len(picked)
    for a, b in zip(picked, expected):
        if a != b:
            assert abs(scores_row[a] - scores_row[b]) <= tol, (picked, expected)


# ---------------------------------------------------------------------------
# model fixtures


def tiny_instance(seed: int = 3):
    """6 target nodes, 2 meta-paths, 5 features; full latent graphs with K=2, k_pos=1."""
    from hetrolat.latent import build_latent_graphs_full, diffusion_matrix
    from hetrolat.synthetic import PlantedMetaPath, SyntheticSpec, generate_synthetic

    spec = SyntheticSpec(n_per_class=3, n_classes=2, feature_dim=5, noise=1.0, seed=seed,
                         metapaths=(PlantedMetaPath("A", 0.7, 0.3), PlantedMetaPath("B", 0.3, 0.6)))
    g = generate_synthetic(spec)
    pair = build_latent_graphs_full(diffusion_matrix(g.subgraphs()), g.features, 2, 1)
    return g, pair


def numeric_grad(f, v: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``v`` (mutated in place)."""
    out = np.zeros_like(v)
    for idx in np.ndindex(v.shape):
        old = v[idx]
        v[idx] = old + h
        up = f()
        v[idx] = old - h
        down = f()
        v[idx] = old
        out[idx] = (up - down) / (2 * h)
    return out


def rel_err(num: np.ndarray, ana: np.ndarray) -> float:
    return float(np.abs(num - ana).max() / max(np.abs(num).max(), np.abs(ana).max(), 1e-8))
