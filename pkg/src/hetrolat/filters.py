"""Low-pass / high-pass graph filtering and the pre-filtered feature cache."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import HeteroGraph, SparseAdjacency, renorm_adj_sym, renorm_lap_sym, spmm


def _power(op: SparseAdjacency, h, r: int) -> np.ndarray:
    if r < 0:
        raise ValueError("filter order r must be >= 0")
    out = np.asarray(h, dtype=np.float64)
    if out.shape[0] != op.n:
        raise ValueError(f"dimension mismatch: graph has {op.n} nodes, input has {out.shape[0]} rows")
    out = out.copy()
    for _ in range(r):
        out = spmm(op, out)
    return out


def low_pass(a: SparseAdjacency, h, r: int) -> np.ndarray:
    """Apply the renormalized adjacency ``r`` times."""
    return _power(renorm_adj_sym(a), h, r)


def high_pass(a: SparseAdjacency, h, r: int) -> np.ndarray:
    """Apply the renormalized Laplacian ``r`` times."""
    return _power(renorm_lap_sym(a), h, r)


@dataclass
class FilteredFeatures:
    """Per-metapath low/high-pass filtered raw features.

    ``latent_low``/``latent_high`` hold the homophilic-graph low-pass and
    heterophilic-graph high-pass features used by mini-batch training.
    """

    r: int
    low: dict[str, np.ndarray]
    high: dict[str, np.ndarray]
    latent_low: np.ndarray | None = None
    latent_high: np.ndarray | None = None
    checksum: str = ""
    names: list[str] = field(default_factory=list)


def _checksum(g: HeteroGraph, r: int, latent=None) -> str:
    h = hashlib.sha256()
    h.update(g.digest().encode())
    h.update(f"r={r}".encode())
    if latent is not None:
        h.update(latent.homophilic.digest().encode())
        h.update(latent.heterophilic.digest().encode())
    return h.hexdigest()


def pre_filter(g: HeteroGraph, r: int, latent=None) -> FilteredFeatures:
    """Filter the raw features once per meta-path (and per latent graph when given)."""
    low, high = {}, {}
    for mp, a in zip(g.metapaths, g.subgraphs()):
        low[mp.name] = low_pass(a, g.features, r)
        high[mp.name] = high_pass(a, g.features, r)
    out = FilteredFeatures(r, low, high, checksum=_checksum(g, r, latent), names=[mp.name for mp in g.metapaths])
    if latent is not None:
        out.latent_low = low_pass(latent.homophilic, g.features, r)
        out.latent_high = high_pass(latent.heterophilic, g.features, r)
    return out


# ---------------------------------------------------------------------------
# matrix files: u32 rows | u32 cols | row-major f64, little-endian


def write_matrix(path: str | Path, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *a.shape))
        fh.write(a.tobytes())


def read_matrix(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated matrix header")
    rows, cols = struct.unpack("<II", buf[:8])
    if len(buf) != 8 + 8 * rows * cols:
        raise ValueError(f"{path}: expected {rows}x{cols} f64 payload, got {len(buf) - 8} bytes")
    return np.frombuffer(buf, dtype="<f8", offset=8).reshape(rows, cols).astype(np.float64)


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_filtered(ff: FilteredFeatures, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ff.names:
        for kind, store in (("low", ff.low), ("high", ff.high)):
            fname = f"X_{name}_{kind}.f64"
            write_matrix(out / fname, store[name])
            files[fname] = list(store[name].shape)
    for kind, mat in (("low", ff.latent_low), ("high", ff.latent_high)):
        if mat is not None:
            fname = f"X_latent_{kind}.f64"
            write_matrix(out / fname, mat)
            files[fname] = list(mat.shape)
    manifest = {
        "r": ff.r,
        "checksum": ff.checksum,
        "metapaths": ff.names,
        "shapes": files,
        "file_sha256": {f: _file_sha(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def load_filtered(out_dir: str | Path, expected_checksum: str | None = None) -> FilteredFeatures | None:
    """Load a cache directory; ``None`` when missing, stale or corrupt."""
    out = Path(out_dir)
    mpath = out / "manifest.json"
    if not mpath.is_file():
        return None
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if expected_checksum is not None and manifest.get("checksum") != expected_checksum:
        return None
    try:
        for fname, sha in manifest["file_sha256"].items():
            if _file_sha(out / fname) != sha:
                return None
        low = {n: read_matrix(out / f"X_{n}_low.f64") for n in manifest["metapaths"]}
        high = {n: read_matrix(out / f"X_{n}_high.f64") for n in manifest["metapaths"]}
    except (OSError, ValueError, KeyError):
        return None
    ff = FilteredFeatures(manifest["r"], low, high, checksum=manifest["checksum"], names=list(manifest["metapaths"]))
    if (out / "X_latent_low.f64").is_file():
        ff.latent_low = read_matrix(out / "X_latent_low.f64")
        ff.latent_high = read_matrix(out / "X_latent_high.f64")
    return ff


def cached_pre_filter(g: HeteroGraph, r: int, out_dir: str | Path, latent=None) -> FilteredFeatures:
    """Reuse ``out_dir`` when its checksum matches ``(g, r, latent)``; recompute otherwise."""
    cached = load_filtered(out_dir, _checksum(g, r, latent))
    if cached is not None:
        return cached
    ff = pre_filter(g, r, latent)
    save_filtered(ff, out_dir)
    return ff
