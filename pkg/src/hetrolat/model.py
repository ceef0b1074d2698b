"""Dual-frequency encoder, adaptive fusion, latent-graph contrastive objective and training.

Two training paths share the same parameters and losses:

* full-graph (:func:`train_full`): graph filters are applied to the encoded
  features every epoch and the contrastive candidate set is every target node;
* mini-batch (:func:`train_scalable`): filters are applied once to the raw
  features beforehand and each batch only contrasts against its own nodes.
"""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .filters import FilteredFeatures
from .graph import HeteroGraph, SparseAdjacency, renorm_adj_sym, renorm_lap_sym
from .latent import LatentGraphPair, NeighborLists

log = logging.getLogger("hetrolat.train")

HEADS = ("z", "l", "h")
_MODEL_MAGIC = b"LGRM"
_MODEL_VERSION = 1


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss or gradient; ``state`` is the last finite checkpoint."""

    def __init__(self, message: str, state: ModelState | None = None, epoch: int | None = None):
        super().__init__(message)
        self.state = state
        self.epoch = epoch


@dataclass
class TrainConfig:
    d: int = 64
    r: int = 2
    k: int = 5
    k_pos: int = 2
    gamma: float = 1.0
    tau: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 10
    max_epochs: int = 300
    batch_size: int = 5120
    seed: int = 0
    anchors: int = 1000
    encoder_activation: str = "elu"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.gamma < 1:
            raise ValueError("gamma must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.d < 1 or self.r < 0 or self.max_epochs < 0:
            raise ValueError("d >= 1, r >= 0 and max_epochs >= 0 required")
        if self.encoder_activation not in ("elu", "identity"):
            raise ValueError("encoder_activation must be 'elu' or 'identity'")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return asdict(self)


def _kaiming(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelState:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    encoder_activation: str = "elu"

    @classmethod
    def init(cls, d_f: int, d: int, seed: int, encoder_activation: str = "elu") -> ModelState:
        rng = np.random.default_rng(seed)
        p = {
            "enc.W": _kaiming(rng, d_f, (d_f, d)),
            "enc.b": np.zeros((1, d)),
            "dec.W": _kaiming(rng, 2 * d, (2 * d, d_f)),
            "dec.b": np.zeros((1, d_f)),
            "att.q_l": _kaiming(rng, d, (d, 1)),
            "att.q_h": _kaiming(rng, d, (d, 1)),
        }
        for h in HEADS:
            p[f"head_{h}.W1"] = _kaiming(rng, d, (d, d))
            p[f"head_{h}.b1"] = np.zeros((1, d))
            p[f"head_{h}.W2"] = _kaiming(rng, d, (d, d))
            p[f"head_{h}.b2"] = np.zeros((1, d))
        return cls(p, {k: np.zeros_like(v) for k, v in p.items()}, {k: np.zeros_like(v) for k, v in p.items()},
                   0, encoder_activation)

    @property
    def d(self) -> int:
        return self.params["enc.W"].shape[1]

    def copy(self) -> ModelState:
        return ModelState({k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.adam_m.items()},
                          {k: v.copy() for k, v in self.adam_v.items()},
                          self.step, self.encoder_activation)

    def check_finite(self) -> None:
        for k, v in self.params.items():
            if not np.all(np.isfinite(v)):
                raise TrainingDiverged(f"non-finite values in parameter {k}")

    def save(self, path: str | Path) -> None:
        """Little-endian container without timestamps, so equal states hash equally."""
        groups = (("param", self.params), ("adam_m", self.adam_m), ("adam_v", self.adam_v))
        act = self.encoder_activation.encode()
        out = [_MODEL_MAGIC, struct.pack("<IQI", _MODEL_VERSION, self.step, len(act)), act]
        n = sum(len(store) for _, store in groups)
        out.append(struct.pack("<I", n))
        for prefix, store in groups:
            for k in sorted(store):
                name = f"{prefix}/{k}".encode()
                a = np.ascontiguousarray(store[k], dtype="<f8")
                out.append(struct.pack("<II", len(name), a.ndim) + name)
                out.append(struct.pack(f"<{a.ndim}I", *a.shape))
                out.append(a.tobytes())
        Path(path).write_bytes(b"".join(out))

    @classmethod
    def load(cls, path: str | Path) -> ModelState:
        buf = Path(path).read_bytes()
        if buf[:4] != _MODEL_MAGIC:
            raise ValueError(f"{path}: not a model file")
        try:
            version, step, alen = struct.unpack_from("<IQI", buf, 4)
            if version != _MODEL_VERSION:
                raise ValueError(f"{path}: unsupported model version {version}")
            pos = 20
            act = buf[pos:pos + alen].decode()
            pos += alen
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
            for _ in range(n):
                nlen, ndim = struct.unpack_from("<II", buf, pos)
                pos += 8
                prefix, key = buf[pos:pos + nlen].decode().split("/", 1)
                pos += nlen
                shape = struct.unpack_from(f"<{ndim}I", buf, pos)
                pos += 4 * ndim
                count = int(np.prod(shape))
                if pos + 8 * count > len(buf):
                    raise ValueError("truncated")
                groups[prefix][key] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
                pos += 8 * count
        except (struct.error, KeyError, UnicodeDecodeError, ValueError) as exc:
            raise ValueError(f"{path}: corrupt model file ({exc})") from None
        if pos != len(buf):
            raise ValueError(f"{path}: trailing bytes in model file")
        return cls(groups["param"], groups["adam_m"], groups["adam_v"], int(step), act)


class Adam:
    """Adam with the L2 penalty folded into the gradient."""

    def __init__(self, lr: float, weight_decay: float = 0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.wd, self.b1, self.b2, self.eps = lr, weight_decay, beta1, beta2, eps

    def step(self, state: ModelState, grads: dict[str, np.ndarray]) -> None:
        state.step += 1
        t = state.step
        for k, p in state.params.items():
            g = grads[k] + self.wd * p if self.wd else grads[k]
            m = state.adam_m[k] = self.b1 * state.adam_m[k] + (1 - self.b1) * g
            v = state.adam_v[k] = self.b2 * state.adam_v[k] + (1 - self.b2) * g * g
            mhat = m / (1 - self.b1 ** t)
            vhat = v / (1 - self.b2 ** t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# inputs for the two training paths


@dataclass
class FullContext:
    """Everything the full-graph forward pass needs besides the parameters."""

    x: np.ndarray
    low_ops: list
    high_ops: list
    latent_low_op: object
    latent_high_op: object
    positives: NeighborLists
    r: int

    @classmethod
    def build(cls, g: HeteroGraph, latent: LatentGraphPair, r: int) -> FullContext:
        subs = g.subgraphs()
        return cls(
            g.features,
            [renorm_adj_sym(a).matrix for a in subs],
            [renorm_lap_sym(a).matrix for a in subs],
            renorm_adj_sym(latent.homophilic).matrix,
            renorm_lap_sym(latent.heterophilic).matrix,
            latent.positives,
            r,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class ScalableContext:
    """Pre-filtered features for mini-batch training."""

    x: np.ndarray
    low: list[np.ndarray]
    high: list[np.ndarray]
    latent_low: np.ndarray
    latent_high: np.ndarray
    positives: NeighborLists

    @classmethod
    def build(cls, g: HeteroGraph, latent: LatentGraphPair, filtered: FilteredFeatures) -> ScalableContext:
        if filtered.latent_low is None or filtered.latent_high is None:
            raise ValueError("filtered features lack the latent-graph channels; pre_filter with latent=...")
        names = [mp.name for mp in g.metapaths]
        return cls(
            g.features,
            [filtered.low[n] for n in names],
            [filtered.high[n] for n in names],
            filtered.latent_low,
            filtered.latent_high,
            latent.positives,
        )

    @property
    def n(self) -> int:
        return self.x.shape[0]


def _positive_mask(positives: NeighborLists, batch: np.ndarray, n: int) -> tuple[np.ndarray, int]:
    """Batch-local positive mask (self always set) and the count of positives outside the batch."""
    where = np.full(n, -1, dtype=np.int64)
    where[batch] = np.arange(len(batch))
    lens = positives.lengths()[batch]
    starts = positives.offsets[batch]
    flat = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
    rows = np.repeat(np.arange(len(batch)), lens)
    cols = where[positives.ids[flat]]
    inside = cols >= 0
    mask = np.zeros((len(batch), len(batch)), dtype=bool)
    mask[rows[inside], cols[inside]] = True
    mask[np.arange(len(batch)), np.arange(len(batch))] = True
    return mask, int(np.count_nonzero(~inside))


# ---------------------------------------------------------------------------
# forward pieces on the tape


def _encode(P, x, activation: str) -> ag.Var:
    h = ag.matmul(x, P["enc.W"]) + P["enc.b"]
    return ag.elu(h) if activation == "elu" else h


def _filter(op, h: ag.Var, r: int) -> ag.Var:
    for _ in range(r):
        h = ag.spmm(op, h)
    return h


def _fuse(streams: Sequence[ag.Var], q_l: ag.Var, q_h: ag.Var) -> tuple[ag.Var, ag.Var]:
    """``streams`` is [low_1..low_P, high_1..high_P]; returns (Z, fusion weights)."""
    p = len(streams) // 2
    scores = [ag.elu(ag.matmul(s, q_l if k < p else q_h)) for k, s in enumerate(streams)]
    beta = ag.softmax_rows(ag.concat(scores, axis=1))
    z = None
    for k, s in enumerate(streams):
        term = ag.column(beta, k) * s
        z = term if z is None else z + term
    return z, beta


def _sce(x_unit: np.ndarray, recon: Sequence[ag.Var], gamma: float) -> ag.Var:
    total = None
    for xh in recon:
        cos = ag.vsum(ag.rownorm(xh) * x_unit, axis=1)
        term = ag.vsum(ag.power(1.0 - cos, gamma))
        total = term if total is None else total + term
    return total * (1.0 / (len(recon) * x_unit.shape[0]))


def _project(P, name: str, z: ag.Var) -> ag.Var:
    h = ag.elu(ag.matmul(z, P[f"head_{name}.W1"]) + P[f"head_{name}.b1"])
    return ag.matmul(h, P[f"head_{name}.W2"]) + P[f"head_{name}.b2"]


def _infonce(pa: ag.Var, pb: ag.Var, mask: np.ndarray, tau: float) -> ag.Var:
    """Symmetric InfoNCE between two projected views, averaged over anchors."""
    sim = ag.matmul(ag.rownorm(pa), ag.rownorm(pb).T) * (1.0 / tau)
    full = np.ones_like(mask)
    sim_t = sim.T
    per = (ag.masked_logsumexp(sim, full) - ag.masked_logsumexp(sim, mask)
           + ag.masked_logsumexp(sim_t, full) - ag.masked_logsumexp(sim_t, mask))
    return ag.vsum(per) * (1.0 / (2 * mask.shape[0]))


def _count_zero_rows(recon: Sequence[ag.Var]) -> int:
    # zero reconstructions get cosine 0, i.e. a loss contribution of 1
    n = sum(int(np.count_nonzero(~np.any(r.value != 0, axis=1))) for r in recon)
    if n:
        log.warning("%d all-zero reconstruction rows scored with cosine 0", n)
    return n


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


class Forward(NamedTuple):
    sce: ag.Var
    con: ag.Var
    total: ag.Var
    z: ag.Var
    beta: ag.Var
    streams: list
    dropped_positives: int
    zero_recon_rows: int = 0


def forward(state: ModelState, ctx, batch: np.ndarray | None = None, gamma: float = 1.0,
            tau: float = 0.5, params: dict[str, ag.Var] | None = None) -> Forward:
    """Build the loss graph for ``batch`` (all nodes when ``None``)."""
    P = params if params is not None else {k: ag.Var(v) for k, v in state.params.items()}
    act = state.encoder_activation
    n = ctx.n
    idx = np.arange(n) if batch is None else np.asarray(batch, dtype=np.int64)
    if isinstance(ctx, FullContext):
        if batch is not None:
            raise ValueError("the full-graph path trains on every node at once")
        f = _encode(P, ctx.x, act)
        lows = [ag.rownorm(_filter(op, f, ctx.r)) for op in ctx.low_ops]
        highs = [ag.rownorm(_filter(op, f, ctx.r)) for op in ctx.high_ops]
        z_l = _filter(ctx.latent_low_op, f, ctx.r)
        z_h = _filter(ctx.latent_high_op, f, ctx.r)
        x_b = ctx.x
    else:
        lows = [ag.rownorm(_encode(P, xl[idx], act)) for xl in ctx.low]
        highs = [ag.rownorm(_encode(P, xh[idx], act)) for xh in ctx.high]
        z_l = _encode(P, ctx.latent_low[idx], act)
        z_h = _encode(P, ctx.latent_high[idx], act)
        x_b = ctx.x[idx]
    streams = lows + highs
    recon = [ag.elu(ag.matmul(ag.concat([lo, hi], axis=1), P["dec.W"]) + P["dec.b"]) for lo, hi in zip(lows, highs)]
    sce = _sce(_unit_rows(x_b), recon, gamma)
    zero_rows = _count_zero_rows(recon)
    z, beta = _fuse(streams, P["att.q_l"], P["att.q_h"])
    mask, dropped = _positive_mask(ctx.positives, idx, n)
    pz = _project(P, "z", z)
    con = _infonce(pz, _project(P, "l", z_l), mask, tau) + _infonce(pz, _project(P, "h", z_h), mask, tau)
    return Forward(sce, con, sce + con, z, beta, streams, dropped, zero_rows)


def gradients(state: ModelState, ctx, batch=None, gamma: float = 1.0, tau: float = 0.5,
              term: str = "total") -> tuple[dict[str, np.ndarray], Forward]:
    """Exact gradient of one loss term (``"total"``, ``"sce"`` or ``"con"``) w.r.t. every parameter."""
    P = {k: ag.param(v, name=k) for k, v in state.params.items()}
    out = forward(state, ctx, batch, gamma, tau, params=P)
    target = {"total": out.total, "sce": out.sce, "con": out.con}[term]
    target.backward()
    grads = {}
    for k, v in P.items():
        g = v.grad if v.grad is not None else np.zeros_like(v.value)
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {k}", state)
        grads[k] = g
    return grads, out


# ---------------------------------------------------------------------------
# numpy-level operations


def encode_dual(g: HeteroGraph, state: ModelState, r: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Row-normalized (low-pass, high-pass) embeddings for every meta-path (full path)."""
    P = {k: ag.Var(v) for k, v in state.params.items()}
    f = _encode(P, g.features, state.encoder_activation)
    out = []
    for a in g.subgraphs():
        lo = ag.rownorm(_filter(renorm_adj_sym(a).matrix, f, r)).value
        hi = ag.rownorm(_filter(renorm_lap_sym(a).matrix, f, r)).value
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise TrainingDiverged("non-finite embeddings in encode_dual")
        out.append((lo, hi))
    return out


def fuse(streams: Sequence[tuple[np.ndarray, np.ndarray]], q_l, q_h, return_weights: bool = False):
    """Node-wise softmax fusion of all low/high-pass streams."""
    flat = [ag.Var(lo) for lo, _ in streams] + [ag.Var(hi) for _, hi in streams]
    z, beta = _fuse(flat, ag.Var(np.reshape(q_l, (-1, 1))), ag.Var(np.reshape(q_h, (-1, 1))))
    return (z.value, beta.value) if return_weights else z.value


def sce_loss(x, recon: Sequence[np.ndarray], gamma: float = 1.0) -> float:
    """Mean of (1 - cos(x_i, x̂_i))^gamma over nodes and reconstructions."""
    x = np.asarray(x, dtype=np.float64)
    rec = [ag.Var(r) for r in recon]
    _count_zero_rows(rec)
    return float(_sce(_unit_rows(x), rec, gamma).value)


def latent_reps(state: ModelState, x, a_s: SparseAdjacency, a_w: SparseAdjacency, r: int):
    P = {k: ag.Var(v) for k, v in state.params.items()}
    f = _encode(P, np.asarray(x, dtype=np.float64), state.encoder_activation)
    return (_filter(renorm_adj_sym(a_s).matrix, f, r).value,
            _filter(renorm_lap_sym(a_w).matrix, f, r).value)


def infonce(z, z_other, positives: Sequence[Sequence[int]], tau: float,
            heads: tuple[dict, dict] | None = None, candidates=None) -> float:
    """Symmetric contrastive loss between two views.

    ``positives[i]`` lists node ids treated as positives for node ``i`` (the
    node itself is always added). ``heads`` optionally holds two projection
    parameter dicts with keys W1, b1, W2, b2. ``candidates`` restricts the
    contrast to a subset of node ids (a mini-batch).
    """
    z = np.asarray(z, dtype=np.float64)
    z_other = np.asarray(z_other, dtype=np.float64)
    n = z.shape[0]
    idx = np.arange(n) if candidates is None else np.asarray(candidates, dtype=np.int64)
    mask, _ = _positive_mask(NeighborLists.from_lists(positives), idx, n)
    a, b = ag.Var(z[idx]), ag.Var(z_other[idx])
    if heads is not None:
        a, b = (_project({f"head_x.{k}": ag.Var(v) for k, v in h.items()}, "x", v) for h, v in zip(heads, (a, b)))
    return float(_infonce(a, b, mask, tau).value)


def total_loss(state: ModelState, ctx, batch=None, gamma: float = 1.0, tau: float = 0.5) -> float:
    return float(forward(state, ctx, batch, gamma, tau).total.value)


# ---------------------------------------------------------------------------
# training loops


class TrainResult(NamedTuple):
    state: ModelState
    z: np.ndarray
    history: list[dict]


def _log_epoch(epoch: int, sce: float, con: float, total: float, t0: float) -> dict:
    rec = {"epoch": epoch, "sce": sce, "con": con, "total": total,
           "elapsed_ms": round((time.perf_counter() - t0) * 1000.0, 3)}
    log.info(json.dumps(rec))
    return rec


def _check_loss(value: float, epoch: int, last_good: ModelState) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged(f"loss became non-finite at epoch {epoch}", last_good, epoch)


def embed_full(state: ModelState, ctx: FullContext, config: TrainConfig) -> np.ndarray:
    return forward(state, ctx, None, config.gamma, config.tau).z.value.copy()


def train_full(g: HeteroGraph, latent: LatentGraphPair, config: TrainConfig) -> TrainResult:
    """Full-graph training; early-stops once the total loss stalls for ``patience`` epochs."""
    ctx = FullContext.build(g, latent, config.r)
    state = ModelState.init(g.features.shape[1], config.d, config.seed, config.encoder_activation)
    opt = Adam(config.lr, config.weight_decay)
    history, best, stale = [], np.inf, 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        last_good = state.copy()
        grads, out = gradients(state, ctx, None, config.gamma, config.tau)
        total = float(out.total.value)
        _check_loss(total, epoch, last_good)
        history.append(_log_epoch(epoch, float(out.sce.value), float(out.con.value), total, t0))
        if total < best:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
        opt.step(state, grads)
        try:
            state.check_finite()
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), last_good, epoch) from None
    return TrainResult(state, embed_full(state, ctx, config), history)


def embed_scalable(state: ModelState, ctx: ScalableContext, config: TrainConfig) -> np.ndarray:
    P = {k: ag.Var(v) for k, v in state.params.items()}
    act = state.encoder_activation
    out = np.empty((ctx.n, state.d))
    step = max(config.batch_size, 1)
    for start in range(0, ctx.n, step):
        idx = np.arange(start, min(ctx.n, start + step))
        streams = ([ag.rownorm(_encode(P, xl[idx], act)) for xl in ctx.low]
                   + [ag.rownorm(_encode(P, xh[idx], act)) for xh in ctx.high])
        out[idx] = _fuse(streams, P["att.q_l"], P["att.q_h"])[0].value
    return out


def train_scalable(g: HeteroGraph, latent: LatentGraphPair, filtered: FilteredFeatures,
                   config: TrainConfig) -> TrainResult:
    """Mini-batch training over pre-filtered features."""
    if config.batch_size < 2:
        raise ValueError("batch_size must be >= 2 for the contrastive loss")
    ctx = ScalableContext.build(g, latent, filtered)
    state = ModelState.init(g.features.shape[1], config.d, config.seed, config.encoder_activation)
    opt = Adam(config.lr, config.weight_decay)
    rng = np.random.default_rng(config.seed)
    history, best, stale = [], np.inf, 0
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        last_good = state.copy()
        perm = rng.permutation(ctx.n)
        sums = np.zeros(3)
        dropped = 0
        for start in range(0, ctx.n, config.batch_size):
            batch = perm[start:start + config.batch_size]
            if len(batch) < 2:
                # a lone trailing node cannot be contrasted
                continue
            grads, out = gradients(state, ctx, batch, config.gamma, config.tau)
            vals = np.array([out.sce.value, out.con.value, out.total.value], dtype=np.float64)
            _check_loss(float(vals[2]), epoch, last_good)
            sums += vals * len(batch)
            dropped += out.dropped_positives
            opt.step(state, grads)
            try:
                state.check_finite()
            except TrainingDiverged as exc:
                raise TrainingDiverged(str(exc), last_good, epoch) from None
        counted = ctx.n - (ctx.n % config.batch_size == 1)
        sce, con, total = (sums / counted).tolist()
        rec = _log_epoch(epoch, sce, con, total, t0)
        rec["dropped_positives"] = dropped
        history.append(rec)
        if total < best:
            best, stale = total, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return TrainResult(state, embed_scalable(state, ctx, config), history)
