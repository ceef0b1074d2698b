"""Downstream protocols on frozen embeddings: linear probe, k-means, similarity search."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import adjusted_rand_score, f1_score, normalized_mutual_info_score, roc_auc_score

log = logging.getLogger("hetrolat.eval")

C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass
class ProbeResult:
    macro_f1: tuple[float, float]
    micro_f1: tuple[float, float]
    auc: tuple[float, float]
    runs: int

    def to_json(self) -> dict:
        return {
            "macro_f1": {"mean": self.macro_f1[0], "std": self.macro_f1[1]},
            "micro_f1": {"mean": self.micro_f1[0], "std": self.micro_f1[1]},
            "auc": {"mean": self.auc[0], "std": self.auc[1]},
            "runs": self.runs,
        }


def _auc(y_true, proba, classes) -> float:
    if len(classes) == 2:
        return float(roc_auc_score(y_true, proba[:, 1]))
    return float(roc_auc_score(y_true, proba, multi_class="ovr", average="macro", labels=classes))


def _fit(emb_train, y_train, c, seed):
    clf = LogisticRegression(C=c, max_iter=2000, tol=1e-8, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(emb_train, y_train)
    return clf


def linear_probe(emb, y, train_idx, val_idx, test_idx, runs: int = 10, seed: int = 0) -> ProbeResult:
    """Multinomial logistic regression on frozen embeddings.

    The inverse regularization strength is picked on the validation nodes
    (by Macro-F1) from a fixed grid, then test Macro-F1, Micro-F1 and
    macro one-vs-rest AUC are reported as mean and std over ``runs`` seeds.
    """
    emb = np.asarray(emb, dtype=np.float64)
    y = np.asarray(y)
    classes = np.unique(y)
    missing = np.setdiff1d(classes, y[train_idx])
    if len(missing):
        raise ValueError(f"class {missing[0]} absent from the training split")
    scores = []
    for run in range(runs):
        s = seed + run
        best = None
        for c in C_GRID:
            clf = _fit(emb[train_idx], y[train_idx], c, s)
            f1 = f1_score(y[val_idx], clf.predict(emb[val_idx]), average="macro")
            if best is None or f1 > best[0]:
                best = (f1, clf)
        clf = best[1]
        pred = clf.predict(emb[test_idx])
        proba = clf.predict_proba(emb[test_idx])
        scores.append((
            f1_score(y[test_idx], pred, average="macro"),
            f1_score(y[test_idx], pred, average="micro"),
            _auc(y[test_idx], proba, classes),
        ))
    arr = np.array(scores)
    mean, std = arr.mean(axis=0), arr.std(axis=0)
    return ProbeResult((mean[0], std[0]), (mean[1], std[1]), (mean[2], std[2]), runs)


def cluster_eval(emb, y, restarts: int = 10, seed: int = 0) -> tuple[float, float]:
    """Mean NMI and ARI of k-means (k = #classes, k-means++ init) over seeded restarts."""
    emb = np.asarray(emb, dtype=np.float64)
    y = np.asarray(y)
    k = len(np.unique(y))
    if k < 2:
        raise ValueError("need at least 2 classes for clustering evaluation")
    nmi, ari = [], []
    for run in range(restarts):
        km = KMeans(n_clusters=k, init="k-means++", n_init=1, algorithm="lloyd", random_state=seed + run)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            pred = km.fit_predict(emb)
        nmi.append(normalized_mutual_info_score(y, pred))
        ari.append(adjusted_rand_score(y, pred))
    return float(np.mean(nmi)), float(np.mean(ari))


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(n > 0, x / np.where(n > 0, n, 1.0), 0.0)


def sim_search(emb, y, nhr_values, n_lowest: int = 200, ks=(5, 10)) -> dict[int, float]:
    """Same-label rate among the top-k cosine neighbors of the lowest-NHR nodes.

    Isolated nodes (NaN NHR) are never queries; the whole graph is searched.
    """
    emb = _unit(np.asarray(emb, dtype=np.float64))
    y = np.asarray(y)
    nhr_values = np.asarray(nhr_values, dtype=np.float64)
    valid = np.flatnonzero(~np.isnan(nhr_values))
    if len(valid) < n_lowest:
        log.warning("only %d non-isolated nodes available, using all of them", len(valid))
    order = valid[np.argsort(nhr_values[valid], kind="stable")]
    queries = order[:n_lowest]
    sims = emb[queries] @ emb.T
    sims[np.arange(len(queries)), queries] = -np.inf
    ranked = np.argsort(-sims, axis=1, kind="stable")
    return {int(k): float(np.mean(y[ranked[:, :k]] == y[queries][:, None])) for k in ks}


def silhouette(emb, y) -> float:
    from sklearn.metrics import silhouette_score

    return float(silhouette_score(np.asarray(emb, dtype=np.float64), np.asarray(y), metric="cosine"))


@dataclass
class EvalReport:
    probe: dict[str, ProbeResult] = field(default_factory=dict)
    nmi: float | None = None
    ari: float | None = None
    sim_at_k: dict[str, dict[int, float]] = field(default_factory=dict)
    silhouette: float | None = None

    def to_json(self) -> dict:
        return {
            "probe": {k: v.to_json() for k, v in self.probe.items()},
            "clustering": {"nmi": self.nmi, "ari": self.ari},
            "sim_at_k": {mp: {str(k): v for k, v in t.items()} for mp, t in self.sim_at_k.items()},
            "silhouette": self.silhouette,
        }


def evaluate(emb, g, splits: dict | None = None, runs: int = 10, restarts: int = 10, n_lowest: int = 200,
             ks=(5, 10)) -> EvalReport:
    """All protocols on one embedding matrix for a labeled graph."""
    from .homophily import nhr

    if g.labels is None:
        raise ValueError("labels required")
    y = g.labels
    rep = EvalReport()
    if splits:
        for name in ("train20", "train40", "train60"):
            if name in splits and "val" in splits and "test" in splits:
                rep.probe[name] = linear_probe(emb, y, splits[name], splits["val"], splits["test"], runs=runs)
    rep.nmi, rep.ari = cluster_eval(emb, y, restarts=restarts)
    for mp in g.metapaths:
        rep.sim_at_k[mp.name] = sim_search(emb, y, nhr(g, mp), n_lowest=n_lowest, ks=ks)
    rep.silhouette = silhouette(emb, y)
    return rep
