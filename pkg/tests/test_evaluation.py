import json

import numpy as np
import pytest
from scipy.stats import special_ortho_group

from hetrolat.evaluation import EvalReport, cluster_eval, evaluate, linear_probe, silhouette, sim_search
from hetrolat.homophily import nhr
from hetrolat.synthetic import SyntheticSpec, generate_synthetic, make_splits


def _splits(y, seed=0):
    s = make_splits(y, seed, sizes=(5,))
    return s["train5"], s["val"], s["test"]


def test_probe_separable_one_hot():
    y = np.repeat(np.arange(3), 30)
    res = linear_probe(np.eye(3)[y], y, *_splits(y), runs=2)
    assert res.macro_f1[0] == 1.0 and res.micro_f1[0] == 1.0 and res.auc[0] == 1.0


def test_probe_random_labels_is_chance():
    rng = np.random.default_rng(0)
    y = np.repeat([0, 1], 1500)
    emb = rng.normal(size=(3000, 8))
    res = linear_probe(emb, rng.permutation(y), *_splits(y), runs=2)
    assert abs(res.auc[0] - 0.5) <= 0.05


def test_probe_missing_class():
    y = np.repeat(np.arange(3), 10)
    with pytest.raises(ValueError, match="class 2 absent"):
        linear_probe(np.eye(3)[y], y, np.arange(20), np.arange(20, 25), np.arange(25, 30))


def test_probe_rotation_invariance():
    g = generate_synthetic(SyntheticSpec(seed=2))
    y = g.labels
    tr, va, te = _splits(y)
    base = linear_probe(g.features, y, tr, va, te, runs=1)
    for s in range(5):
        q = special_ortho_group.rvs(g.features.shape[1], random_state=s)
        rot = linear_probe(g.features @ q, y, tr, va, te, runs=1)
        assert abs(rot.macro_f1[0] - base.macro_f1[0]) <= 0.005


def test_cluster_one_hot_and_collapsed():
    y = np.repeat(np.arange(4), 25)
    assert cluster_eval(np.eye(4)[y], y, restarts=3) == (1.0, 1.0)
    nmi, ari = cluster_eval(np.ones((100, 3)), y, restarts=2)
    assert nmi == pytest.approx(0.0, abs=1e-12) and ari == pytest.approx(0.0, abs=1e-12)


def test_cluster_blobs():
    rng = np.random.default_rng(0)
    centers = np.array([[0, 0], [5, 0], [0, 5]], float)
    y = np.repeat(np.arange(3), 50)
    emb = centers[y] + rng.normal(scale=0.3, size=(150, 2))
    assert cluster_eval(emb, y)[1] >= 0.95


def test_cluster_label_permutation_invariance():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 3, 120)
    emb = np.eye(3)[y] + rng.normal(scale=0.8, size=(120, 3))
    perm = np.array([2, 0, 1])
    a, b = cluster_eval(emb, y, restarts=4), cluster_eval(emb, perm[y], restarts=4)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_cluster_needs_two_classes():
    with pytest.raises(ValueError, match="2 classes"):
        cluster_eval(np.ones((5, 2)), np.zeros(5, int))


def test_sim_search_one_hot_and_random():
    y = np.repeat(np.arange(4), 30)
    nh = np.linspace(0, 1, 120)
    emb = np.eye(4)[y]
    out = sim_search(emb, y, nh, n_lowest=50, ks=(1, 5, 10))
    assert out == {1: 1.0, 5: 1.0, 10: 1.0}
    rnd = sim_search(np.random.default_rng(0).normal(size=(120, 16)), y, nh, n_lowest=120, ks=(10,))
    assert abs(rnd[10] - 0.25) <= 0.05


def test_sim_search_skips_isolated(caplog):
    y = np.array([0, 0, 1, 1])
    nh = np.array([np.nan, 0.5, np.nan, 0.0])
    with caplog.at_level("WARNING"):
        out = sim_search(np.eye(2)[y], y, nh, n_lowest=200, ks=(1,))
    assert out == {1: 1.0}
    assert "non-isolated" in caplog.text


def test_silhouette_separated():
    y = np.repeat([0, 1], 10)
    assert silhouette(np.eye(2)[y] + 1e-3, y) > 0.9


def test_evaluate_end_to_end():
    g = generate_synthetic(SyntheticSpec(n_per_class=40))
    rep = evaluate(g.features, g, make_splits(g.labels, 0, sizes=(5, 10, 15)), runs=1, restarts=2)
    assert isinstance(rep, EvalReport)
    doc = json.loads(json.dumps(rep.to_json()))
    assert set(doc["sim_at_k"]) == {"MP1", "MP2"}
    assert doc["clustering"]["nmi"] is not None
    # queries come from the lowest-NHR nodes of each meta-path
    assert rep.sim_at_k["MP1"] == sim_search(g.features, g.labels, nhr(g, g.metapath("MP1")))
