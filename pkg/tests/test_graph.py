import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hetrolat.graph import (
    EdgeType,
    GraphFormatError,
    HeteroGraph,
    MetaPath,
    SparseAdjacency,
    load_graph,
    load_splits,
    metapath_adjacency,
    renorm_adj_sym,
    renorm_lap_sym,
    rw_normalize,
    save_graph,
    spmm,
)
from helpers import brute_metapath, brute_rw, random_hetero, random_symmetric


def _write_dir(root, node_types, edges=None, features=None, labels=None, metapaths=""):
    root.mkdir(parents=True, exist_ok=True)
    (root / "node_types.tsv").write_text("".join(f"{t}\t{c}\n" for t, c in node_types))
    for name, (src_t, dst_t, pairs) in (edges or {}).items():
        body = "".join(f"{s}\t{d}\n" for s, d in pairs)
        (root / f"edges_{name}.tsv").write_text(f"# {src_t}\t{dst_t}\n{body}")
    (root / "features.tsv").write_text(features)
    if labels is not None:
        (root / "labels.tsv").write_text("".join(f"{v}\n" for v in labels))
    (root / "metapaths.txt").write_text(metapaths)
    return root


# ---------------------------------------------------------------------------
# loading


def test_minimal_directory(tmp_path):
    g = load_graph(_write_dir(tmp_path / "d", [("P", 2)], features="0.5\n1.0\n"))
    assert g.n == 2
    assert g.features.shape == (2, 1)
    assert g.metapaths == ()


def test_edge_index_out_of_range(tmp_path):
    d = _write_dir(tmp_path / "d", [("P", 4), ("A", 4)], {"pa": ("P", "A", [(0, 5)])},
                   features="1\n1\n1\n1\n", metapaths="PAP: pa,~pa\n")
    with pytest.raises(GraphFormatError, match="index out of range"):
        load_graph(d)


def test_label_out_of_range(tmp_path):
    d = _write_dir(tmp_path / "d", [("P", 2)], features="1\n1\n", labels=[0, -1])
    with pytest.raises(GraphFormatError, match="label out of range"):
        load_graph(d)


def test_unknown_edge_type_in_metapath(tmp_path):
    d = _write_dir(tmp_path / "d", [("P", 2), ("A", 1)], {"pa": ("P", "A", [(0, 0)])},
                   features="1\n1\n", metapaths="PXP: px,~px\n")
    with pytest.raises(GraphFormatError, match="unknown edge type"):
        load_graph(d)


def test_missing_file(tmp_path):
    d = _write_dir(tmp_path / "d", [("P", 2)], features="1\n1\n")
    (d / "metapaths.txt").unlink()
    with pytest.raises(FileNotFoundError, match="metapaths.txt"):
        load_graph(d)


def test_negative_features_rejected(tmp_path):
    d = _write_dir(tmp_path / "d", [("P", 2)], features="1\n-0.5\n")
    with pytest.raises(GraphFormatError, match="negative"):
        load_graph(d)


def test_feature_row_count_checked():
    with pytest.raises(GraphFormatError, match="rows"):
        HeteroGraph({"P": 3}, {}, "P", np.ones((2, 1)))


def test_mismatched_metapath_chain():
    et = {"pa": EdgeType("pa", "P", "A", np.array([0]), np.array([0])),
          "ps": EdgeType("ps", "P", "S", np.array([0]), np.array([0]))}
    with pytest.raises(GraphFormatError, match="previous step ends"):
        HeteroGraph({"P": 2, "A": 1, "S": 1}, et, "P", np.ones((2, 1)), None, (MetaPath("BAD", ("pa", "~ps", "ps")),))


def test_metapath_must_return_to_target():
    et = {"pa": EdgeType("pa", "P", "A", np.array([0]), np.array([0]))}
    with pytest.raises(GraphFormatError, match="start and end"):
        HeteroGraph({"P": 2, "A": 1}, et, "P", np.ones((2, 1)), None, (MetaPath("PA", ("pa",)),))


def test_metapath_parse_roundtrip():
    mp = MetaPath.parse("PAP: pa, ~pa")
    assert mp == MetaPath("PAP", ("pa", "~pa"))
    assert MetaPath.parse(str(mp)) == mp
    with pytest.raises(GraphFormatError):
        MetaPath.parse("no colon here")


def test_save_load_roundtrip(tmp_path):
    g = random_hetero(3, p_cite=0.1)
    splits = {"train20": [0, 1], "val": [2, 3], "test": [4, 5, 0]}
    save_graph(g, tmp_path / "g", splits)
    h = load_graph(tmp_path / "g")
    assert h.digest() == g.digest()
    np.testing.assert_array_equal(h.features, g.features)
    for a, b in zip(g.subgraphs(), h.subgraphs()):
        assert (a.matrix != b.matrix).nnz == 0
    sp_ = load_splits(tmp_path / "g" / "splits.tsv")
    assert sp_["test"].tolist() == [4, 5, 0]


def test_load_splits_rejects_unknown_name(tmp_path):
    p = tmp_path / "s.tsv"
    p.write_text("0\ttrain20\n1\tholdout\n")
    with pytest.raises(GraphFormatError, match="unknown split"):
        load_splits(p)


# ---------------------------------------------------------------------------
# meta-path composition


def test_shared_author_creates_edge():
    et = {"pa": EdgeType("pa", "P", "A", np.array([0, 1, 2]), np.array([0, 0, 1]))}
    g = HeteroGraph({"P": 3, "A": 2}, et, "P", np.ones((3, 1)), None, (MetaPath("PAP", ("pa", "~pa")),))
    a = metapath_adjacency(g, g.metapaths[0]).toarray()
    assert a[0, 1] == 1 and a[1, 0] == 1
    assert a[0, 2] == 0 and a[2, 2] == 0


def test_empty_relation_gives_zero_matrix():
    et = {"pa": EdgeType("pa", "P", "A", np.zeros(0, np.int64), np.zeros(0, np.int64))}
    g = HeteroGraph({"P": 3, "A": 2}, et, "P", np.ones((3, 1)), None, (MetaPath("PAP", ("pa", "~pa")),))
    a = metapath_adjacency(g, g.metapaths[0])
    assert a.nnz == 0 and a.n == 3


def test_metapath_binarized_and_cached():
    # two shared authors would give multiplicity 2 without binarization
    et = {"pa": EdgeType("pa", "P", "A", np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]))}
    g = HeteroGraph({"P": 2, "A": 2}, et, "P", np.ones((2, 1)), None, (MetaPath("PAP", ("pa", "~pa")),))
    a = metapath_adjacency(g, g.metapaths[0])
    assert a.toarray().tolist() == [[0, 1], [1, 0]]
    assert metapath_adjacency(g, g.metapaths[0]) is a


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n_p=st.integers(2, 50), p=st.floats(0.0, 0.5))
def test_metapath_matches_path_enumeration(seed, n_p, p):
    g = random_hetero(seed, n_p=n_p, n_a=7, n_s=4, p_pa=p, p_ps=p / 2, p_cite=p / 3)
    for mp in g.metapaths:
        a = metapath_adjacency(g, mp)
        rows, cols = a.matrix.nonzero()
        assert set(zip(rows.tolist(), cols.tolist())) == brute_metapath(g, mp)
        assert a.symmetric and np.all(a.data == 1.0)


# ---------------------------------------------------------------------------
# renormalized matrices


def test_renorm_isolated_node():
    a = SparseAdjacency.from_dense([[0.0]], symmetric=True)
    assert renorm_adj_sym(a).toarray().tolist() == [[1.0]]
    assert renorm_lap_sym(a).toarray().tolist() == [[0.0]]
    assert rw_normalize(a).toarray().tolist() == [[1.0]]


def test_renorm_single_edge():
    a = SparseAdjacency.from_dense([[0, 1], [1, 0]], symmetric=True)
    np.testing.assert_allclose(renorm_adj_sym(a).toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(renorm_lap_sym(a).toarray(), [[0.5, -0.5], [-0.5, 0.5]], atol=1e-15)
    np.testing.assert_allclose(rw_normalize(a).toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_renorm_triangle():
    a = SparseAdjacency.from_dense(np.ones((3, 3)) - np.eye(3), symmetric=True)
    np.testing.assert_allclose(renorm_adj_sym(a).toarray(), np.full((3, 3), 1 / 3), atol=1e-15)


def test_rw_normalize_matches_oracle():
    rng = np.random.default_rng(0)
    a = random_symmetric(rng, 9, 0.3)
    np.testing.assert_allclose(rw_normalize(SparseAdjacency.from_dense(a)).toarray(), brute_rw(a), atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), p=st.floats(0.0, 1.0))
def test_spectral_identities(seed, n, p):
    a = SparseAdjacency.from_dense(random_symmetric(np.random.default_rng(seed), n, p), symmetric=True)
    adj = renorm_adj_sym(a).toarray()
    lap = renorm_lap_sym(a).toarray()
    assert np.abs(adj + lap - np.eye(n)).max() <= 1e-12
    v = np.sqrt(a.degrees() + 1.0)[:, None]
    assert np.abs(spmm(renorm_lap_sym(a), v)).max() <= 1e-9
    assert np.abs(rw_normalize(a).toarray().sum(axis=1) - 1.0).max() <= 1e-12
    # entries of the renormalized adjacency lie in (0, 1] on the support, eigenvalues of L in [0, 2)
    nz = adj[adj != 0]
    assert np.all((nz > 0) & (nz <= 1.0 + 1e-15))
    ev = np.linalg.eigvalsh(lap)
    assert ev.min() >= -1e-12 and ev.max() < 2.0


# ---------------------------------------------------------------------------
# spmm


def test_spmm_identity_and_zero():
    h = np.random.default_rng(1).random((5, 3))
    eye = SparseAdjacency(sp.identity(5, format="csr"))
    np.testing.assert_array_equal(spmm(eye, h), h)
    zero = SparseAdjacency(sp.csr_matrix((5, 5)))
    np.testing.assert_array_equal(spmm(zero, h), np.zeros((5, 3)))


def test_spmm_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        spmm(SparseAdjacency(sp.identity(4, format="csr")), np.ones((5, 2)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 64), d=st.integers(1, 64), p=st.floats(0.0, 1.0))
def test_spmm_matches_dense(seed, n, d, p):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.random((n, n)) < p, rng.normal(size=(n, n)), 0.0)
    h = rng.normal(size=(n, d))
    ref = dense @ h
    got = spmm(SparseAdjacency.from_dense(dense), h)
    scale = np.abs(dense).sum(axis=1, keepdims=True) * np.abs(h).max() + 1e-300
    assert np.all(np.abs(got - ref) <= 1e-12 * scale)


def test_symmetric_flag_verified():
    with pytest.raises(GraphFormatError, match="symmetric"):
        SparseAdjacency.from_dense([[0, 1], [0, 0]], symmetric=True)
