"""Unsupervised heterogeneous graph representation learning guided by latent graphs."""
from .graph import (
    GraphFormatError,
    HeteroGraph,
    MetaPath,
    SparseAdjacency,
    load_graph,
    metapath_adjacency,
    renorm_adj_sym,
    renorm_lap_sym,
    rw_normalize,
    save_graph,
    spmm,
)
from .homophily import edge_hr, homophily_report, knn_graph, mhr, nhr
from .latent import (
    LatentGraphPair,
    build_latent_graphs_full,
    build_latent_graphs_scalable,
    coupled_similarity,
    diffusion_matrix,
    latent_hr_audit,
)
from .filters import high_pass, low_pass, pre_filter
from .model import ModelState, TrainConfig, train_full, train_scalable
from .synthetic import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
