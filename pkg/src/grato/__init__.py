"""Differentiable architecture search over GNN operations that resist over-smoothing."""

from .kernels import BACKEND
from .graph import Graph, SbmConfig, SparseAdj, generate_sbm, load_graph, save_graph
from .objective import LossConfig
from .search import SearchConfig, retrain_derived, search_loop
from .supernet import BlockSpec, DerivedArch, Network, build_discrete_model, derive_architecture

__all__ = [
    "BACKEND",
    "BlockSpec",
    "DerivedArch",
    "Graph",
    "LossConfig",
    "Network",
    "SbmConfig",
    "SearchConfig",
    "SparseAdj",
    "build_discrete_model",
    "derive_architecture",
    "generate_sbm",
    "load_graph",
    "retrain_derived",
    "save_graph",
    "search_loop",
]

__version__ = "0.1.0"
