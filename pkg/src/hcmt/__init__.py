"""Learned mesh simulator for flexible-body impacts.

Contact-aware graph attention (CMT) followed by hierarchical mesh attention
(HMT) over bi-stride pooled, Delaunay-remeshed levels, plus a mass-spring
impact generator for ground truth.
"""

from .cmt import CmtBlock, cmt_layer
from .dataset import Dataset, DatasetError
from .delaunay import delaunay_triangulate, empty_circumcircle_violations
from .hierarchy import Hierarchy, bfs_pool, build_hierarchy, mesh_quality
from .hmt import HmtBlock, hmt_layer, make_schedule, pool_states, unpool_states
from .mesh import (
    ConfigError,
    MeshTopology,
    NodeKind,
    SystemState,
    TopologyError,
    Trajectory,
    build_contact_edges,
    build_graph,
    make_graph_sample,
)
from .model import HCMT, ModelConfig, load_model, loss_fn, prepare_inputs, save_model, update_positions

__version__ = "0.1.0"
