"""Overlapping community detection and node embedding with a discrete latent model.

Each edge ``(w, c)`` is explained by a community drawn from a node-specific
prior, which then emits ``c``. Training maximizes an evidence lower bound
with straight-through Gumbel-Softmax samples; communities and node
embeddings come out of the same parameters.
"""

__version__ = "0.1.0"

from .graph import CommunitySet, Graph, ParseError, generate_hierarchical_sbm, generate_sbm, load_communities, load_edge_list
from .model import ModelParams, assign_nonoverlapping, assign_overlapping, init_params, node_memberships
from .training import TrainConfig, TrainedModel, TrainingDiverged, train

__all__ = [
    "CommunitySet",
    "Graph",
    "ModelParams",
    "ParseError",
    "TrainConfig",
    "TrainedModel",
    "TrainingDiverged",
    "assign_nonoverlapping",
    "assign_overlapping",
    "generate_hierarchical_sbm",
    "generate_sbm",
    "init_params",
    "load_communities",
    "load_edge_list",
    "node_memberships",
    "train",
]
