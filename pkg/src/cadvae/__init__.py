"""Causal disentangled variational autoencoder for implicit-feedback recommendation."""

from .data import ConceptSchema, InteractionDataset, UserConceptFeature
from .estimator import CaDVAE
from .graph import CausalLayer, ElementwiseTransform, causal_transform, check_acyclic, inverse_transform, scm_residual
from .model import CaDVAEModule, Checkpoint
from .trainer import TrainConfig, train, validate

__all__ = [
    "CaDVAE",
    "CaDVAEModule",
    "CausalLayer",
    "Checkpoint",
    "ConceptSchema",
    "ElementwiseTransform",
    "InteractionDataset",
    "TrainConfig",
    "UserConceptFeature",
    "causal_transform",
    "check_acyclic",
    "inverse_transform",
    "scm_residual",
    "train",
    "validate",
]
