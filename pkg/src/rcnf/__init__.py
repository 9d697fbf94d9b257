"""Continuous normalizing flows on Riemannian manifolds (Euclidean space, Poincare ball, sphere)."""
from .geometry import Euclidean, Manifold, PoincareBall, Sphere, make_manifold
from .netfield import FieldConfig, VectorField, load_checkpoint, save_checkpoint
from .flow import DivergenceMode, FlowResult, RiemannianCNF, SolverConfig, integrate
from .distributions import DiagGaussian, UniformSphere, VmfMixture, VonMisesFisher, WrappedNormal
from .projected import NaiveModel, StereographicModel, WrappedModel, build_model, model_log_prob, model_sample
from .training import TrainConfig, train

__all__ = [
    "Euclidean", "Manifold", "PoincareBall", "Sphere", "make_manifold",
    "FieldConfig", "VectorField", "load_checkpoint", "save_checkpoint",
    "DivergenceMode", "FlowResult", "RiemannianCNF", "SolverConfig", "integrate",
    "DiagGaussian", "UniformSphere", "VmfMixture", "VonMisesFisher", "WrappedNormal",
    "NaiveModel", "StereographicModel", "WrappedModel", "build_model", "model_log_prob", "model_sample",
    "TrainConfig", "train",
]
