"""Temporal neural fields with time-conditioned residual weight layers."""

from .estimator import NeuralFieldRegressor, SceneFlowRegressor
from .models import FlowHead, ResFieldSpec, build_relu_pe, build_siren
from .resfield import ChunkedSchedule, ResFieldLayer, make_factorization

__version__ = "0.1.0"

__all__ = [
    "ChunkedSchedule",
    "FlowHead",
    "NeuralFieldRegressor",
    "ResFieldLayer",
    "ResFieldSpec",
    "SceneFlowRegressor",
    "build_relu_pe",
    "build_siren",
    "make_factorization",
]
