"""Spatial attention kinetic networks (SAKE) on a small numpy autodiff core."""

from .geometry import EnTransform, apply_transform, compute_edge_geometry, cutoff_weight, random_en_transform, rbf_expand
from .model import (
    Graph,
    GraphState,
    SakeLayer,
    SakeModel,
    batch_graphs,
    complete_graph,
    forecast_positions,
    make_state,
    model_forward,
    predict_energy_forces,
    theorem1_lambda_oracle,
)
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
