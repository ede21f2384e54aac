"""Matrix-free inverse empirical Fisher products, pruning and optimization."""

from .core import (BlockLayout, ConfigError, FisherConfig, FormatError, GradientMatrix,
                   NumericalError, batch_average_gradients, synthetic_gradients)
from .dynamic import (DynamicSketch, dynamic_ihvp, dynamic_setup, replace_gradient,
                      update_and_ihvp, window_state)
from .oracle import dense_fisher, dense_ihvp, dense_inverse_direct, dense_inverse_woodbury
from .optimizer import OptimizerState, cosine_similarity_probe, optimizer_step, run_training
from .paging import paged_static_setup
from .pruning import (PruneDecision, SparsitySchedule, apply_update, prune_step, saliency,
                      select_prune)
from .static import (BlockStaticSketch, StaticSketch, blockwise_setup, build_sketch,
                     static_diag, static_element, static_ihvp, static_row_select, static_setup)

__version__ = "0.1.0"

__all__ = [
    "BlockLayout", "BlockStaticSketch", "ConfigError", "DynamicSketch", "FisherConfig",
    "FormatError", "GradientMatrix", "NumericalError", "OptimizerState", "PruneDecision",
    "SparsitySchedule", "StaticSketch", "apply_update", "batch_average_gradients",
    "blockwise_setup", "build_sketch", "cosine_similarity_probe", "dense_fisher", "dense_ihvp",
    "dense_inverse_direct", "dense_inverse_woodbury", "dynamic_ihvp", "dynamic_setup",
    "optimizer_step", "paged_static_setup", "prune_step", "replace_gradient", "run_training",
    "saliency", "select_prune", "static_diag", "static_element", "static_ihvp",
    "static_row_select", "static_setup", "synthetic_gradients", "update_and_ihvp",
    "window_state",
]
