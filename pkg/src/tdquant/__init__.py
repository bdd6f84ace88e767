"""Timestep-dynamic post-training quantization toolkit.

Profiles per-timestep, per-layer sensitivity of a small deterministic
diffusion transformer, calibrates quantized weights against a temporally
weighted Hessian, and searches for an activation bit-width schedule under
an average-bit budget.
"""

from .calib import (
    CalibReport,
    CalibResult,
    RiskAwareHessian,
    accumulate_hessian,
    calibrate_model,
    gptq_quantize,
    mean_error_top_timesteps,
)
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    MissingTimestepsError,
    NumericalError,
    ParameterError,
    PluginShapeError,
    ShapeError,
    SingularHessianError,
    TdqError,
)
from .fisher import (
    FisherMap,
    TemporalWeights,
    estimate_fisher,
    normalize_heatmap,
    temporal_weights,
    uniform_weights,
)
from .pipeline import (
    PipelineConfig,
    compare_policies,
    default_config,
    load_config,
    run_pipeline,
)
from .quant import ActivationTable, QuantParams, QuantSpec, calibrate_minmax, fake_quant, quantize_layer_weights
from .search import (
    BitSchedule,
    SearchConfig,
    StepLossEvaluator,
    beam_search,
    brute_force_optimum,
    end_to_end_error,
    final_select,
    generate_candidates,
    pareto_prune,
)
from .toy_dit import Model, ModelSpec, forward, init_model, load_model, sample_trajectory, save_model

__version__ = "0.1.0"

__all__ = [
    "ActivationTable",
    "BitSchedule",
    "CalibReport",
    "CalibResult",
    "ConfigError",
    "FisherMap",
    "InfeasibleBudgetError",
    "MissingTimestepsError",
    "Model",
    "ModelSpec",
    "NumericalError",
    "ParameterError",
    "PipelineConfig",
    "PluginShapeError",
    "QuantParams",
    "QuantSpec",
    "RiskAwareHessian",
    "SearchConfig",
    "ShapeError",
    "SingularHessianError",
    "StepLossEvaluator",
    "TdqError",
    "TemporalWeights",
    "accumulate_hessian",
    "beam_search",
    "brute_force_optimum",
    "calibrate_minmax",
    "calibrate_model",
    "compare_policies",
    "default_config",
    "end_to_end_error",
    "estimate_fisher",
    "fake_quant",
    "final_select",
    "forward",
    "generate_candidates",
    "gptq_quantize",
    "init_model",
    "load_config",
    "load_model",
    "mean_error_top_timesteps",
    "normalize_heatmap",
    "pareto_prune",
    "quantize_layer_weights",
    "run_pipeline",
    "sample_trajectory",
    "save_model",
    "temporal_weights",
    "uniform_weights",
    "__version__",
]
