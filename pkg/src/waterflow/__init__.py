"""Underwater scene synthesis, physical priors, and rectified-flow saliency masks."""

from .config import RunConfig
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    EstimationError,
    NumericalError,
    PipelineIOError,
    ShapeError,
    WaterflowError,
)
from .estimator import WaterFlowSegmenter
from .flow import (
    FlowSample,
    SamplerConfig,
    TrainConfig,
    Trainer,
    TrainItem,
    interpolate,
    prepare_item,
    sample,
    task_loss,
)
from .imaging import (
    ImagingParams,
    Scene,
    degrade,
    estimate_background_light,
    load_scene,
    restore,
    restore_with_maps,
    save_scene,
    synth_scene,
    transmission,
)
from .metrics import MetricsReport, e_measure_mean, evaluate_pairs, f_measure_mean, mae, s_measure
from .net import Network, load_checkpoint, save_checkpoint, sinusoidal_time_embedding
from .optim import AdamWState, adamw_step
from .priors import (
    PriorStack,
    StagedPriors,
    StageEncoder,
    compute_priors,
    depth_gradient,
    encode_stages,
    estimate_beta_D,
    extract_priors,
    stage_inputs,
)
from .rng import RngState

__version__ = "0.1.0"

__all__ = [
    "AdamWState",
    "ConfigError",
    "ContractError",
    "DomainError",
    "EstimationError",
    "FlowSample",
    "ImagingParams",
    "MetricsReport",
    "Network",
    "NumericalError",
    "PipelineIOError",
    "PriorStack",
    "RngState",
    "RunConfig",
    "SamplerConfig",
    "Scene",
    "ShapeError",
    "StageEncoder",
    "StagedPriors",
    "TrainConfig",
    "TrainItem",
    "Trainer",
    "WaterFlowSegmenter",
    "WaterflowError",
    "adamw_step",
    "compute_priors",
    "degrade",
    "depth_gradient",
    "e_measure_mean",
    "encode_stages",
    "estimate_background_light",
    "estimate_beta_D",
    "evaluate_pairs",
    "extract_priors",
    "f_measure_mean",
    "interpolate",
    "load_checkpoint",
    "load_scene",
    "mae",
    "prepare_item",
    "restore",
    "restore_with_maps",
    "s_measure",
    "sample",
    "save_checkpoint",
    "save_scene",
    "sinusoidal_time_embedding",
    "stage_inputs",
    "synth_scene",
    "task_loss",
    "transmission",
]
