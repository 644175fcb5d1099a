"""Context-aware, inversion-free editing on analytic Gaussian-mixture flows."""

from .conceptalign import (
    DETACHED,
    THROUGH_MODEL,
    ConceptMask,
    GuidanceError,
    Measurement,
    compute_mask,
    guidance_velocity,
    make_measurement,
    tweedie_z0,
)
from .experiments import ConfigError, RunConfig, RunRecord, load_manifest, parse_config, run_experiment
from .flowmodel import (
    ConceptSet,
    Condition,
    ConstantVelocityModel,
    DomainMixtureModel,
    ModelError,
    cfg_combine,
    load_model,
    save_model,
)
from .sampler import (
    EditConfig,
    EditError,
    EditResult,
    combined_velocity,
    flowedit_run,
    generate,
    inversion_edit_run,
    invert,
    vicoedit_run,
)
from .schedule import PathScheduler, ScheduleError, TimeGrid, make_uniform_grid, path_coeffs

__version__ = "0.1.0"

__all__ = [
    "DETACHED",
    "THROUGH_MODEL",
    "ConceptMask",
    "ConceptSet",
    "Condition",
    "ConfigError",
    "ConstantVelocityModel",
    "DomainMixtureModel",
    "EditConfig",
    "EditError",
    "EditResult",
    "GuidanceError",
    "Measurement",
    "ModelError",
    "PathScheduler",
    "RunConfig",
    "RunRecord",
    "ScheduleError",
    "TimeGrid",
    "cfg_combine",
    "combined_velocity",
    "compute_mask",
    "flowedit_run",
    "generate",
    "guidance_velocity",
    "inversion_edit_run",
    "invert",
    "load_manifest",
    "load_model",
    "make_measurement",
    "make_uniform_grid",
    "parse_config",
    "path_coeffs",
    "run_experiment",
    "save_model",
    "tweedie_z0",
    "vicoedit_run",
]
