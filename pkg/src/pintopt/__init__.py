"""Time-parallel One-shot optimization with FAS-MGRIT and its exact transpose."""

from .adjoint_mgrit import CycleTape, Piggyback, adjoint_cycle, estimate_time_lag, serial_adjoint
from .errors import (
    DivergenceDetected,
    ExperimentFailed,
    InsufficientData,
    InvalidConfig,
    InvalidInput,
    MaxItersExceeded,
    NonConvergence,
    ParseError,
    PintoptError,
    SingularLinearization,
    TapeMismatch,
    ValidationError,
)
from .harness import ExperimentConfig, ResultBundle, cost_report, emit_csv, parse_config, read_csv, run_experiment
from .mgrit import (
    ConvergenceRecord,
    CostCounter,
    Mgrit,
    MgritConfig,
    TemporalHierarchy,
    build_hierarchy,
    estimate_contraction,
    serial_solve,
)
from .model_problem import ModelConfig, ModelState, VanDerPolAdvection
from .optimize import (
    OptimizationResult,
    OptimizationTrace,
    OptimizerConfig,
    alpha_bound,
    augmented_lagrangian,
    design_update,
    oneshot_run,
    reduced_gradient,
    reduced_space_parallel,
    reduced_space_serial,
)

__version__ = "0.1.0"
