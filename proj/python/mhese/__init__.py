"""Moving-horizon dynamic state estimation for power systems."""

from ._core import (
    ConfigError,
    ConvergenceError,
    DataMismatch,
    Error,
    ExperimentResult,
    GeneratorParams,
    GeneratorState,
    InvalidParameters,
    OutOfRange,
    RunConfig,
    SingularKkt,
    Unobservable,
    dq_current,
    format_report,
    gauss_newton_step,
    load_run_config,
    parse_run_config,
    residual_covariance,
    run_experiment,
    wrap_angle,
    write_outputs,
)

__all__ = [
    "ConfigError",
    "ConvergenceError",
    "DataMismatch",
    "Error",
    "ExperimentResult",
    "GeneratorParams",
    "GeneratorState",
    "InvalidParameters",
    "OutOfRange",
    "RunConfig",
    "SingularKkt",
    "Unobservable",
    "dq_current",
    "format_report",
    "gauss_newton_step",
    "load_run_config",
    "parse_run_config",
    "residual_covariance",
    "run_experiment",
    "wrap_angle",
    "write_outputs",
]
