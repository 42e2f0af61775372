"""Contracting polynomial vector fields learned from demonstrations."""

from cvfields.polyalg import (
    MonomialBasis,
    Polynomial,
    PolyMap,
    PolyTrajectory,
    UniPoly,
    UniPolyMatrix,
    compose,
    compose_scaled,
    fit_trajectory,
    integrate,
)
from cvfields.data import Demonstration, read_trajectory_csv, write_trajectory_csv
from cvfields.learner import (
    ContractionSpec,
    FitDiagnostics,
    FitOptions,
    LearnerError,
    MetricField,
    VectorFieldModel,
    contraction_residual_batch,
    fit,
    fit_unconstrained,
)
from cvfields.bench import (
    BenchmarkConfig,
    BenchmarkReport,
    dtw,
    goal_metrics,
    grid_metrics,
    run_benchmark,
    split_demos,
    trajectory_error,
    velocity_error,
)
from cvfields.dynsys import (
    ModulatedField,
    ObstacleField,
    SequentialField,
    SimTrajectory,
    TubeEstimate,
    calibrate_alpha,
    compose_sequential,
    contraction_residual,
    integrate_field,
    modulate,
    read_obstacle_stream,
    tube_radius,
    write_obstacle_stream,
)

__version__ = "0.1.0"

__all__ = [
    "MonomialBasis",
    "Polynomial",
    "PolyMap",
    "PolyTrajectory",
    "UniPoly",
    "UniPolyMatrix",
    "compose",
    "compose_scaled",
    "fit_trajectory",
    "integrate",
    "Demonstration",
    "read_trajectory_csv",
    "write_trajectory_csv",
    "ContractionSpec",
    "FitDiagnostics",
    "FitOptions",
    "LearnerError",
    "MetricField",
    "VectorFieldModel",
    "contraction_residual_batch",
    "fit",
    "fit_unconstrained",
    "BenchmarkConfig",
    "BenchmarkReport",
    "dtw",
    "goal_metrics",
    "grid_metrics",
    "run_benchmark",
    "split_demos",
    "trajectory_error",
    "velocity_error",
    "ModulatedField",
    "ObstacleField",
    "SequentialField",
    "SimTrajectory",
    "TubeEstimate",
    "calibrate_alpha",
    "compose_sequential",
    "contraction_residual",
    "integrate_field",
    "modulate",
    "read_obstacle_stream",
    "tube_radius",
    "write_obstacle_stream",
    "__version__",
]
