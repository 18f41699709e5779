"""Sparse delay-Doppler-angle channel estimation for massive MIMO-OTFS."""

from .baselines import GreedyResult, OmpConfig, omp, somp3d
from .channel import (
    Path,
    PathSet,
    apply_channel,
    dda_channel,
    flatten_dda,
    sample_paths,
    unflatten_dda,
)
from .harness import (
    EstimatorSpec,
    ExperimentSpec,
    TrialResult,
    export_support_map,
    run_ber,
    run_experiment,
)
from .jspl import JsplConfig, JsplResult, JsplState, SupportSet, run_jspl
from .measurement import (
    DdaOperator,
    DenseOperator,
    MeasurementModel,
    PilotPattern,
    build_operator,
    make_pilot_pattern,
    observe,
)
from .otfs import OtfsConfig, isfft, otfs_demodulate, otfs_modulate, sfft

__version__ = "0.1.0"

__all__ = [
    "DdaOperator",
    "DenseOperator",
    "EstimatorSpec",
    "ExperimentSpec",
    "GreedyResult",
    "JsplConfig",
    "JsplResult",
    "JsplState",
    "MeasurementModel",
    "OmpConfig",
    "OtfsConfig",
    "Path",
    "PathSet",
    "PilotPattern",
    "SupportSet",
    "TrialResult",
    "apply_channel",
    "build_operator",
    "dda_channel",
    "export_support_map",
    "flatten_dda",
    "isfft",
    "make_pilot_pattern",
    "observe",
    "omp",
    "otfs_demodulate",
    "otfs_modulate",
    "run_ber",
    "run_experiment",
    "run_jspl",
    "sample_paths",
    "sfft",
    "somp3d",
    "unflatten_dda",
]
