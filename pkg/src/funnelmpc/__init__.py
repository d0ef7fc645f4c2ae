"""Learning-based robust funnel MPC: simulation library and command-line tools."""

__version__ = "0.1.0"

from .core import (DataLog, FunnelSpec, ReferenceSignal, RunConfig, SignalSample,
                   constant_reference, cosine_reference, funnel_value, in_funnel)
from .fc import ActivationFn, FunnelViolation, fc_rd1, fc_rd2
from .fmpc import OcpProblem, OcpSolution, StageCostParams, adaptive_funnel, solve_ocp, stage_cost

__all__ = [
    "__version__", "DataLog", "FunnelSpec", "ReferenceSignal", "RunConfig", "SignalSample",
    "constant_reference", "cosine_reference", "funnel_value", "in_funnel", "ActivationFn",
    "FunnelViolation", "fc_rd1", "fc_rd2", "OcpProblem", "OcpSolution", "StageCostParams",
    "adaptive_funnel", "solve_ocp", "stage_cost",
]
