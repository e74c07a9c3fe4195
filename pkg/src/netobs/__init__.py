"""Distributed observer synthesis and simulation for networked LTI plants.

A network of nodes, each holding a partial measurement of a shared
discrete-time linear plant, runs local observers that exchange one state
estimate per neighbor per step. This package checks the structural
assumptions such a design rests on, synthesizes the consensus weights,
output-injection gains, and coupling blocks by an iterative
cone-complementarity method, and validates the result in exact-arithmetic
simulation.
"""

from .analysis import (
    ConnectivityReport,
    DetectabilityReport,
    connectivity_report,
    is_detectable,
    marginal_joint_detectability,
)
from .blocks import GainSet, assemble, load_gains, save_gains
from .model import (
    LtiSystem,
    Problem,
    ProblemFormatError,
    SensorGraph,
    load_problem,
    save_problem,
)
from .simulate import SimConfig, Trajectory, export_csv, lyapunov_trace, run, step
from .synthesis import (
    SynthesisOptions,
    SynthesisState,
    certify_lemma_properties,
    inner_infimum_oracle,
    nmi_check,
    synthesize,
)
from .trilemma import RepairCandidate, explore

__version__ = "0.1.0"

__all__ = [
    "ConnectivityReport",
    "DetectabilityReport",
    "GainSet",
    "LtiSystem",
    "Problem",
    "ProblemFormatError",
    "RepairCandidate",
    "SensorGraph",
    "SimConfig",
    "SynthesisOptions",
    "SynthesisState",
    "Trajectory",
    "assemble",
    "certify_lemma_properties",
    "connectivity_report",
    "explore",
    "export_csv",
    "inner_infimum_oracle",
    "is_detectable",
    "load_gains",
    "load_problem",
    "lyapunov_trace",
    "marginal_joint_detectability",
    "nmi_check",
    "run",
    "save_gains",
    "save_problem",
    "step",
    "synthesize",
    "__version__",
]
