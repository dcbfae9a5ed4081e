"""Consensus-block augmented-Lagrangian solver for box-bounded linear programs."""

from consensus_lp.model import (
    PartitionPlan,
    ProblemSpec,
    SlackBounds,
    dump_problem,
    generate_instance,
    parse_problem,
    partition,
    slack_upper_bounds,
)
from consensus_lp.engine import SolverConfig
from consensus_lp.runtime import SolveReport, run

__all__ = [
    "PartitionPlan",
    "ProblemSpec",
    "SlackBounds",
    "SolveReport",
    "SolverConfig",
    "dump_problem",
    "generate_instance",
    "parse_problem",
    "partition",
    "run",
    "slack_upper_bounds",
]

__version__ = "0.1.0"
