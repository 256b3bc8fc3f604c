"""Policy-enforced federated learning.

Data and models travel as data-policy pairs; every command first advances the
pair's policy by its derivative and is refused when the policy forbids it.
"""

from polifed.accountant import BudgetExceeded, PrivacyLedger, enforce_dp_budget, rdp_subsampled_gaussian
from polifed.coordinator import Coordinator, CoordinatorServer, InProcessNode, sample_participants
from polifed.edge import EdgeNode
from polifed.fl import DpConfig, ModelParams, TrainConfig, accumulate, average, clip_update, train_local
from polifed.policy import (
    CommandInvocation,
    Policy,
    PolicySyntaxError,
    accepts_trace,
    derive,
    emptiness,
    expand_macros,
    parse_policy,
    reduce,
)
from polifed.runtime import DataPolicyPair, PolicyViolation, RestrictedProgram, Step, run_program
from polifed.scenario import GroupConfig, ScenarioConfig, simulate

__version__ = "0.1.0"

__all__ = [
    "BudgetExceeded",
    "CommandInvocation",
    "Coordinator",
    "CoordinatorServer",
    "DataPolicyPair",
    "DpConfig",
    "EdgeNode",
    "GroupConfig",
    "InProcessNode",
    "ModelParams",
    "Policy",
    "PolicySyntaxError",
    "PolicyViolation",
    "PrivacyLedger",
    "RestrictedProgram",
    "ScenarioConfig",
    "Step",
    "TrainConfig",
    "accepts_trace",
    "accumulate",
    "average",
    "clip_update",
    "derive",
    "emptiness",
    "enforce_dp_budget",
    "expand_macros",
    "parse_policy",
    "rdp_subsampled_gaussian",
    "reduce",
    "run_program",
    "sample_participants",
    "simulate",
    "train_local",
]
