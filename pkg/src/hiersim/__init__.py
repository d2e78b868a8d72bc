"""Hierarchical state-vector simulation planner: staging, kernelization, execution."""

from .circuit import Circuit, Gate, GateKind, attach_single_qubit_gates, generate, parse_qasm
from .kernelizer import CostModel, KernelPlan, kernelize, ordered_kernelize
from .pipeline import PipelineResult, run_pipeline
from .reference import compare, simulate_reference
from .staging import MachineShape, StagingPlan, greedy_stage, stage

__version__ = "0.1.0"
