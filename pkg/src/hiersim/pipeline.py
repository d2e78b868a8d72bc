"""Stage, kernelize and simulate a circuit in one call."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .circuit import Circuit, attach_single_qubit_gates
from .executor import ShardLayout, SimulationResult, simulate
from .kernelizer import CostModel, KernelPlan, greedy_fusion_baseline, kernelize, ordered_kernelize
from .staging import DEFAULT_BUDGET_NODES, DEFAULT_MAX_STAGES, MachineShape, StagingPlan, stage

KERNELIZERS: dict[str, Callable[..., KernelPlan]] = {
    "dp": lambda seq, model, prune: kernelize(seq, model, prune),
    "ordered": lambda seq, model, prune: ordered_kernelize(seq, model),
    "greedy": lambda seq, model, prune: greedy_fusion_baseline(seq, model),
}


@dataclass
class PipelineResult:
    circuit: Circuit            # after single-qubit attachment
    staging: StagingPlan
    kernel_plans: list[KernelPlan]
    result: SimulationResult

    @property
    def kernel_cost(self) -> float:
        return sum(p.total_cost for p in self.kernel_plans)


def run_pipeline(circuit: Circuit, shape: MachineShape, *, model: CostModel | None = None,
                 kernelizer: str = "dp", prune_T: float = 500,
                 state: np.ndarray | str = "zero", s_max: int = DEFAULT_MAX_STAGES,
                 budget_nodes: int = DEFAULT_BUDGET_NODES, workers: int = 1) -> PipelineResult:
    """Attach single-qubit gates, stage, kernelize every stage and simulate.

    ``kernelizer`` is one of ``"dp"``, ``"ordered"`` or ``"greedy"``.
    """
    if kernelizer not in KERNELIZERS:
        raise ValueError(f"unknown kernelizer {kernelizer!r}")
    model = model or CostModel.default()
    circ = attach_single_qubit_gates(circuit) if any(g.kind.arity > 1 for g in circuit.gates) \
        else circuit
    plan = stage(circ, shape, s_max, budget_nodes)
    kps = [KERNELIZERS[kernelizer](circ.subcircuit(st.gate_ids), model, prune_T)
           for st in plan.stages]
    res = simulate(circ, plan, kps, ShardLayout(shape.L, shape.R, shape.G), state, model,
                   workers)
    return PipelineResult(circ, plan, kps, res)
