"""Command-line front end: stage, kernelize, simulate, bench.

Exit codes: 0 ok, 2 usage or input error, 3 infeasible / no plan,
4 verification failure, 5 budget exceeded.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .circuit import (FAMILIES, Circuit, CircuitError, NoHostWarning,
                      attach_single_qubit_gates, generate, parse_qasm)
from .executor import PlanViolation, ShardLayout, read_state, simulate, write_state
from .kernelizer import (CostModel, KernelBudgetExceeded, KernelPlan, NoFeasibleSegmentation,
                         greedy_fusion_baseline, kernelize, ordered_kernelize)
from .reference import compare, random_state, simulate_reference
from .staging import (DEFAULT_BUDGET_NODES, DEFAULT_COMM_FACTOR, DEFAULT_MAX_STAGES,
                      BudgetExceeded, InfeasibleShape, MachineShape, NoPlanWithinLimit,
                      StagingPlan, greedy_stage, stage, staging_cost)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_VERIFY, EXIT_BUDGET = 0, 2, 3, 4, 5
DEFAULT_PRUNE = 500
VERIFY_TOL = 1e-9

BENCH_COLUMNS = ["circuit", "n", "L", "R", "G", "gates", "stages", "staging_cost",
                 "greedy_stages", "greedy_staging_cost", "kernel_cost_dp",
                 "kernel_cost_ordered", "kernel_cost_greedy", "intra_node_amplitudes_moved",
                 "inter_node_amplitudes_moved", "local_swaps", "global_swaps",
                 "max_abs_diff", "wall_time_s"]


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    input: str | None = None
    gen: str | None = None
    local: int | None = None
    regional: int = 0
    global_: int = 0
    comm_factor: float = DEFAULT_COMM_FACTOR
    max_stages: int = DEFAULT_MAX_STAGES
    prune: float = DEFAULT_PRUNE
    cost_model: str | None = None
    budget_nodes: int = DEFAULT_BUDGET_NODES
    out: str = "out"
    seed: int = 0
    verify: bool = False

    def validate(self, need_circuit: bool = True) -> None:
        if need_circuit and (self.input is None) == (self.gen is None):
            raise UsageError("give exactly one of --input or --gen")
        if self.regional < 0 or self.global_ < 0:
            raise UsageError("--regional and --global must be nonnegative")
        if self.local is not None and self.local < 1:
            raise UsageError("--local must be at least 1")
        if self.max_stages < 1:
            raise UsageError("--max-stages must be at least 1")
        if self.prune < 2:
            raise UsageError("--prune must be at least 2 or 'inf'")
        if self.comm_factor < 1:
            raise UsageError("--comm-factor must be at least 1")
        if self.budget_nodes < 1:
            raise UsageError("--budget-nodes must be positive")

    def load_circuit(self) -> Circuit:
        if self.gen is not None:
            fam, _, num = self.gen.partition(":")
            if fam not in FAMILIES or not num.isdigit():
                raise UsageError(f"--gen expects family:n with family in {FAMILIES}")
            return generate(fam, int(num))
        return parse_qasm(Path(self.input).read_text())

    def shape_for(self, n: int) -> MachineShape:
        L = self.local if self.local is not None else n - self.regional - self.global_
        if L < 1 or L + self.regional + self.global_ != n:
            raise UsageError(f"L={L}, R={self.regional}, G={self.global_} do not sum to n={n}")
        return MachineShape(L, self.regional, self.global_, self.comm_factor)

    def model(self) -> CostModel:
        if self.cost_model is None:
            return CostModel.default()
        return CostModel.load(self.cost_model)


def _prune_value(text: str) -> float:
    if text.lower() in ("inf", "infinity", "none"):
        return float("inf")
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--prune expects an integer or 'inf', got {text!r}")


def _common(p: argparse.ArgumentParser, circuit: bool = True) -> None:
    if circuit:
        p.add_argument("--input", help="OpenQASM 2.0 file")
        p.add_argument("--gen", help="built-in circuit, family:n (ghz, qft, graphstate_ring)")
    p.add_argument("--local", type=int, help="local qubit count L (default n-R-G)")
    p.add_argument("--regional", type=int, default=0)
    p.add_argument("--global", dest="global_", type=int, default=0)
    p.add_argument("--comm-factor", type=float, default=DEFAULT_COMM_FACTOR)
    p.add_argument("--max-stages", type=int, default=DEFAULT_MAX_STAGES)
    p.add_argument("--prune", type=_prune_value, default=DEFAULT_PRUNE)
    p.add_argument("--cost-model", help="cost model JSON (default: shipped model)")
    p.add_argument("--budget-nodes", type=int, default=DEFAULT_BUDGET_NODES)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verify", action="store_true", help="compare against the dense oracle")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiersim", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    _common(sub.add_parser("stage", help="partition the circuit into stages"))
    p = sub.add_parser("kernelize", help="stage, then kernelize every stage")
    _common(p)
    p.add_argument("--staging", help="reuse a staging plan JSON instead of solving")
    p = sub.add_parser("simulate", help="stage, kernelize and execute")
    _common(p)
    p.add_argument("--staging", help="reuse a staging plan JSON")
    p.add_argument("--state", default="zero", help="zero, random, or a state file")
    p = sub.add_parser("bench", help="run the pipeline over circuit families")
    _common(p, circuit=False)
    p.add_argument("--families", default="ghz,qft,graphstate_ring")
    p.add_argument("--sizes", default="6,8,10,12,14", help="comma list or a-b range")
    return ap


def _config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(input=getattr(args, "input", None), gen=getattr(args, "gen", None),
                     local=args.local, regional=args.regional, global_=args.global_,
                     comm_factor=args.comm_factor, max_stages=args.max_stages,
                     prune=args.prune, cost_model=args.cost_model,
                     budget_nodes=args.budget_nodes, out=args.out, seed=args.seed,
                     verify=args.verify)


def _prepare(cfg: RunConfig) -> tuple[Circuit, Circuit, MachineShape]:
    raw = cfg.load_circuit()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoHostWarning)
        circ = attach_single_qubit_gates(raw)
    return raw, circ, cfg.shape_for(raw.num_qubits)


def _kernel_plans(circ: Circuit, plan: StagingPlan, model: CostModel, prune: float
                  ) -> list[KernelPlan]:
    return [kernelize(circ.subcircuit(st.gate_ids), model, prune) for st in plan.stages]


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2) + "\n")


def cmd_stage(cfg: RunConfig) -> int:
    _raw, circ, shape = _prepare(cfg)
    plan = stage(circ, shape, cfg.max_stages, cfg.budget_nodes)
    out = Path(cfg.out)
    _write_json(out / "staging.json", plan.to_json())
    print(f"stages={plan.num_stages} cost={plan.total_cost:g}")
    return EXIT_OK


def _load_or_stage(cfg: RunConfig, circ: Circuit, shape: MachineShape,
                   staging_path: str | None) -> StagingPlan:
    if staging_path:
        return StagingPlan.from_json(json.loads(Path(staging_path).read_text()))
    return stage(circ, shape, cfg.max_stages, cfg.budget_nodes)


def cmd_kernelize(cfg: RunConfig, staging_path: str | None = None) -> int:
    model = cfg.model()
    _raw, circ, shape = _prepare(cfg)
    plan = _load_or_stage(cfg, circ, shape, staging_path)
    kps = _kernel_plans(circ, plan, model, cfg.prune)
    out = Path(cfg.out)
    _write_json(out / "staging.json", plan.to_json())
    for k, kp in enumerate(kps):
        _write_json(out / f"kernels_stage{k}.json", kp.to_json())
    total = sum(kp.total_cost for kp in kps)
    print(f"stages={plan.num_stages} kernels={sum(len(kp.kernels) for kp in kps)} "
          f"kernel_cost={total:.6g}")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, staging_path: str | None = None, state: str = "zero") -> int:
    model = cfg.model()
    raw, circ, shape = _prepare(cfg)
    n = raw.num_qubits
    plan = _load_or_stage(cfg, circ, shape, staging_path)
    kps = _kernel_plans(circ, plan, model, cfg.prune)
    if state == "zero":
        psi = np.zeros(1 << n, dtype=complex)
        psi[0] = 1.0
    elif state == "random":
        psi = random_state(n, np.random.default_rng(cfg.seed))
    else:
        psi, _ = read_state(state)
    res = simulate(circ, plan, kps, ShardLayout(shape.L, shape.R, shape.G), psi, model)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_state(out / "state.bin", res.state)
    _write_json(out / "comm.json", res.comm.to_json())
    (out / "comm.csv").write_text(res.comm.to_csv())
    c = res.comm
    print(f"stages={plan.num_stages} intra={c.intra_node_amplitudes_moved} "
          f"inter={c.inter_node_amplitudes_moved} local_swaps={c.local_swaps} "
          f"global_swaps={c.global_swaps}")
    if cfg.verify:
        rep = compare(res.state, simulate_reference(raw, psi))
        print(f"max_abs_diff={rep.max_abs_diff:.3e}")
        if not rep.max_abs_diff < VERIFY_TOL:
            print("verification failed", file=sys.stderr)
            return EXIT_VERIFY
    return EXIT_OK


def _sizes(text: str) -> list[int]:
    if "-" in text:
        a, b = text.split("-", 1)
        return list(range(int(a), int(b) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def bench_row(family: str, n: int, cfg: RunConfig, model: CostModel, verify: bool) -> dict:
    t0 = time.perf_counter()
    raw = generate(family, n)
    circ = attach_single_qubit_gates(raw)
    shape = cfg.shape_for(n)
    plan = stage(circ, shape, cfg.max_stages, cfg.budget_nodes)
    greedy = greedy_stage(circ, shape)
    subs = [circ.subcircuit(st.gate_ids) for st in plan.stages]
    kps = [kernelize(s, model, cfg.prune) for s in subs]
    ordered = sum(ordered_kernelize(s, model).total_cost for s in subs)
    greedy_k = sum(greedy_fusion_baseline(s, model).total_cost for s in subs)
    res = simulate(circ, plan, kps, ShardLayout(shape.L, shape.R, shape.G), "zero", model)
    diff = compare(res.state, simulate_reference(raw)).max_abs_diff if verify else ""
    c = res.comm
    return {"circuit": family, "n": n, "L": shape.L, "R": shape.R, "G": shape.G,
            "gates": len(raw), "stages": plan.num_stages, "staging_cost": plan.total_cost,
            "greedy_stages": greedy.num_stages, "greedy_staging_cost": staging_cost(greedy),
            "kernel_cost_dp": round(sum(kp.total_cost for kp in kps), 9),
            "kernel_cost_ordered": round(ordered, 9), "kernel_cost_greedy": round(greedy_k, 9),
            "intra_node_amplitudes_moved": c.intra_node_amplitudes_moved,
            "inter_node_amplitudes_moved": c.inter_node_amplitudes_moved,
            "local_swaps": c.local_swaps, "global_swaps": c.global_swaps,
            "max_abs_diff": diff, "wall_time_s": round(time.perf_counter() - t0, 4)}


def cmd_bench(cfg: RunConfig, families: str, sizes: str) -> int:
    fams = [f for f in families.split(",") if f.strip()]
    if not fams:
        raise UsageError("--families is empty")
    bad = [f for f in fams if f not in FAMILIES]
    if bad:
        raise UsageError(f"unknown families {bad}")
    ns = _sizes(sizes)
    if not ns:
        raise UsageError("--sizes is empty")
    model = cfg.model()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [bench_row(f, n, cfg, model, cfg.verify) for f in fams for n in ns]
    path = out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    sys.stdout.write(path.read_text())
    if cfg.verify and any(r["max_abs_diff"] != "" and r["max_abs_diff"] >= VERIFY_TOL
                          for r in rows):
        return EXIT_VERIFY
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    cfg = _config(args)
    try:
        cfg.validate(need_circuit=args.command != "bench")
        if args.command == "stage":
            return cmd_stage(cfg)
        if args.command == "kernelize":
            return cmd_kernelize(cfg, args.staging)
        if args.command == "simulate":
            return cmd_simulate(cfg, args.staging, args.state)
        return cmd_bench(cfg, args.families, args.sizes)
    except (UsageError, CircuitError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoPlanWithinLimit, InfeasibleShape, NoFeasibleSegmentation) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PlanViolation as exc:
        print(f"plan verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (BudgetExceeded, KernelBudgetExceeded) as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
