"""Circuit staging: split a circuit into stages with local/regional/global qubit partitions.

The exact planner builds a binary program over five variable families

* ``A[q,k]`` qubit q is local in stage k
* ``B[q,k]`` qubit q is global in stage k
* ``F[g,k]`` gate g has finished by the end of stage k
* ``S[q,k]``, ``T[q,k]`` qubit q becomes local / global when moving from stage k to k+1

and solves it with a built-in depth-first branch-and-bound.  Stage counts are
tried in increasing order; the first feasible count is returned together with a
minimum-cost partition sequence.
"""

from __future__ import annotations

import itertools
import json
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .circuit import Circuit, dependencies, non_insular_set

DEFAULT_COMM_FACTOR = 3.0
DEFAULT_MAX_STAGES = 16
DEFAULT_BUDGET_NODES = 10_000_000


class StagingError(Exception):
    pass


class InfeasibleShape(StagingError):
    pass


class NoPlanWithinLimit(StagingError):
    pass


class BudgetExceeded(StagingError):
    def __init__(self, message: str, incumbent: "StagingPlan | None" = None):
        super().__init__(message)
        self.incumbent = incumbent


class Stuck(InfeasibleShape):
    pass


@dataclass(frozen=True)
class MachineShape:
    """Qubit counts per class and the relative cost of inter-node traffic."""

    L: int
    R: int
    G: int
    c: float = DEFAULT_COMM_FACTOR

    def __post_init__(self):
        if self.L < 1 or self.R < 0 or self.G < 0:
            raise ValueError(f"invalid shape L={self.L} R={self.R} G={self.G}")
        if self.c < 1:
            raise ValueError(f"communication factor must be >= 1, got {self.c}")

    @property
    def n(self) -> int:
        return self.L + self.R + self.G

    def check(self, circuit: Circuit) -> None:
        if self.n != circuit.num_qubits:
            raise ValueError(f"shape covers {self.n} qubits but circuit has {circuit.num_qubits}")

    def to_dict(self) -> dict:
        return {"L": self.L, "R": self.R, "G": self.G, "c": self.c}


def _mask(qs: Iterable[int]) -> int:
    m = 0
    for q in qs:
        m |= 1 << q
    return m


def _bits(mask: int) -> list[int]:
    out, q = [], 0
    while mask:
        if mask & 1:
            out.append(q)
        mask >>= 1
        q += 1
    return out


def _popcount(x: int) -> int:
    return bin(x).count("1")


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class Constraint:
    template: str
    name: str
    coeffs: tuple[tuple[str, int], ...]
    sense: str  # "<=", ">=", "="
    rhs: int

    def holds(self, values: dict[str, int]) -> bool:
        lhs = sum(c * values[v] for v, c in self.coeffs)
        if self.sense == "<=":
            return lhs <= self.rhs
        if self.sense == ">=":
            return lhs >= self.rhs
        return lhs == self.rhs


@dataclass
class IlpModel:
    s: int
    shape: MachineShape
    n: int
    gate_ids: tuple[int, ...]
    nonins: tuple[int, ...]          # per gate position: mask of non-insular qubits
    edges: tuple[tuple[int, int], ...]  # dependency edges as gate positions
    variables: list[str]
    constraints: list[Constraint]
    objective: dict[str, float]

    @property
    def m(self) -> int:
        return len(self.gate_ids)

    def family_counts(self) -> dict[str, int]:
        out = {f: 0 for f in "ABFST"}
        for v in self.variables:
            out[v[0]] += 1
        return out

    def violations(self, values: dict[str, int]) -> list[str]:
        bad = [v for v in self.variables if values.get(v) not in (0, 1)]
        bad += [c.name for c in self.constraints if not c.holds(values)]
        return bad

    def objective_value(self, values: dict[str, int]) -> float:
        return sum(c * values[v] for v, c in self.objective.items())


def _var(f: str, i: int, k: int) -> str:
    return f"{f}_{i}_{k}"


def build_ilp(circuit: Circuit, shape: MachineShape, s: int) -> IlpModel:
    """Binary program for staging ``circuit`` into exactly ``s`` stages."""
    shape.check(circuit)
    if s < 1:
        raise ValueError("stage count must be >= 1")
    n, L, G = circuit.num_qubits, shape.L, shape.G
    pos = {g.id: i for i, g in enumerate(circuit.gates)}
    nonins = []
    for g in circuit.gates:
        ni = non_insular_set(g)
        if len(ni) > L:
            raise InfeasibleShape(f"gate {g.id} has {len(ni)} non-insular qubits but L={L}")
        nonins.append(_mask(ni))
    edges = tuple(sorted((pos[a], pos[b]) for a, b in dependencies(circuit)))
    m = len(circuit.gates)

    variables = [_var("A", q, k) for q in range(n) for k in range(s)]
    variables += [_var("B", q, k) for q in range(n) for k in range(s)]
    variables += [_var("F", g, k) for g in range(m) for k in range(s)]
    variables += [_var("S", q, k) for q in range(n) for k in range(s - 1)]
    variables += [_var("T", q, k) for q in range(n) for k in range(s - 1)]
    cons: list[Constraint] = []

    def add(template, name, coeffs, sense, rhs):
        cons.append(Constraint(template, name, tuple(coeffs), sense, rhs))

    for q in range(n):
        for k in range(s - 1):
            add("c1", f"c1_{q}_{k}", [(_var("A", q, k + 1), 1), (_var("A", q, k), -1),
                                      (_var("S", q, k), -1)], "<=", 0)
            add("cdeft", f"cdeft_{q}_{k}", [(_var("B", q, k + 1), 1), (_var("B", q, k), -1),
                                            (_var("T", q, k), -1)], "<=", 0)
    for g in range(m):
        for k in range(s - 1):
            add("c2", f"c2_{g}_{k}", [(_var("F", g, k), 1), (_var("F", g, k + 1), -1)], "<=", 0)
        for q in _bits(nonins[g]):
            for k in range(s):
                co = [(_var("F", g, k), 1), (_var("A", q, k), -1)]
                if k > 0:
                    co.append((_var("F", g, k - 1), -1))
                add("c3", f"c3_{g}_{q}_{k}", co, "<=", 0)
        add("c5", f"c5_{g}", [(_var("F", g, s - 1), 1)], "=", 1)
    for a, b in edges:
        for k in range(s):
            add("c4", f"c4_{a}_{b}_{k}", [(_var("F", a, k), 1), (_var("F", b, k), -1)], ">=", 0)
    for q in range(n):
        for k in range(s):
            add("cag", f"cag_{q}_{k}", [(_var("A", q, k), 1), (_var("B", q, k), 1)], "<=", 1)
    for k in range(s):
        add("c6", f"c6_local_{k}", [(_var("A", q, k), 1) for q in range(n)], "=", L)
        add("c6", f"c6_global_{k}", [(_var("B", q, k), 1) for q in range(n)], "=", G)
    objective = {}
    for q in range(n):
        for k in range(s - 1):
            objective[_var("S", q, k)] = 1.0
            objective[_var("T", q, k)] = float(shape.c)
    return IlpModel(s, shape, n, tuple(g.id for g in circuit.gates), tuple(nonins), edges,
                    variables, cons, objective)


def to_lp(model: IlpModel) -> str:
    """CPLEX-LP text of the model for cross-checking with an external solver."""

    def term(coef, v):
        sign = "+" if coef >= 0 else "-"
        c = abs(coef)
        return f"{sign} {v}" if c == 1 else f"{sign} {c:g} {v}"

    lines = ["\\ staging model, s = %d" % model.s, "Minimize"]
    obj = " ".join(term(c, v) for v, c in model.objective.items()) or "0 A_0_0"
    lines.append(f" obj: {obj}")
    lines.append("Subject To")
    for c in model.constraints:
        lhs = " ".join(term(co, v) for v, co in c.coeffs)
        lines.append(f" {c.name}: {lhs} {c.sense} {c.rhs}")
    lines.append("Binaries")
    for i in range(0, len(model.variables), 10):
        lines.append(" " + " ".join(model.variables[i:i + 10]))
    lines.append("End")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# branch and bound


class SolveStatus(Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"
    BUDGET_EXCEEDED = "budget_exceeded"


@dataclass
class SolveResult:
    status: SolveStatus
    objective: float | None = None
    values: dict[str, int] | None = None
    nodes: int = 0
    seconds: float = 0.0
    local: list[int] | None = None    # per stage: mask of local qubits
    glob: list[int] | None = None     # per stage: mask of global qubits
    finish: list[int] | None = None   # per gate position: first stage with F = 1


class _OutOfBudget(Exception):
    pass


class _Solver:
    """Depth-first branch-and-bound that fixes one stage at a time.

    Branching is on the local set ``A[., k]``.  The remaining families follow
    by propagation:

    * ``F`` carries no objective weight and finishing a gate earlier only
      relaxes later stages, so each stage finishes the maximal dependency-closed
      set of gates whose non-insular qubits are local.
    * ``B`` is changed lazily: global qubits that stay non-local are kept and only
      those displaced by the new local set are replaced, enumerating every
      choice of replacements.  Any plan can be made lazy without raising its cost.
    * ``S``/``T`` are the set differences between consecutive stages.

    A stage that finishes nothing new is only allowed as a copy of its
    predecessor (zero cost), which covers every such plan up to cost.  A
    transposition table keyed on (stage, A, B, finished gates) prunes revisits,
    and a memoized look-ahead drops states that cannot finish in time.
    """

    def __init__(self, model: IlpModel, budget: int):
        self.mod = model
        self.n, self.m, self.s = model.n, model.m, model.s
        self.L, self.G, self.c = model.shape.L, model.shape.G, model.shape.c
        self.N = list(model.nonins)
        self.pred = [0] * self.m
        for a, b in model.edges:
            if a >= b:
                raise StagingError("dependency edges must point forward in gate order")
            self.pred[b] |= 1 << a
        self.full = (1 << self.n) - 1
        self.all_gates = (1 << self.m) - 1
        self.budget = budget
        self.nodes = 0
        self.best = math.inf
        self.best_sol = None
        self.cands = [_mask(c) for c in itertools.combinations(range(self.n), self.L)]
        self._closure_memo: dict[tuple[int, int], int] = {}
        self._finish_memo: dict[tuple[int, int], bool] = {}
        self._seen: dict[tuple[int, int, int, int], float] = {}

    def _tick(self):
        self.nodes += 1
        if self.nodes > self.budget:
            raise _OutOfBudget

    def _closure(self, done: int, local: int) -> int:
        key = (done, local)
        hit = self._closure_memo.get(key)
        if hit is not None:
            return hit
        d = done
        pending = self.all_gates & ~done
        while pending:
            low = pending & -pending
            g = low.bit_length() - 1
            pending ^= low
            if self.pred[g] & ~d == 0 and self.N[g] & ~local == 0:
                d |= low
        self._closure_memo[key] = d
        return d

    def _need(self, done: int) -> int:
        u = 0
        rest = self.all_gates & ~done
        while rest:
            low = rest & -rest
            u |= self.N[low.bit_length() - 1]
            rest ^= low
        return u

    def _can_finish(self, done: int, stages: int) -> bool:
        if done == self.all_gates:
            return True
        if stages <= 0:
            return False
        if _popcount(self._need(done)) <= self.L:
            return True
        if stages == 1:
            return False
        key = (done, stages)
        hit = self._finish_memo.get(key)
        if hit is not None:
            return hit
        ok = False
        for a in self.cands:
            nd = self._closure(done, a)
            if nd != done and self._can_finish(nd, stages - 1):
                ok = True
                break
        self._finish_memo[key] = ok
        return ok

    def _glob_choices(self, k: int, local: int, prev_glob: int):
        if k == 0:
            free = [q for q in range(self.n) if not (local >> q) & 1]
            for cmb in itertools.combinations(free, self.G):
                yield _mask(cmb), 0
            return
        keep = prev_glob & ~local
        short = self.G - _popcount(keep)
        free = [q for q in range(self.n) if not ((local | keep) >> q) & 1]
        for cmb in itertools.combinations(free, short):
            yield keep | _mask(cmb), short

    def run(self):
        if self.m == 0:
            a = self.cands[0]
            b = _mask([q for q in range(self.n) if not (a >> q) & 1][: self.G])
            self.best = 0.0
            self.best_sol = ([0] * self.s, [a] * self.s, [b] * self.s)
            return
        self._dfs(0, 0, 0, 0, 0.0, [], [], [])

    def _order(self, k: int, prev_local: int, done: int) -> list[tuple[int, int, int]]:
        """Candidate (added locals, local mask, finished) triples, cheapest first."""
        out = []
        for a in self.cands:
            nd = self._closure(done, a)
            if nd == done:
                continue
            add = _popcount(a & ~prev_local) if k else 0
            out.append((add, -_popcount(nd), a, nd))
        out.sort()
        return [(add, a, nd) for add, _, a, nd in out]

    def _dfs(self, k, prev_local, prev_glob, done, cost, dones, locals_, globs):
        self._tick()
        if cost >= self.best:
            return
        if done == self.all_gates and k > 0:
            # pad with copies of the last stage
            pad = self.s - k
            self.best = cost
            self.best_sol = (dones + [done] * pad, locals_ + [prev_local] * pad,
                             globs + [prev_glob] * pad)
            return
        if k == self.s or not self._can_finish(done, self.s - k):
            return
        for add, a, nd in self._order(k, prev_local, done):
            ca = cost + add
            if ca >= self.best:
                break
            if not self._can_finish(nd, self.s - k - 1):
                continue
            for b, extra in self._glob_choices(k, a, prev_glob):
                total = ca + self.c * extra
                if total >= self.best:
                    continue
                # qubits still needed must each enter the local set, and those now
                # global must each be replaced by a newly global qubit
                need = self._need(nd)
                if total + _popcount(need & ~a) + self.c * _popcount(need & b) >= self.best:
                    continue
                key = (k, a, b, nd)
                if self._seen.get(key, math.inf) <= total:
                    continue
                self._seen[key] = total
                self._dfs(k + 1, a, b, nd, total, dones + [nd], locals_ + [a], globs + [b])


def _values_from(model: IlpModel, done, locals_, globs) -> dict[str, int]:
    vals: dict[str, int] = {}
    n, m, s = model.n, model.m, model.s
    for k in range(s):
        for q in range(n):
            vals[_var("A", q, k)] = (locals_[k] >> q) & 1
            vals[_var("B", q, k)] = (globs[k] >> q) & 1
        for g in range(m):
            vals[_var("F", g, k)] = (done[k] >> g) & 1
    for k in range(s - 1):
        for q in range(n):
            vals[_var("S", q, k)] = int(vals[_var("A", q, k + 1)] > vals[_var("A", q, k)])
            vals[_var("T", q, k)] = int(vals[_var("B", q, k + 1)] > vals[_var("B", q, k)])
    return vals


def solve_ilp(model: IlpModel, budget_nodes: int = DEFAULT_BUDGET_NODES) -> SolveResult:
    """Exact minimization of the staging model by branch-and-bound."""
    t0 = time.perf_counter()
    solver = _Solver(model, budget_nodes)
    status = SolveStatus.INFEASIBLE
    try:
        solver.run()
        if solver.best_sol is not None:
            status = SolveStatus.FEASIBLE
    except _OutOfBudget:
        status = SolveStatus.BUDGET_EXCEEDED
    res = SolveResult(status, nodes=solver.nodes, seconds=time.perf_counter() - t0)
    if solver.best_sol is not None:
        done, locals_, globs = solver.best_sol
        res.objective = solver.best
        res.values = _values_from(model, done, locals_, globs)
        res.local, res.glob = locals_, globs
        finish = []
        for g in range(model.m):
            finish.append(min(k for k in range(model.s) if (done[k] >> g) & 1))
        res.finish = finish
    return res


# ---------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class Stage:
    gate_ids: tuple[int, ...]
    local: tuple[int, ...]
    regional: tuple[int, ...]
    global_: tuple[int, ...]


@dataclass
class StagingPlan:
    stages: list[Stage]
    total_cost: float
    shape: MachineShape
    solver_stats: dict = field(default_factory=dict)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def to_json(self) -> dict:
        cost = self.total_cost
        if float(cost).is_integer():
            cost = int(cost)
        return {
            "stages": [{"gates": list(st.gate_ids), "local": list(st.local),
                        "regional": list(st.regional), "global": list(st.global_)}
                       for st in self.stages],
            "cost": cost,
            "shape": self.shape.to_dict(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "StagingPlan":
        sh = data["shape"]
        shape = MachineShape(sh["L"], sh["R"], sh["G"], sh.get("c", DEFAULT_COMM_FACTOR))
        stages = [Stage(tuple(s["gates"]), tuple(s["local"]), tuple(s["regional"]),
                        tuple(s["global"])) for s in data["stages"]]
        return cls(stages, float(data["cost"]), shape)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _make_stage(ids, local_mask, glob_mask, n) -> Stage:
    local = tuple(_bits(local_mask))
    glob = tuple(_bits(glob_mask))
    regional = tuple(q for q in range(n) if not ((local_mask | glob_mask) >> q) & 1)
    return Stage(tuple(ids), local, regional, glob)


def staging_cost(plan: StagingPlan, shape: MachineShape | None = None) -> float:
    c = (shape or plan.shape).c
    total = 0.0
    for a, b in zip(plan.stages, plan.stages[1:]):
        total += len(set(b.local) - set(a.local)) + c * len(set(b.global_) - set(a.global_))
    return total


def stage(circuit: Circuit, shape: MachineShape, s_max: int = DEFAULT_MAX_STAGES,
          budget_nodes: int = DEFAULT_BUDGET_NODES) -> StagingPlan:
    """Fewest stages, then minimum communication cost, by solving the model for s = 1, 2, ..."""
    shape.check(circuit)
    if s_max < 1:
        raise ValueError("s_max must be >= 1")
    t0 = time.perf_counter()
    nodes = 0
    for s in range(1, s_max + 1):
        model = build_ilp(circuit, shape, s)
        res = solve_ilp(model, budget_nodes - nodes)
        nodes += res.nodes
        if res.status is SolveStatus.BUDGET_EXCEEDED:
            inc = _plan_from(circuit, shape, model, res) if res.values else None
            raise BudgetExceeded(f"node budget exhausted at s={s}", inc)
        if res.status is SolveStatus.FEASIBLE:
            plan = _plan_from(circuit, shape, model, res)
            plan.solver_stats = {"nodes": nodes, "seconds": time.perf_counter() - t0,
                                 "stages_tried": s}
            return plan
    raise NoPlanWithinLimit(f"no feasible staging with at most {s_max} stages")


def _plan_from(circuit: Circuit, shape: MachineShape, model: IlpModel,
               res: SolveResult) -> StagingPlan:
    stages = []
    for k in range(model.s):
        ids = [model.gate_ids[g] for g in range(model.m) if res.finish[g] == k]
        stages.append(_make_stage(ids, res.local[k], res.glob[k], circuit.num_qubits))
    return StagingPlan(stages, float(res.objective), shape)


def validate_staging(plan: StagingPlan, circuit: Circuit) -> list[str]:
    """Structural checks of a plan against its circuit; returns violation messages."""
    out = []
    sh = plan.shape
    seen: dict[int, int] = {}
    for k, st in enumerate(plan.stages):
        if len(st.local) != sh.L or len(st.global_) != sh.G:
            out.append(f"stage {k}: partition sizes {len(st.local)}/{len(st.global_)}")
        if sorted(st.local + st.regional + st.global_) != list(range(circuit.num_qubits)):
            out.append(f"stage {k}: partition does not cover the qubits")
        for g in st.gate_ids:
            if g in seen:
                out.append(f"gate {g} appears twice")
            seen[g] = k
    ids = set(circuit.ids)
    if set(seen) != ids:
        out.append("stages do not cover every gate")
        return out
    by_id = circuit.gate_by_id()
    for k, st in enumerate(plan.stages):
        for g in st.gate_ids:
            if not non_insular_set(by_id[g]) <= set(st.local):
                out.append(f"stage {k}: gate {g} has a non-insular qubit outside the local set")
    for a, b in dependencies(circuit):
        if seen[a] > seen[b]:
            out.append(f"dependency {a}->{b} runs backwards across stages")
    return out


# ---------------------------------------------------------------------------
# greedy baseline


def greedy_stage(circuit: Circuit, shape: MachineShape) -> StagingPlan:
    """Frontier-driven greedy staging baseline.

    Each round scores qubits by how many frontier gates are blocked on them,
    makes the top-L qubits local (ties: more remaining gates, then lower index),
    runs every gate that becomes executable, and keeps as many previous global
    qubits global as possible.
    """
    shape.check(circuit)
    n, L, G = circuit.num_qubits, shape.L, shape.G
    gates = circuit.gates
    m = len(gates)
    N = [_mask(non_insular_set(g)) for g in gates]
    for i, g in enumerate(gates):
        if _popcount(N[i]) > L:
            raise Stuck(f"gate {g.id} has more non-insular qubits than L={L}")
    pos = {g.id: i for i, g in enumerate(gates)}
    preds: list[list[int]] = [[] for _ in range(m)]
    for a, b in dependencies(circuit):
        preds[pos[b]].append(pos[a])
    qmask = [_mask(g.qubits) for g in gates]
    done = [False] * m
    local = 0
    glob_prev: int | None = None
    stages: list[Stage] = []

    def frontier():
        return [i for i in range(m) if not done[i] and all(done[p] for p in preds[i])]

    def remaining_count(q):
        return sum(1 for i in range(m) if not done[i] and (qmask[i] >> q) & 1)

    def pick(seed: int) -> int:
        score = [0] * n
        for i in frontier():
            blocked = N[i] & ~local
            if blocked:
                for q in _bits(blocked):
                    score[q] += 1
        rem = [remaining_count(q) for q in range(n)]
        order = sorted(range(n), key=lambda q: (-score[q], -rem[q], q))
        chosen = seed
        for q in order:
            if _popcount(chosen) >= L:
                break
            chosen |= 1 << q
        return chosen

    def run(loc: int) -> list[int]:
        ran = []
        progress = True
        while progress:
            progress = False
            for i in range(m):
                if not done[i] and (N[i] & ~loc) == 0 and all(done[p] for p in preds[i]):
                    done[i] = True
                    ran.append(i)
                    progress = True
        return sorted(ran)

    while not all(done):
        cand = pick(0)
        ran = run(cand)
        if not ran:
            # the top-scored set unlocks nothing; seed it with the most-blocked frontier gate
            fr = frontier()
            best = max(fr, key=lambda i: (_popcount(N[i] & ~local), -i))
            cand = pick(N[best])
            ran = run(cand)
            if not ran:
                raise Stuck("greedy staging made no progress")
        local = cand
        nonlocal_q = [q for q in range(n) if not (local >> q) & 1]
        keep = [q for q in nonlocal_q if glob_prev is not None and (glob_prev >> q) & 1]
        rem = {q: remaining_count(q) for q in nonlocal_q}
        fresh = sorted((q for q in nonlocal_q if q not in keep), key=lambda q: (rem[q], q))
        glob = _mask((keep + fresh)[:G]) if G else 0
        if len(keep) > G:
            glob = _mask(keep[:G])
        stages.append(_make_stage([gates[i].id for i in ran], local, glob, n))
        glob_prev = glob
    plan = StagingPlan(stages, 0.0, shape)
    plan.total_cost = staging_cost(plan)
    return plan
