"""Partition a gate sequence into fusion and shared-memory kernels.

Two optimizers live here: :func:`ordered_kernelize` (best contiguous
segmentation) and :func:`kernelize` (DP over open kernels tracked by their
extensible qubit sets, which may emit non-contiguous kernels).

Qubit sets inside the DP are Python ints used as bitsets.  ``FULL = -1`` is the
infinite all-ones mask, so ``ext & x`` and ``x & ~ext`` behave as expected when
a kernel is still extensible on every qubit.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .circuit import (Circuit, Gate, flip_set, gates_commute_insular,
                      non_insular_set)

FULL = -1
INF = float("inf")


class KernelizerError(Exception):
    pass


class SizeExceeded(KernelizerError):
    pass


class NoFeasibleSegmentation(KernelizerError):
    pass


class KernelBudgetExceeded(KernelizerError):
    """The DP generated more states than ``max_states`` allows."""


class PlanCycle(KernelizerError):
    """Kernel conflict graph has a cycle, so no realized order exists."""


class KernelKind(str, Enum):
    FUSION = "fusion"
    SHM = "shm"


def _mask(qs: Iterable[int]) -> int:
    m = 0
    for q in qs:
        m |= 1 << q
    return m


def _bits(mask: int, n: int | None = None) -> frozenset[int]:
    if mask == FULL:
        if n is None:
            raise ValueError("need n to expand the full mask")
        return frozenset(range(n))
    out, q = [], 0
    while mask:
        if mask & 1:
            out.append(q)
        mask >>= 1
        q += 1
    return frozenset(out)


def _pop(x: int) -> int:
    return bin(x).count("1")


# ---------------------------------------------------------------------------
# cost model


@dataclass(frozen=True)
class CostModel:
    fusion_cost: tuple[float, ...]  # index q-1
    alpha: float
    gate_cost: Mapping[str, float] = field(hash=False)
    q_max_fusion: int = 7
    q_max_shared: int = 10
    ls_qubits: int = 3

    def __post_init__(self):
        object.__setattr__(self, "fusion_cost", tuple(float(c) for c in self.fusion_cost))
        object.__setattr__(self, "gate_cost",
                           {str(k).upper(): float(v) for k, v in self.gate_cost.items()})
        fc = self.fusion_cost
        if len(fc) < self.q_max_fusion:
            raise ValueError(f"fusion_cost has {len(fc)} entries, q_max_fusion={self.q_max_fusion}")
        if any(c < 0 for c in fc) or self.alpha < 0 or any(v < 0 for v in self.gate_cost.values()):
            raise ValueError("costs must be nonnegative")
        if any(fc[i] > fc[i + 1] for i in range(self.q_max_fusion - 1)):
            raise ValueError("fusion_cost must be nondecreasing")
        if self.ls_qubits < 0 or self.q_max_shared < self.ls_qubits:
            raise ValueError("q_max_shared must be at least ls_qubits")

    @classmethod
    def from_json(cls, data: Mapping) -> "CostModel":
        return cls(fusion_cost=tuple(data["fusion_cost"]), alpha=data["alpha"],
                   gate_cost=dict(data["gate_cost"]), q_max_fusion=data["q_max_fusion"],
                   q_max_shared=data["q_max_shared"], ls_qubits=data.get("ls_qubits", 3))

    @classmethod
    def load(cls, path: str | Path) -> "CostModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def default(cls) -> "CostModel":
        text = resources.files("hiersim").joinpath("data/default_cost_model.json").read_text()
        return cls.from_json(json.loads(text))

    def to_json(self) -> dict:
        return {"fusion_cost": list(self.fusion_cost), "alpha": self.alpha,
                "gate_cost": dict(self.gate_cost), "q_max_fusion": self.q_max_fusion,
                "q_max_shared": self.q_max_shared, "ls_qubits": self.ls_qubits}

    def fusion(self, q: int) -> float:
        if q > self.q_max_fusion:
            raise SizeExceeded(f"fusion kernel of {q} qubits exceeds {self.q_max_fusion}")
        return self.fusion_cost[max(q, 1) - 1]

    def gate(self, g: Gate) -> float:
        """Cost of a gate inside a shared-memory kernel, attachments included."""
        total = 0.0
        for p in g.expand():
            try:
                total += self.gate_cost[p.kind.name]
            except KeyError:
                raise KernelizerError(f"cost model has no gate_cost for {p.kind.name}") from None
        return total

    def shm_fits(self, active: int) -> bool:
        return active + self.ls_qubits <= self.q_max_shared

    @property
    def best_density(self) -> int:
        """Fusion width with the lowest cost per qubit (larger wins ties)."""
        best, bq = INF, 1
        for q in range(1, self.q_max_fusion + 1):
            r = self.fusion_cost[q - 1] / q
            if r <= best + 1e-15:
                best, bq = r, q
        return bq


# ---------------------------------------------------------------------------
# kernels and plans


@dataclass(frozen=True)
class Kernel:
    gates: tuple[int, ...]
    kind: KernelKind
    qubits: frozenset[int]
    cost: float
    active: frozenset[int] = frozenset()

    def to_json(self) -> dict:
        return {"gates": list(self.gates), "kind": self.kind.value,
                "qubits": sorted(self.qubits), "cost": self.cost,
                "active": sorted(self.active)}

    @classmethod
    def from_json(cls, d: Mapping) -> "Kernel":
        return cls(tuple(d["gates"]), KernelKind(d["kind"]), frozenset(d["qubits"]),
                   float(d["cost"]), frozenset(d.get("active", ())))


@dataclass(frozen=True)
class KernelPlan:
    kernels: tuple[Kernel, ...]
    total_cost: float
    realized_order: tuple[int, ...]

    def to_json(self) -> dict:
        return {"kernels": [k.to_json() for k in self.kernels],
                "total_cost": self.total_cost, "realized_order": list(self.realized_order)}

    @classmethod
    def from_json(cls, d: Mapping) -> "KernelPlan":
        return cls(tuple(Kernel.from_json(k) for k in d["kernels"]), float(d["total_cost"]),
                   tuple(d["realized_order"]))


@dataclass(frozen=True)
class KernelDescriptor:
    """Open kernel as the DP sees it.  ``extensible=None`` means every qubit."""

    kind: KernelKind
    qubits: frozenset[int]
    extensible: frozenset[int] | None = None
    extensible_insular: frozenset[int] | None = None
    active: frozenset[int] = frozenset()
    gate_cost: float = 0.0
    gates: tuple[int, ...] = ()


def _gate_active(g: Gate) -> frozenset[int]:
    """Qubits the DP treats as active: non-insular, or insular but flipped."""
    return non_insular_set(g) | flip_set(g)


def segment_cost(kind: KernelKind, gates: Sequence[Gate], model: CostModel) -> float:
    if kind is KernelKind.FUSION:
        q = len(frozenset().union(*(g.qubit_set for g in gates))) if gates else 0
        return model.fusion(q)
    active = frozenset().union(*(non_insular_set(g) for g in gates)) if gates else frozenset()
    if not model.shm_fits(len(active)):
        raise SizeExceeded(f"shared-memory kernel needs {len(active)} + {model.ls_qubits} qubits")
    return model.alpha + sum(model.gate(g) for g in gates)


def kernel_cost(kernel: Kernel | KernelDescriptor, model: CostModel,
                circuit: Circuit | None = None) -> float:
    if isinstance(kernel, KernelDescriptor):
        if kernel.kind is KernelKind.FUSION:
            return model.fusion(len(kernel.qubits))
        if not model.shm_fits(len(kernel.active)):
            raise SizeExceeded("shared-memory kernel too large")
        return model.alpha + kernel.gate_cost
    if kernel.kind is KernelKind.FUSION:
        return model.fusion(len(kernel.qubits))
    if circuit is None:
        raise ValueError("shared-memory kernel cost needs the circuit for gate costs")
    by_id = circuit.gate_by_id()
    return segment_cost(kernel.kind, [by_id[i] for i in kernel.gates], model)


# ---------------------------------------------------------------------------
# constraint checks


def satisfies_kernel_constraint(kernel: Iterable[int], seq: Circuit) -> bool:
    """Weak convexity and monotonicity of a gate-id set against ``seq``'s order."""
    ks = set(kernel)
    gates = seq.gates
    m = len(gates)
    qs = [_mask(g.qubits) for g in gates]
    prefix = [0] * (m + 1)  # union of member qubits strictly before j
    for j in range(m):
        prefix[j + 1] = prefix[j] | (qs[j] if gates[j].id in ks else 0)
    suffix = [0] * (m + 1)  # union of member qubits strictly after j-1
    for j in range(m - 1, -1, -1):
        suffix[j] = suffix[j + 1] | (qs[j] if gates[j].id in ks else 0)
    total = prefix[m]
    for j in range(m):
        if gates[j].id in ks:
            continue
        if qs[j] & prefix[j] & suffix[j + 1]:
            return False
        if qs[j] & prefix[j] and prefix[j] != total:
            return False
    return True


def extensible_oracle(kernel: Iterable[int], i: int, seq: Circuit) -> frozenset[int]:
    """Extensible qubits of the kernel restricted to positions < i, by brute force."""
    ks = set(kernel)
    gates = seq.gates
    n = seq.num_qubits
    members = [j for j in range(i) if gates[j].id in ks]
    others = [j for j in range(i) if gates[j].id not in ks]
    out = set()
    for q in range(n):
        ok = True
        for j1 in members:
            for j2 in others:
                if j1 < j2 and q in gates[j1].qubit_set and q in gates[j2].qubit_set:
                    ok = False
        for j in others:
            before = frozenset().union(*(gates[k].qubit_set for k in members if k < j))
            if gates[j].qubit_set & before and q not in before:
                ok = False
        if ok:
            out.add(q)
    return frozenset(out)


# ---------------------------------------------------------------------------
# contiguous DP


def _best_segment(gates: Sequence[Gate], model: CostModel) -> tuple[float, KernelKind | None]:
    best, kind = INF, None
    q = len(frozenset().union(*(g.qubit_set for g in gates)))
    if q <= model.q_max_fusion:
        best, kind = model.fusion(q), KernelKind.FUSION
    active = frozenset().union(*(non_insular_set(g) for g in gates))
    if model.shm_fits(len(active)):
        c = model.alpha + sum(model.gate(g) for g in gates)
        if c < best - 1e-12:
            best, kind = c, KernelKind.SHM
    return best, kind


def _make_kernel(kind: KernelKind, gates: Sequence[Gate], model: CostModel) -> Kernel:
    qubits = frozenset().union(*(g.qubit_set for g in gates))
    active = frozenset().union(*(non_insular_set(g) for g in gates))
    return Kernel(tuple(g.id for g in gates), kind, qubits,
                  segment_cost(kind, gates, model), active)


def _check_singles(seq: Circuit, model: CostModel) -> None:
    for g in seq.gates:
        if _best_segment([g], model)[1] is None:
            raise NoFeasibleSegmentation(f"gate {g} fits neither kernel kind")


def ordered_kernelize(seq: Circuit, model: CostModel) -> KernelPlan:
    """Cheapest partition of ``seq`` into contiguous segments."""
    gates = seq.gates
    m = len(gates)
    if m == 0:
        return KernelPlan((), 0.0, ())
    _check_singles(seq, model)
    qm = [_mask(g.qubits) for g in gates]
    am = [_mask(non_insular_set(g)) for g in gates]
    gc = [model.gate(g) for g in gates]
    dp = [INF] * (m + 1)
    choice: list[tuple[int, KernelKind] | None] = [None] * (m + 1)
    dp[0] = 0.0
    for i in range(m):
        q = a = 0
        s = 0.0
        for j in range(i, -1, -1):
            q |= qm[j]
            a |= am[j]
            s += gc[j]
            pq, pa = _pop(q), _pop(a)
            fits_f = pq <= model.q_max_fusion
            fits_s = model.shm_fits(pa)
            if not fits_f and not fits_s:
                break  # both masks only grow as j decreases
            if fits_f:
                c = dp[j] + model.fusion(pq)
                if c < dp[i + 1] - 1e-12:
                    dp[i + 1], choice[i + 1] = c, (j, KernelKind.FUSION)
            if fits_s:
                c = dp[j] + model.alpha + s
                if c < dp[i + 1] - 1e-12:
                    dp[i + 1], choice[i + 1] = c, (j, KernelKind.SHM)
    kernels = []
    i = m
    while i > 0:
        j, kind = choice[i]
        kernels.append(_make_kernel(kind, gates[j:i], model))
        i = j
    kernels.reverse()
    return KernelPlan(tuple(kernels), sum(k.cost for k in kernels), tuple(seq.ids))


def greedy_fusion_baseline(seq: Circuit, model: CostModel, width: int = 5) -> KernelPlan:
    """Left-to-right packing into fusion kernels of at most ``width`` qubits."""
    width = min(width, model.q_max_fusion)
    kernels: list[Kernel] = []
    cur: list[Gate] = []
    cur_q: frozenset[int] = frozenset()
    for g in seq.gates:
        if len(g.qubit_set) > width:
            raise NoFeasibleSegmentation(f"gate {g} is wider than {width} qubits")
        if cur and len(cur_q | g.qubit_set) > width:
            kernels.append(_make_kernel(KernelKind.FUSION, cur, model))
            cur, cur_q = [], frozenset()
        cur.append(g)
        cur_q |= g.qubit_set
    if cur:
        kernels.append(_make_kernel(KernelKind.FUSION, cur, model))
    return KernelPlan(tuple(kernels), sum(k.cost for k in kernels), tuple(seq.ids))


# ---------------------------------------------------------------------------
# extensible-set DP
#
# A descriptor is a tuple (kind, qubits, ext, extins, active) of ints; kind is
# 0 for fusion and 1 for shared memory.  ``active`` is only used for shared
# memory kernels.

_F, _S = 0, 1
_KINDS = (KernelKind.FUSION, KernelKind.SHM)


def _restrict(d: tuple, gq: int, gi: int, lifting: bool, full: int) -> tuple[tuple, bool]:
    """Update a non-host descriptor after a gate on ``gq`` was placed elsewhere."""
    kind, q, ext, extins, act = d
    if ext == FULL:
        x = gq & q
        if lifting and kind == _S:
            x &= ~(gi & ~act)
        if not x:
            return d, False
        return (kind, q, q & ~gq, full & ~gq, act), True
    return (kind, q, ext & ~gq, extins & ~gq, act), False


def _frozen(d: tuple, lifting: bool) -> bool:
    kind, _q, ext, extins, _a = d
    if ext != 0:
        return False
    return kind == _F or not lifting or extins == 0


def _solo_cost(d: tuple, model: CostModel) -> float:
    """Cost owed by a kernel executed on its own (shm gate costs are prepaid)."""
    return model.fusion(_pop(d[1])) if d[0] == _F else model.alpha


def _settle(d: tuple, model: CostModel) -> tuple[tuple, float]:
    """Charge a freshly restricted kernel and drop its qubit set from the key.

    A restricted kernel only accepts gates inside its extensible set, which is
    a subset of its qubits, so its fusion width never changes again and its
    qubit set no longer influences any transition.
    """
    if d[2] == FULL or d[1] == 0:
        return d, 0.0
    return (d[0], 0, d[2], d[3], d[4]), _solo_cost(d, model)


def _merge_ok(a: tuple, b: tuple, model: CostModel) -> bool:
    if a[0] == _F:
        return _pop(a[1] | b[1]) <= model.q_max_fusion
    return model.shm_fits(_pop(a[4] | b[4]))


def _pack(descs: Sequence[tuple], idx: Sequence[int], model: CostModel
          ) -> tuple[list[list[int]], float]:
    """First-fit decreasing merge of unrestricted kernels; returns groups and cost."""
    groups: list[list[int]] = []
    cost = 0.0
    fus = [i for i in idx if descs[i][0] == _F]
    shm = [i for i in idx if descs[i][0] == _S]
    target = model.best_density
    fus.sort(key=lambda i: (-_pop(descs[i][1]), descs[i][1]))
    bins: list[list] = []  # [qubit mask, members]
    for i in fus:
        q = descs[i][1]
        placed = False
        for b in bins:
            u = b[0] | q
            if _pop(u) <= target and model.fusion(_pop(u)) <= \
                    model.fusion(_pop(b[0])) + model.fusion(_pop(q)) + 1e-12:
                b[0] = u
                b[1].append(i)
                placed = True
                break
        if not placed:
            bins.append([q, [i]])
    for qmask, members in bins:
        groups.append(members)
        cost += model.fusion(_pop(qmask))
    cap = model.q_max_shared - model.ls_qubits
    shm.sort(key=lambda i: (-_pop(descs[i][4]), descs[i][4], descs[i][1]))
    sbins: list[list] = []
    for i in shm:
        a = descs[i][4]
        for b in sbins:
            if _pop(b[0] | a) <= cap:
                b[0] |= a
                b[1].append(i)
                break
        else:
            sbins.append([a, [i]])
    for _a, members in sbins:
        groups.append(members)
        cost += model.alpha
    return groups, cost


def _estimate(descs: Sequence[tuple], value: float, model: CostModel) -> float:
    unres = [i for i, d in enumerate(descs) if d[2] == FULL]
    return value + _pack(descs, unres, model)[1]


def _lower_bound(descs: Sequence[tuple], value: float, model: CostModel) -> float:
    ratio = model.fusion(model.best_density) / model.best_density
    lb = value
    shm = False
    for d in descs:
        if d[2] == FULL:
            if d[0] == _F:
                lb += ratio * _pop(d[1])
            else:
                shm = True
    return lb + (model.alpha if shm else 0.0)


@dataclass
class _Entry:
    value: float
    groups: tuple
    closed: tuple | None  # cons list ((kind, gate positions), rest)


def _canon(descs: list, groups: list) -> tuple[tuple, tuple]:
    order = sorted(range(len(descs)), key=lambda k: (descs[k], groups[k]))
    return tuple(descs[k] for k in order), tuple(groups[k] for k in order)


def _closed_list(closed) -> list:
    out = []
    while closed is not None:
        out.append(closed[0])
        closed = closed[1]
    out.reverse()
    return out


@dataclass(frozen=True)
class KernelizeOptions:
    lifting: bool = True
    subsumption: bool = True
    deferred_merge: bool = True


def _gate_masks(g: Gate) -> tuple[int, int, int]:
    gq = _mask(g.qubits)
    gn = _mask(_gate_active(g))
    return gq, gn, gq & ~gn


def _transitions(descs: tuple, groups: tuple, i: int, gq: int, gn: int, gi: int, gcost: float,
                 model: CostModel, opts: KernelizeOptions, full: int):
    """Yield (descs, groups, value delta, newly closed kernels) for placing gate i."""
    hosts: list = []
    if opts.subsumption:
        for j, d in enumerate(descs):
            inside = d[2] if d[2] != FULL else d[1]
            if d[0] == _F and not gq & ~inside:
                hosts = [j]
                break
    if not hosts:
        for j, d in enumerate(descs):
            kind, q, ext, extins, act = d
            if kind == _F:
                if not gq & ~ext and (ext != FULL or _pop(q | gq) <= model.q_max_fusion):
                    hosts.append(j)
            else:
                strict = not gq & ~ext
                lifted = opts.lifting and not gn & ~ext and not gi & ~extins
                if (strict or lifted) and model.shm_fits(_pop(act | gn)):
                    hosts.append(j)
        if _pop(gq) <= model.q_max_fusion:
            hosts.append("f")
        if model.shm_fits(_pop(gn)):
            hosts.append("s")

    for h in hosts:
        nd = list(descs)
        ng = list(groups)
        if h == "f" or h == "s":
            kind = _F if h == "f" else _S
            host_idx = len(nd)
            nd.append((kind, gq, FULL, FULL, gn if kind == _S else 0))
            ng.append((i,))
        else:
            host_idx = h
            kind, q, ext, extins, act = nd[h]
            if ext == FULL:
                q |= gq
            nd[h] = (kind, q, ext, extins, act | gn if kind == _S else 0)
            ng[h] = ng[h] + (i,)
        delta = gcost if kind == _S else 0.0
        was_free = [k for k, d in enumerate(descs) if d[2] == FULL and k != host_idx]
        fresh = []
        for k in range(len(nd)):
            if k == host_idx:
                continue
            nd[k], restricted = _restrict(nd[k], gq, gi, opts.lifting, full)
            if restricted:
                fresh.append(k)

        variants = [(nd, ng)]
        if opts.deferred_merge and fresh:
            seen = set()
            for r in fresh:
                for u in was_free:
                    if u == r or nd[u][0] != nd[r][0] or (u, r) in seen:
                        continue
                    if not _merge_ok(nd[r], nd[u], model):
                        continue
                    seen.add((r, u))
                    kind, q1, _e, _x, a1 = nd[r]
                    q = q1 | nd[u][1]
                    merged = (kind, q, q & ~gq, full & ~gq, a1 | nd[u][4])
                    md = [d for k, d in enumerate(nd) if k != u]
                    mg = [g for k, g in enumerate(ng) if k != u]
                    rr = r if r < u else r - 1
                    md[rr] = merged
                    mg[rr] = tuple(sorted(ng[r] + ng[u]))
                    variants.append((md, mg))

        for vd, vg in variants:
            keep_d, keep_g, closed, extra = [], [], [], 0.0
            for d, g in zip(vd, vg):
                d, paid = _settle(d, model)
                extra += paid
                if _frozen(d, opts.lifting):
                    closed.append((d[0], g))
                else:
                    keep_d.append(d)
                    keep_g.append(g)
            yield keep_d, keep_g, delta + extra, closed


def kernelize(seq: Circuit, model: CostModel, prune_T: int | float = 500,
              options: KernelizeOptions | None = None,
              max_states: int | None = None) -> KernelPlan:
    """DP over sets of open kernels; returns the cheapest plan found.

    ``prune_T`` bounds the number of DP states per position (``float('inf')``
    disables pruning).  When it is reached, states are ranked by their cost
    after greedy packing and the cheapest half is kept.

    Without pruning the search is exact; states whose charged cost already
    exceeds the best contiguous plan are cut, since they cannot finish cheaper.
    ``max_states`` caps the total number of DP states created.
    """
    opts = options or KernelizeOptions()
    gates = seq.gates
    m = len(gates)
    if m == 0:
        return KernelPlan((), 0.0, ())
    if prune_T < 2:
        raise ValueError("prune_T must be at least 2")
    _check_singles(seq, model)
    ub = INF
    if prune_T == INF:
        ub = ordered_kernelize(seq, model).total_cost + 1e-9
    states = _run_dp(seq, model, prune_T, opts, ub, max_states)
    if not states:
        states = _run_dp(seq, model, prune_T, opts, INF, max_states)
    return _extract(seq, model, states)


def _rank(kv, model: CostModel):
    return (_estimate(kv[0], kv[1].value, model), len(kv[0]), tuple(d[1] for d in kv[0]))


def _run_dp(seq: Circuit, model: CostModel, prune_T: int | float, opts: KernelizeOptions,
            ub: float, max_states: int | None) -> dict:
    gates = seq.gates
    full = (1 << seq.num_qubits) - 1
    info = [(*_gate_masks(g), model.gate(g)) for g in gates]

    states: dict[tuple, _Entry] = {(): _Entry(0.0, (), None)}
    created = 0
    for i in range(len(gates)):
        gq, gn, gi, gcost = info[i]
        nxt: dict[tuple, _Entry] = {}
        for key, e in states.items():
            for nd, ng, delta, closed in _transitions(key, e.groups, i, gq, gn, gi, gcost,
                                                      model, opts, full):
                cd, cg = _canon(nd, ng)
                v = e.value + delta
                old = nxt.get(cd)
                if old is not None and old.value <= v + 1e-12:
                    continue
                if ub < INF and _lower_bound(cd, v, model) > ub:
                    continue
                cl = e.closed
                for c in closed:
                    cl = (c, cl)
                nxt[cd] = _Entry(v, cg, cl)
                created += 1
                if max_states is not None and created > max_states:
                    raise KernelBudgetExceeded(
                        f"more than {max_states} DP states by gate {i} of {len(gates)}")
        states = nxt
        if len(states) >= prune_T:
            ranked = sorted(states.items(), key=lambda kv: _rank(kv, model))
            states = dict(ranked[: max(1, int(prune_T) // 2)])
    return states


def _extract(seq: Circuit, model: CostModel, states: dict) -> KernelPlan:
    gates = seq.gates
    best_key, best = min(states.items(), key=lambda kv: _rank(kv, model))
    groups_pos: list[tuple[int, tuple[int, ...]]] = list(_closed_list(best.closed))
    unres = [k for k, d in enumerate(best_key) if d[2] == FULL]
    for k, d in enumerate(best_key):
        if d[2] != FULL:
            groups_pos.append((d[0], best.groups[k]))
    packed, _ = _pack(best_key, unres, model)
    for members in packed:
        pos = tuple(sorted(p for k in members for p in best.groups[k]))
        groups_pos.append((best_key[members[0]][0], pos))

    kernels = [_make_kernel(_KINDS[kind], [gates[p] for p in pos], model)
               for kind, pos in groups_pos]
    ordered = _order_kernels(kernels, seq)
    realized = tuple(g for k in ordered for g in k.gates)
    return KernelPlan(tuple(ordered), sum(k.cost for k in ordered), realized)


def _order_kernels(kernels: Sequence[Kernel], seq: Circuit) -> list[Kernel]:
    """Topological order of kernels under gate conflicts, earliest gate first."""
    pos = {g.id: p for p, g in enumerate(seq.gates)}
    owner = {}
    for k, kern in enumerate(kernels):
        for g in kern.gates:
            owner[g] = k
    gates = seq.gates
    succ: list[set[int]] = [set() for _ in kernels]
    indeg = [0] * len(kernels)
    for a in range(len(gates)):
        ka = owner[gates[a].id]
        for b in range(a + 1, len(gates)):
            kb = owner[gates[b].id]
            if ka == kb or kb in succ[ka]:
                continue
            if gates[a].qubit_set & gates[b].qubit_set and \
                    not gates_commute_insular(gates[a], gates[b]):
                succ[ka].add(kb)
                indeg[kb] += 1
    first = [min(pos[g] for g in k.gates) for k in kernels]
    heap = [(first[k], k) for k in range(len(kernels)) if indeg[k] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, k = heapq.heappop(heap)
        out.append(kernels[k])
        for s in succ[k]:
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(heap, (first[s], s))
    if len(out) != len(kernels):
        raise PlanCycle("kernels cannot be ordered consistently with gate conflicts")
    return out


# ---------------------------------------------------------------------------
# public descriptor helpers


def _to_tuple(d: KernelDescriptor) -> tuple:
    ext = FULL if d.extensible is None else _mask(d.extensible)
    extins = FULL if d.extensible_insular is None else _mask(d.extensible_insular)
    return (_KINDS.index(d.kind), _mask(d.qubits), ext, extins, _mask(d.active))


def _from_tuple(t: tuple, n: int, gate_cost: float, gates: tuple[int, ...]) -> KernelDescriptor:
    kind, q, ext, extins, act = t
    return KernelDescriptor(
        kind=_KINDS[kind], qubits=_bits(q),
        extensible=None if ext == FULL else _bits(ext),
        extensible_insular=None if extins == FULL else _bits(extins),
        active=_bits(act), gate_cost=gate_cost, gates=gates)


def update_extensible(state: Sequence[KernelDescriptor], gate: Gate, host: int | None,
                      n: int, *, new_kind: KernelKind = KernelKind.FUSION,
                      lifting: bool = False, model: CostModel | None = None
                      ) -> list[KernelDescriptor]:
    """Place ``gate`` into ``state[host]`` (or a new kernel when ``host`` is None).

    Returns the updated descriptor list.  A new kernel is appended last.  No
    kernel is closed here, so indices stay stable for callers.
    """
    gq, gn, gi = _gate_masks(gate)
    full = (1 << n) - 1
    gcost = model.gate(gate) if model is not None else 0.0
    out = []
    for k, d in enumerate(state):
        t = _to_tuple(d)
        if k == host:
            kind, q, ext, extins, act = t
            t = (kind, q | gq, ext, extins, act | gn if kind == _S else 0)
            extra = gcost if kind == _S else 0.0
            out.append(_from_tuple(t, n, d.gate_cost + extra, d.gates + (gate.id,)))
        else:
            t, _ = _restrict(t, gq, gi, lifting, full)
            out.append(_from_tuple(t, n, d.gate_cost, d.gates))
    if host is None:
        kind = _KINDS.index(new_kind)
        t = (kind, gq, FULL, FULL, gn if kind == _S else 0)
        out.append(_from_tuple(t, n, gcost if kind == _S else 0.0, (gate.id,)))
    return out


def descriptors_disjoint(state: Sequence[KernelDescriptor]) -> bool:
    """The per-kernel sets (qubits if unrestricted, else extensible) never overlap."""
    seen: set[int] = set()
    for d in state:
        s = d.qubits if d.extensible is None else d.extensible
        if seen & s:
            return False
        seen |= s
    return True


def greedy_pack(kernels: Sequence[KernelDescriptor], model: CostModel
                ) -> tuple[list[Kernel], float]:
    """Merge open kernels toward the cheapest fusion density / shared-memory capacity."""
    tuples = [_to_tuple(d) for d in kernels]
    groups, _ = _pack(tuples, list(range(len(tuples))), model)
    out = []
    for members in groups:
        ds = [kernels[i] for i in members]
        kind = ds[0].kind
        qubits = frozenset().union(*(d.qubits for d in ds))
        active = frozenset().union(*(d.active for d in ds))
        gates = tuple(g for d in ds for g in d.gates)
        if kind is KernelKind.FUSION:
            cost = model.fusion(len(qubits))
        else:
            cost = model.alpha + sum(d.gate_cost for d in ds)
        out.append(Kernel(gates, kind, qubits, cost, active))
    return out, sum(k.cost for k in out)


# ---------------------------------------------------------------------------
# verification


def verify_plan(plan: KernelPlan, seq: Circuit, model: CostModel) -> list[str]:
    """Structured list of violations; empty when the plan is valid."""
    problems: list[str] = []
    ids = seq.ids
    by_id = seq.gate_by_id()
    seen: dict[int, int] = {}
    for k, kern in enumerate(plan.kernels):
        for g in kern.gates:
            if g not in by_id:
                problems.append(f"kernel {k}: unknown gate {g}")
            elif g in seen:
                problems.append(f"gate {g} in kernels {seen[g]} and {k}")
            else:
                seen[g] = k
    missing = set(ids) - set(seen)
    if missing:
        problems.append(f"gates not covered: {sorted(missing)}")
    if problems:
        return problems
    concat = tuple(g for kern in plan.kernels for g in kern.gates)
    if tuple(plan.realized_order) != concat:
        problems.append("realized_order is not the concatenation of kernels")
    realized = seq.subcircuit(concat)
    total = 0.0
    for k, kern in enumerate(plan.kernels):
        gs = [by_id[g] for g in kern.gates]
        if not satisfies_kernel_constraint(kern.gates, realized):
            problems.append(f"kernel {k} violates the kernel constraint in realized order")
        qubits = frozenset().union(*(g.qubit_set for g in gs))
        if qubits != kern.qubits:
            problems.append(f"kernel {k}: qubit set {sorted(kern.qubits)} != {sorted(qubits)}")
        try:
            c = segment_cost(kern.kind, gs, model)
        except SizeExceeded as exc:
            problems.append(f"kernel {k}: {exc}")
            continue
        if abs(c - kern.cost) > 1e-9 * max(1.0, abs(c)):
            problems.append(f"kernel {k}: cost {kern.cost} != recomputed {c}")
        total += c
    if abs(total - plan.total_cost) > 1e-9 * max(1.0, abs(total)):
        problems.append(f"total_cost {plan.total_cost} != sum of kernels {total}")
    pos = {g: p for p, g in enumerate(concat)}
    gates = seq.gates
    for a in range(len(gates)):
        for b in range(a + 1, len(gates)):
            ga, gb = gates[a], gates[b]
            if pos[ga.id] > pos[gb.id] and ga.qubit_set & gb.qubit_set \
                    and not gates_commute_insular(ga, gb):
                problems.append(f"gates {ga.id} and {gb.id} reordered across a conflict")
    return problems


__all__ = [
    "CostModel", "Kernel", "KernelKind", "KernelPlan", "KernelDescriptor", "KernelizeOptions",
    "KernelizerError", "KernelBudgetExceeded", "SizeExceeded", "NoFeasibleSegmentation", "PlanCycle",
    "kernel_cost", "segment_cost", "satisfies_kernel_constraint", "extensible_oracle",
    "ordered_kernelize", "kernelize", "greedy_fusion_baseline", "update_extensible",
    "greedy_pack", "verify_plan", "descriptors_disjoint",
]
