"""Run staged, kernelized plans on a CPU model of a sharded state vector.

Physical qubit p is bit p of the stored amplitude index.  Bits [0, L) index
inside a shard, bits [L, L+R) pick the shard within a node and bits [L+R, n)
pick the node.

Insular gates on non-local qubits are applied by specialization: the value of
each such qubit is fixed per shard, so only a sub-block of the gate matrix
acts on the shard.  Anti-diagonal actions on those qubits cannot move data
across shards, so they are recorded in a logical X "frame" instead: the stored
vector ``phi`` relates to the true state by ``psi = X^F phi``.  Gates are
conjugated by the frame before use, and the frame is folded into the next
remap (or into the final readout).
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .circuit import Circuit, Gate, insular_set, non_insular_set, swap_flips, unitary_of
from .kernelizer import Kernel, KernelKind, KernelPlan, CostModel, verify_plan
from .reference import apply_matrix, num_qubits_of
from .staging import Stage, StagingPlan, validate_staging

ATOL = 1e-12


class ExecutorError(Exception):
    pass


class LocalityViolation(ExecutorError):
    pass


class NotInsular(ExecutorError):
    pass


class PlanViolation(ExecutorError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("; ".join(problems[:5]))
        self.problems = list(problems)


# ---------------------------------------------------------------------------
# layout and mappings


@dataclass(frozen=True)
class ShardLayout:
    L: int
    R: int
    G: int

    @property
    def n(self) -> int:
        return self.L + self.R + self.G

    @property
    def shard_size(self) -> int:
        return 1 << self.L

    @property
    def node_size(self) -> int:
        return 1 << (self.L + self.R)

    @property
    def node_count(self) -> int:
        return 1 << self.G

    @property
    def shard_count(self) -> int:
        return 1 << (self.R + self.G)


@dataclass(frozen=True)
class QubitMapping:
    phys_of_logical: tuple[int, ...]

    def __post_init__(self):
        p = tuple(int(x) for x in self.phys_of_logical)
        object.__setattr__(self, "phys_of_logical", p)
        if sorted(p) != list(range(len(p))):
            raise ExecutorError(f"mapping {p} is not a permutation")

    @property
    def n(self) -> int:
        return len(self.phys_of_logical)

    @property
    def logical_of_phys(self) -> tuple[int, ...]:
        inv = [0] * self.n
        for l, p in enumerate(self.phys_of_logical):
            inv[p] = l
        return tuple(inv)

    @classmethod
    def identity(cls, n: int) -> "QubitMapping":
        return cls(tuple(range(n)))

    def classes(self, layout: ShardLayout) -> tuple[frozenset, frozenset, frozenset]:
        loc, reg, glo = set(), set(), set()
        for l, p in enumerate(self.phys_of_logical):
            (loc if p < layout.L else reg if p < layout.L + layout.R else glo).add(l)
        return frozenset(loc), frozenset(reg), frozenset(glo)


def mapping_for_stage(stage: Stage, layout: ShardLayout,
                      previous: QubitMapping | None = None) -> QubitMapping:
    """Physical placement realizing a stage's partition.

    Qubits that stay in the same class keep their slot; the rest fill the free
    slots of their class in ascending order.
    """
    n = layout.n
    ranges = [range(0, layout.L), range(layout.L, layout.L + layout.R),
              range(layout.L + layout.R, n)]
    groups = [sorted(stage.local), sorted(stage.regional), sorted(stage.global_)]
    phys = [-1] * n
    for cls, (members, slots) in enumerate(zip(groups, ranges)):
        taken = set()
        if previous is not None:
            for l in members:
                p = previous.phys_of_logical[l]
                if p in slots:
                    phys[l] = p
                    taken.add(p)
        free = iter(p for p in slots if p not in taken)
        for l in members:
            if phys[l] < 0:
                phys[l] = next(free)
    return QubitMapping(tuple(phys))


def _index_map(mapping: QubitMapping, n: int) -> np.ndarray:
    """Physical index of every logical index."""
    idx = np.arange(1 << n, dtype=np.int64)
    out = np.zeros_like(idx)
    for l, p in enumerate(mapping.phys_of_logical):
        out |= ((idx >> l) & 1) << p
    return out


def to_physical(state: np.ndarray, mapping: QubitMapping) -> np.ndarray:
    out = np.empty_like(state)
    out[_index_map(mapping, mapping.n)] = state
    return out


def to_logical(phys: np.ndarray, mapping: QubitMapping, frame: int = 0) -> np.ndarray:
    """Logical-order true state from stored physical amplitudes and an X frame."""
    n = mapping.n
    pos = _index_map(mapping, n)
    logical = np.arange(1 << n, dtype=np.int64)
    return phys[pos[logical ^ frame]]


# ---------------------------------------------------------------------------
# communication accounting


@dataclass
class CommStats:
    intra_node_amplitudes_moved: int = 0
    inter_node_amplitudes_moved: int = 0
    local_swaps: int = 0
    global_swaps: int = 0
    per_stage: list[dict] = field(default_factory=list)

    def add(self, other: "CommStats", stage: int | None = None) -> None:
        self.intra_node_amplitudes_moved += other.intra_node_amplitudes_moved
        self.inter_node_amplitudes_moved += other.inter_node_amplitudes_moved
        self.local_swaps += other.local_swaps
        self.global_swaps += other.global_swaps
        row = other.totals()
        if stage is not None:
            row = {"stage": stage, **row}
        self.per_stage.append(row)

    def totals(self) -> dict:
        return {"intra_node_amplitudes_moved": self.intra_node_amplitudes_moved,
                "inter_node_amplitudes_moved": self.inter_node_amplitudes_moved,
                "local_swaps": self.local_swaps, "global_swaps": self.global_swaps}

    def to_json(self) -> dict:
        return {"total": self.totals(), "per_stage": list(self.per_stage)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["stage", "intra_node_amplitudes_moved", "inter_node_amplitudes_moved",
                "local_swaps", "global_swaps"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.per_stage:
            w.writerow({c: row.get(c, "") for c in cols})
        w.writerow({"stage": "total", **self.totals()})
        return buf.getvalue()


def remap(state: np.ndarray, old: QubitMapping, new: QubitMapping, layout: ShardLayout,
          frame: int = 0) -> tuple[np.ndarray, CommStats]:
    """Re-store physical amplitudes under ``new``, folding in a pending X frame.

    An amplitude counts as inter-node traffic if its node bits change, and as
    intra-node traffic if it stays on its node but changes position.
    """
    n = layout.n
    src_of = _index_map(old, n)
    dst_of = _index_map(new, n)
    logical = np.arange(1 << n, dtype=np.int64)
    src = src_of[logical ^ frame]
    dst = dst_of[logical]
    out = np.empty_like(state)
    out[dst] = state[src]
    shift = layout.L + layout.R
    node_moved = (src >> shift) != (dst >> shift)
    moved = src != dst
    ol, _, og = old.classes(layout)
    nl, _, ng = new.classes(layout)
    stats = CommStats(
        intra_node_amplitudes_moved=int(np.count_nonzero(moved & ~node_moved)),
        inter_node_amplitudes_moved=int(np.count_nonzero(node_moved)),
        local_swaps=len(nl - ol), global_swaps=len(ng - og))
    return out, stats


# ---------------------------------------------------------------------------
# gate matrices and specialization


def _gate_matrix(gate: Gate, order: Sequence[int]) -> np.ndarray:
    """Unitary of ``gate`` (with attachments and flips) over logical qubits ``order``."""
    k = len(order)
    pos = {q: i for i, q in enumerate(order)}
    u = np.eye(1 << k, dtype=complex)
    for p in gate.expand():
        u = apply_matrix(u, unitary_of(p), [pos[q] for q in p.qubits])
    return u


def _xconj(u: np.ndarray, mask: int) -> np.ndarray:
    if not mask:
        return u
    idx = np.arange(u.shape[0]) ^ mask
    return u[np.ix_(idx, idx)]


def _local_mask(order: Sequence[int], logical_mask: int) -> int:
    return sum(1 << i for i, q in enumerate(order) if (logical_mask >> q) & 1)


def _block_flip(u: np.ndarray, known: Sequence[int]) -> int:
    """Constant flip (as a mask over matrix positions) of a block-monomial matrix."""
    if not known:
        return 0
    col = u[:, 0]
    r = int(np.flatnonzero(np.abs(col) > 1e-9)[0])
    return sum(1 << p for p in known if (r >> p) & 1)


def _sub_block(u: np.ndarray, k: int, known: Sequence[int], values: int, flip: int
               ) -> tuple[np.ndarray, list[int]]:
    """Rows with known bits ``values ^ flip``, columns with known bits ``values``.

    ``values`` and ``flip`` are masks over matrix positions.  Returns the block
    and the remaining (free) matrix positions in ascending order.
    """
    free = [i for i in range(k) if i not in known]
    sub_idx = np.zeros(1 << len(free), dtype=np.int64)
    for j, p in enumerate(free):
        sub_idx |= ((np.arange(1 << len(free)) >> j) & 1) << p
    cols = sub_idx | values
    rows = sub_idx | (values ^ flip)
    return u[np.ix_(rows, cols)], free


@dataclass(frozen=True)
class Specialized:
    """A gate reduced to its non-known qubits.

    ``kind`` is "identity", "phase" (``matrix`` is 1x1) or "matrix".  ``flip``
    lists known logical qubits whose value the gate toggles.
    """

    kind: str
    matrix: np.ndarray
    qubits: tuple[int, ...]
    flip: frozenset[int] = frozenset()


def specialize_gate(gate: Gate, known_bits: Mapping[int, int], mapping: QubitMapping
                    ) -> Specialized:
    """Fix the physical qubits in ``known_bits`` to their values and reduce the gate."""
    log_of = mapping.logical_of_phys
    known_logical = {log_of[p]: b for p, b in known_bits.items() if log_of[p] in gate.qubit_set}
    bad = set(known_logical) - insular_set(gate)
    if bad:
        raise NotInsular(f"qubits {sorted(bad)} are not insular for {gate}")
    order = list(gate.qubits)
    u = _gate_matrix(gate, order)
    known = [i for i, q in enumerate(order) if q in known_logical]
    values = sum(1 << i for i, q in enumerate(order) if known_logical.get(q, 0))
    flip = _block_flip(u, known)
    sub, free = _sub_block(u, len(order), known, values, flip)
    qubits = tuple(order[i] for i in free)
    fl = frozenset(order[i] for i in known if (flip >> i) & 1)
    if not free:
        return Specialized("phase", sub, (), fl)
    if np.allclose(sub, np.eye(sub.shape[0]), atol=ATOL, rtol=0):
        return Specialized("identity", sub, qubits, fl)
    return Specialized("matrix", sub, qubits, fl)


def fuse_kernel_unitary(kernel: Kernel, gates: Mapping[int, Gate] | Circuit,
                        max_qubits: int | None = None) -> tuple[np.ndarray, tuple[int, ...]]:
    """Product of the kernel's gates over its sorted qubit set.

    Returns the matrix and the qubit order (order[0] is the least-significant
    matrix index).
    """
    by_id = gates.gate_by_id() if isinstance(gates, Circuit) else gates
    order = tuple(sorted(kernel.qubits))
    if max_qubits is not None and len(order) > max_qubits:
        from .kernelizer import SizeExceeded
        raise SizeExceeded(f"fusion kernel on {len(order)} qubits exceeds {max_qubits}")
    pos = {q: i for i, q in enumerate(order)}
    u = np.eye(1 << len(order), dtype=complex)
    for gid in kernel.gates:
        for p in by_id[gid].expand():
            u = apply_matrix(u, unitary_of(p), [pos[q] for q in p.qubits])
    return u, order


# ---------------------------------------------------------------------------
# kernel execution


def _phys_bit(mapping: QubitMapping, q: int, shard_index: int, L: int) -> int:
    p = mapping.phys_of_logical[q]
    return (shard_index >> (p - L)) & 1


def _apply_block(arr: np.ndarray, u: np.ndarray, order: Sequence[int], known: Sequence[int],
                 values: int, flip: int, bit_of: Mapping[int, int]) -> np.ndarray:
    """Apply the specialized block of ``u`` to ``arr``; ``bit_of`` maps logical -> arr bit."""
    sub, free = _sub_block(u, len(order), known, values, flip)
    if not free:
        return arr * sub[0, 0]
    return apply_matrix(arr, sub, [bit_of[order[i]] for i in free])


def execute_kernel(shard: np.ndarray, kernel: Kernel, gates: Mapping[int, Gate],
                   mapping: QubitMapping, layout: ShardLayout, shard_index: int,
                   frame: int = 0, *, kind: KernelKind | None = None,
                   model: CostModel | None = None) -> tuple[np.ndarray, int]:
    """Apply one kernel to one shard; returns the new shard and the new frame.

    ``kind`` overrides the kernel's own kind, which lets callers run the same
    gates through both execution paths.  The frame update does not depend on
    the shard, so every shard of a stage ends with the same frame.
    """
    kind = kind or kernel.kind
    L = layout.L
    for gid in kernel.gates:
        g = gates[gid]
        for q in non_insular_set(g):
            if mapping.phys_of_logical[q] >= L:
                raise LocalityViolation(f"non-insular qubit {q} of {g} is not local")
    if kind is KernelKind.FUSION:
        return _run_fusion(shard, kernel, gates, mapping, layout, shard_index, frame)
    return _run_shared(shard, kernel, gates, mapping, layout, shard_index, frame,
                       model or CostModel.default())


def _run_fusion(shard, kernel, gates, mapping, layout, shard_index, frame):
    L = layout.L
    u, order = fuse_kernel_unitary(kernel, gates)
    u = _xconj(u, _local_mask(order, frame))
    known = [i for i, q in enumerate(order) if mapping.phys_of_logical[q] >= L]
    values = sum(1 << i for i in known if _phys_bit(mapping, order[i], shard_index, L))
    flip = _block_flip(u, known)
    bit_of = {q: mapping.phys_of_logical[q] for q in order}
    out = _apply_block(shard, u, order, known, values, flip, bit_of)
    for i in known:
        if (flip >> i) & 1:
            frame ^= 1 << order[i]
    return out, frame


def _batch_bits(kernel: Kernel, gates, mapping: QubitMapping, layout: ShardLayout,
                model: CostModel) -> list[int]:
    """Physical local bits loaded together in one shared-memory micro-batch."""
    L = layout.L
    active = set()
    for gid in kernel.gates:
        active |= {mapping.phys_of_logical[q] for q in non_insular_set(gates[gid])}
    bits = set(active) | set(range(min(model.ls_qubits, L)))
    want = min(model.q_max_shared, L)
    for p in range(L):
        if len(bits) >= want:
            break
        bits.add(p)
    return sorted(bits)


def _run_shared(shard, kernel, gates, mapping, layout, shard_index, frame, model):
    L = layout.L
    batch = _batch_bits(kernel, gates, mapping, layout, model)
    outer = [p for p in range(L) if p not in batch]
    offsets = np.zeros(1 << len(batch), dtype=np.int64)
    for j, p in enumerate(batch):
        offsets |= ((np.arange(1 << len(batch)) >> j) & 1) << p
    bit_in_batch = {p: j for j, p in enumerate(batch)}

    prepared = []  # (gate matrix, order, known positions, flip mask)
    for gid in kernel.gates:
        g = gates[gid]
        order = list(g.qubits)
        u = _gate_matrix(g, order)
        known = [i for i, q in enumerate(order) if mapping.phys_of_logical[q] not in bit_in_batch]
        prepared.append((u, order, known))

    out = shard.copy()
    # Frames per gate are shard- and batch-independent, so compute them once.
    frames = []
    f = frame
    for u, order, known in prepared:
        cu = _xconj(u, _local_mask(order, f))
        flip = _block_flip(cu, known)
        frames.append((cu, flip))
        for i in known:
            if (flip >> i) & 1:
                f ^= 1 << order[i]

    for o in range(1 << len(outer)):
        base = 0
        for j, p in enumerate(outer):
            base |= ((o >> j) & 1) << p
        idx = base + offsets
        block = out[idx]
        for (u, order, known), (cu, flip) in zip(prepared, frames):
            values = 0
            for i in known:
                p = mapping.phys_of_logical[order[i]]
                bit = (shard_index >> (p - L)) & 1 if p >= L else (base >> p) & 1
                values |= bit << i
            bit_of = {q: bit_in_batch[mapping.phys_of_logical[q]] for q in order
                      if mapping.phys_of_logical[q] in bit_in_batch}
            block = _apply_block(block, cu, order, known, values, flip, bit_of)
        out[idx] = block
    # Flips on local qubits outside the batch stay inside the shard: apply them now.
    local_flip = 0
    for q in range(mapping.n):
        if ((f ^ frame) >> q) & 1 and mapping.phys_of_logical[q] < L:
            local_flip |= 1 << mapping.phys_of_logical[q]
            f ^= 1 << q
    if local_flip:
        out = out[np.arange(1 << L) ^ local_flip]
    return out, f


# ---------------------------------------------------------------------------
# whole-plan simulation


@dataclass
class SimulationResult:
    state: np.ndarray
    comm: CommStats
    norms: list[float]
    final_mapping: QubitMapping


def check_plans(circuit: Circuit, staging: StagingPlan, kernel_plans: Sequence[KernelPlan],
                model: CostModel) -> list[str]:
    problems = list(validate_staging(staging, circuit))
    if len(kernel_plans) != staging.num_stages:
        problems.append(f"{len(kernel_plans)} kernel plans for {staging.num_stages} stages")
        return problems
    for k, (st, kp) in enumerate(zip(staging.stages, kernel_plans)):
        sub = circuit.subcircuit(st.gate_ids)
        problems += [f"stage {k}: {p}" for p in verify_plan(kp, sub, model)]
    return problems


def simulate(circuit: Circuit, staging: StagingPlan, kernel_plans: Sequence[KernelPlan],
             layout: ShardLayout | None = None, state: np.ndarray | str = "zero",
             model: CostModel | None = None, workers: int = 1) -> SimulationResult:
    """Execute every stage: remap, then run the stage's kernels on each shard."""
    model = model or CostModel.default()
    sh = staging.shape
    layout = layout or ShardLayout(sh.L, sh.R, sh.G)
    n = circuit.num_qubits
    if layout.n != n:
        raise ExecutorError(f"layout has {layout.n} qubits, circuit has {n}")
    problems = check_plans(circuit, staging, kernel_plans, model)
    if problems:
        raise PlanViolation(problems)
    if isinstance(state, str):
        if state != "zero":
            raise ExecutorError(f"unknown initial state {state!r}")
        psi = np.zeros(1 << n, dtype=complex)
        psi[0] = 1.0
    else:
        psi = np.asarray(state, dtype=complex)
        if num_qubits_of(psi) != n:
            raise ExecutorError("input state size does not match the circuit")
    by_id = circuit.gate_by_id()
    comm = CommStats()
    norms = []
    mapping = mapping_for_stage(staging.stages[0], layout) if staging.stages else \
        QubitMapping.identity(n)
    phys = to_physical(psi, mapping)
    frame = 0
    for k, (st, kp) in enumerate(zip(staging.stages, kernel_plans)):
        new = mapping_for_stage(st, layout, mapping)
        if k > 0:
            phys, delta = remap(phys, mapping, new, layout, frame)
            comm.add(delta, stage=k)
            frame = 0
        mapping = new
        sub = circuit.subcircuit(st.gate_ids)
        flips = swap_flips(sub, kp.realized_order)
        gates = {gid: by_id[gid].with_flip(flips.get(gid, ())) for gid in st.gate_ids}
        phys, frame = _run_stage(phys, kp.kernels, gates, mapping, layout, frame, model, workers)
        norms.append(float(np.linalg.norm(phys)))
    return SimulationResult(to_logical(phys, mapping, frame), comm, norms, mapping)


def _run_stage(phys, kernels, gates, mapping, layout, frame, model, workers):
    size = layout.shard_size
    out = np.empty_like(phys)
    frames = set()

    def work(s: int) -> int:
        shard = phys[s * size:(s + 1) * size]
        f = frame
        for kern in kernels:
            shard, f = execute_kernel(shard, kern, gates, mapping, layout, s, f, model=model)
        out[s * size:(s + 1) * size] = shard
        return f

    shards = range(layout.shard_count)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            frames.update(pool.map(work, shards))
    else:
        frames.update(work(s) for s in shards)
    if len(frames) != 1:
        raise ExecutorError("shards disagree on the X frame")
    return out, frames.pop()


# ---------------------------------------------------------------------------
# state files


def write_state(path: str | Path, state: np.ndarray, mapping: Sequence[int] | None = None
                ) -> None:
    """Raw little-endian (re, im) float64 pairs plus a ``.json`` sidecar.

    ``state`` is in logical order; the data is written in the physical order
    given by ``mapping`` (identity when omitted).
    """
    path = Path(path)
    state = np.asarray(state, dtype=complex)
    n = num_qubits_of(state)
    if mapping is not None:
        state = to_physical(state, QubitMapping(tuple(mapping)))
    arr = np.empty(2 * len(state), dtype="<f8")
    arr[0::2] = np.real(state)
    arr[1::2] = np.imag(state)
    path.write_bytes(arr.tobytes())
    side = {"n": n, "mapping": list(mapping) if mapping is not None else list(range(n))}
    Path(str(path) + ".json").write_text(json.dumps(side))


def read_state(path: str | Path) -> tuple[np.ndarray, list[int]]:
    """Inverse of :func:`write_state`; returns the logical-order state and mapping."""
    path = Path(path)
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    side_path = Path(str(path) + ".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else None
    state = raw[0::2] + 1j * raw[1::2]
    n = num_qubits_of(state)
    if side is not None and side["n"] != n:
        raise ExecutorError(f"sidecar says n={side['n']}, data has {n} qubits")
    mapping = side["mapping"] if side is not None else list(range(n))
    logical = to_logical(state.astype(complex), QubitMapping(tuple(mapping)))
    return logical, mapping
