"""Circuit representation, gate semantics, QASM I/O and built-in generators.

Conventions
-----------
Qubit ``q`` is bit ``q`` of a state index (qubit 0 is least significant).
For a gate acting on ``qubits = (q0, q1, ...)`` the unitary is indexed so that
``qubits[0]`` is the least-significant bit of the row/column index.
"""

from __future__ import annotations

import ast
import math
import re
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

TOL = 1e-12


class CircuitError(Exception):
    """Base class for circuit construction and parsing errors."""


class QasmSyntaxError(CircuitError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"line {line}, col {col}: {message}")
        self.line = line
        self.col = col


class UnsupportedGate(CircuitError):
    def __init__(self, name: str, line: int | None = None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unsupported gate or statement '{name}'{where}")
        self.name = name


class QubitOutOfRange(CircuitError):
    pass


class DuplicateOperand(QubitOutOfRange):
    """Raised when a gate names the same qubit twice."""


class InvalidSize(CircuitError):
    pass


class NotAPermutation(CircuitError):
    pass


class NoHostWarning(UserWarning):
    """Emitted when single-qubit gates have no multi-qubit gate to attach to."""


class GateKind(Enum):
    """Supported gate kinds: ``(qasm name, arity, number of params, control count)``."""

    H = ("h", 1, 0, 0)
    X = ("x", 1, 0, 0)
    Y = ("y", 1, 0, 0)
    Z = ("z", 1, 0, 0)
    S = ("s", 1, 0, 0)
    SDG = ("sdg", 1, 0, 0)
    T = ("t", 1, 0, 0)
    TDG = ("tdg", 1, 0, 0)
    RX = ("rx", 1, 1, 0)
    RY = ("ry", 1, 1, 0)
    RZ = ("rz", 1, 1, 0)
    P = ("p", 1, 1, 0)
    U3 = ("u3", 1, 3, 0)
    CX = ("cx", 2, 0, 1)
    CZ = ("cz", 2, 0, 1)
    CP = ("cp", 2, 1, 1)
    CCX = ("ccx", 3, 0, 2)
    SWAP = ("swap", 2, 0, 0)
    CU = ("cu", 2, 3, 1)

    def __init__(self, qasm: str, arity: int, nparams: int, ncontrols: int):
        self.qasm = qasm
        self.arity = arity
        self.nparams = nparams
        self.ncontrols = ncontrols

    @property
    def control_positions(self) -> tuple[int, ...]:
        return tuple(range(self.ncontrols))


_QASM_NAMES = {k.qasm: k for k in GateKind}
_QASM_ALIASES = {"cu1": GateKind.CP, "u1": GateKind.P}

# Kinds whose unitary is diagonal (every operand insular).
_DIAGONAL_KINDS = {GateKind.Z, GateKind.S, GateKind.SDG, GateKind.T, GateKind.TDG,
                   GateKind.RZ, GateKind.P, GateKind.CZ, GateKind.CP}
_ANTIDIAGONAL_KINDS = {GateKind.X, GateKind.Y}


@dataclass(frozen=True)
class Gate:
    """One gate of a circuit.

    ``attached_before``/``attached_after`` hold single-qubit gates folded into
    this gate by :func:`attach_single_qubit_gates`; they are replayed around the
    core gate in their original relative order.  ``flip`` lists logical qubits on
    which the gate is conjugated by X (a flipped control state for controls).
    """

    id: int
    kind: GateKind
    qubits: tuple[int, ...]
    params: tuple[float, ...] = ()
    attached_before: tuple["Gate", ...] = ()
    attached_after: tuple["Gate", ...] = ()
    flip: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "qubits", tuple(int(q) for q in self.qubits))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        object.__setattr__(self, "flip", frozenset(self.flip))
        if len(self.qubits) != self.kind.arity:
            raise CircuitError(f"{self.kind.name} expects {self.kind.arity} qubits, got {self.qubits}")
        if len(set(self.qubits)) != len(self.qubits):
            raise DuplicateOperand(f"{self.kind.name} has duplicate operands {self.qubits}")
        if len(self.params) != self.kind.nparams:
            raise CircuitError(f"{self.kind.name} expects {self.kind.nparams} params")

    @property
    def attached(self) -> tuple["Gate", ...]:
        return self.attached_before + self.attached_after

    @property
    def qubit_set(self) -> frozenset[int]:
        return frozenset(self.qubits)

    def core(self) -> "Gate":
        """This gate without attachments (flip restricted to its own qubits)."""
        return replace(self, attached_before=(), attached_after=(),
                       flip=self.flip & frozenset(self.qubits))

    def expand(self) -> list["Gate"]:
        """Primitive gates in execution order, each carrying the host's flips."""
        out = []
        for g in (*self.attached_before, self.core(), *self.attached_after):
            f = self.flip & frozenset(g.qubits)
            out.append(replace(g, attached_before=(), attached_after=(), flip=f))
        return out

    def with_flip(self, qubits: Iterable[int]) -> "Gate":
        """Return a copy whose flip set is XOR-ed with ``qubits``."""
        return replace(self, flip=self.flip ^ frozenset(qubits))

    def __str__(self) -> str:
        p = "(" + ",".join(f"{x:.6g}" for x in self.params) + ")" if self.params else ""
        return f"{self.kind.qasm}{p} " + ",".join(f"q{q}" for q in self.qubits)


@dataclass(frozen=True)
class Circuit:
    num_qubits: int
    gates: tuple[Gate, ...]

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        if self.num_qubits < 1:
            raise InvalidSize("circuit needs at least one qubit")
        for g in self.gates:
            for q in g.qubits:
                if not 0 <= q < self.num_qubits:
                    raise QubitOutOfRange(f"gate {g} uses qubit {q} outside [0,{self.num_qubits})")

    def __len__(self) -> int:
        return len(self.gates)

    @property
    def ids(self) -> list[int]:
        return [g.id for g in self.gates]

    def gate_by_id(self) -> dict[int, Gate]:
        return {g.id: g for g in self.gates}

    def subcircuit(self, ids: Sequence[int]) -> "Circuit":
        """Gates with the given ids, in the given order (ids are kept)."""
        by_id = self.gate_by_id()
        return Circuit(self.num_qubits, tuple(by_id[i] for i in ids))

    def primitive_gates(self) -> list[Gate]:
        return [p for g in self.gates for p in g.expand()]

    def flattened(self) -> "Circuit":
        """Undo attachment: every primitive gate as a top-level gate, renumbered."""
        prims = self.primitive_gates()
        return Circuit(self.num_qubits, tuple(replace(p, id=i) for i, p in enumerate(prims)))


def make_circuit(n: int, ops: Iterable[tuple]) -> Circuit:
    """Build a circuit from ``(kind, qubits[, params])`` tuples; ids are dense."""
    gates = []
    for i, item in enumerate(ops):
        kind, qubits = item[0], item[1]
        params = item[2] if len(item) > 2 else ()
        if isinstance(kind, str):
            kind = GateKind[kind.upper()]
        gates.append(Gate(i, kind, tuple(qubits), tuple(params)))
    return Circuit(n, tuple(gates))


# ---------------------------------------------------------------------------
# unitaries and insularity


def _u3(theta: float, phi: float, lam: float) -> np.ndarray:
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    return np.array([[c, -np.exp(1j * lam) * s],
                     [np.exp(1j * phi) * s, np.exp(1j * (phi + lam)) * c]], dtype=complex)


def _base_matrix(kind: GateKind, params: tuple[float, ...]) -> np.ndarray:
    """Matrix of the non-controlled part (the whole gate for uncontrolled kinds)."""
    r2 = 1 / math.sqrt(2)
    K = GateKind
    if kind is K.H:
        return np.array([[r2, r2], [r2, -r2]], dtype=complex)
    if kind in (K.X, K.CX, K.CCX):
        return np.array([[0, 1], [1, 0]], dtype=complex)
    if kind is K.Y:
        return np.array([[0, -1j], [1j, 0]], dtype=complex)
    if kind in (K.Z, K.CZ):
        return np.diag([1, -1]).astype(complex)
    if kind is K.S:
        return np.diag([1, 1j])
    if kind is K.SDG:
        return np.diag([1, -1j])
    if kind is K.T:
        return np.diag([1, np.exp(1j * math.pi / 4)])
    if kind is K.TDG:
        return np.diag([1, np.exp(-1j * math.pi / 4)])
    if kind is K.RX:
        c, s = math.cos(params[0] / 2), math.sin(params[0] / 2)
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
    if kind is K.RY:
        c, s = math.cos(params[0] / 2), math.sin(params[0] / 2)
        return np.array([[c, -s], [s, c]], dtype=complex)
    if kind is K.RZ:
        return np.diag([np.exp(-0.5j * params[0]), np.exp(0.5j * params[0])])
    if kind in (K.P, K.CP):
        return np.diag([1, np.exp(1j * params[0])])
    if kind in (K.U3, K.CU):
        return _u3(*params)
    if kind is K.SWAP:
        m = np.zeros((4, 4), dtype=complex)
        m[0, 0] = m[3, 3] = m[1, 2] = m[2, 1] = 1
        return m
    raise CircuitError(f"no matrix for {kind}")


def _controlled(base: np.ndarray, ncontrols: int) -> np.ndarray:
    """Controls occupy the low operand positions; the target block sits where all controls are 1."""
    t = base.shape[0]
    c = 1 << ncontrols
    full = np.eye(c * t, dtype=complex)
    # index = ctrl_bits + c * target_bits
    rows = [(c - 1) + c * r for r in range(t)]
    full[np.ix_(rows, rows)] = base
    return full


def _xconj(u: np.ndarray, positions: Iterable[int]) -> np.ndarray:
    mask = 0
    for p in positions:
        mask |= 1 << p
    if not mask:
        return u
    perm = np.arange(u.shape[0]) ^ mask
    return u[np.ix_(perm, perm)]


def unitary_of(gate: Gate) -> np.ndarray:
    """Unitary of the core gate (attachments excluded), with any control-state flips applied."""
    base = _base_matrix(gate.kind, gate.params)
    u = _controlled(base, gate.kind.ncontrols) if gate.kind.ncontrols else base
    if gate.flip:
        u = _xconj(u, [i for i, q in enumerate(gate.qubits) if q in gate.flip])
    return u


def is_diagonal(u: np.ndarray, tol: float = TOL) -> bool:
    return bool(np.all(np.abs(u - np.diag(np.diag(u))) < tol))


def is_antidiagonal(u: np.ndarray, tol: float = TOL) -> bool:
    flipped = u[:, ::-1]
    return is_diagonal(flipped, tol)


def _single_qubit_insular(gate: Gate) -> bool:
    if gate.kind in _DIAGONAL_KINDS or gate.kind in _ANTIDIAGONAL_KINDS:
        return True
    if gate.kind is GateKind.H:
        return False
    u = _base_matrix(gate.kind, gate.params)
    return is_diagonal(u) or is_antidiagonal(u)


def _core_insular_positions(gate: Gate) -> set[int]:
    k = gate.kind
    if k.arity == 1:
        return {0} if _single_qubit_insular(gate) else set()
    if k in (GateKind.CZ, GateKind.CP):
        return {0, 1}
    if k is GateKind.CU:
        if is_diagonal(_u3(*gate.params)):
            return {0, 1}
        return {0}
    return set(k.control_positions)


def insular_qubits(gate: Gate) -> set[int]:
    """Operand positions of ``gate`` that are insular.

    An attached single-qubit gate that is not insular makes the matching host
    operand non-insular.
    """
    pos = _core_insular_positions(gate)
    for a in gate.attached:
        if not _single_qubit_insular(a):
            pos.discard(gate.qubits.index(a.qubits[0]))
    return pos


def insular_set(gate: Gate) -> frozenset[int]:
    """Logical qubits on which ``gate`` (with attachments) is insular."""
    return frozenset(gate.qubits[p] for p in insular_qubits(gate))


def non_insular_set(gate: Gate) -> frozenset[int]:
    return frozenset(gate.qubits) - insular_set(gate)


def flip_set(gate: Gate) -> frozenset[int]:
    """Insular qubits on which the gate (with attachments) swaps |0> and |1>.

    Only anti-diagonal single-qubit primitives flip; controls and diagonal
    gates keep the basis state.  The parity over all primitives decides.
    """
    ins = insular_set(gate)
    out: set[int] = set()
    for p in gate.expand():
        if p.kind.arity == 1 and p.qubits[0] in ins:
            if not is_diagonal(unitary_of(p)):
                out ^= {p.qubits[0]}
    return frozenset(out)


def check_unitary(u: np.ndarray, tol: float = TOL) -> bool:
    return bool(np.max(np.abs(u @ u.conj().T - np.eye(u.shape[0]))) < tol)


# ---------------------------------------------------------------------------
# dependencies


def dependencies(circuit: Circuit) -> set[tuple[int, int]]:
    """Adjacent-on-a-qubit gate pairs ``(earlier id, later id)``."""
    last: dict[int, int] = {}
    edges: set[tuple[int, int]] = set()
    for g in circuit.gates:
        for q in g.qubits:
            if q in last:
                edges.add((last[q], g.id))
            last[q] = g.id
    return edges


def topologically_equivalent(a: Sequence[int], b: Sequence[int],
                             deps: Iterable[tuple[int, int]]) -> bool:
    if sorted(a) != sorted(b):
        raise NotAPermutation("sequences do not contain the same gate ids")
    pa = {g: i for i, g in enumerate(a)}
    pb = {g: i for i, g in enumerate(b)}
    for u, v in deps:
        if u in pa and v in pa:
            if pa[u] > pa[v] or pb[u] > pb[v]:
                return False
    return True


def gates_commute_insular(a: Gate, b: Gate) -> bool:
    """True if two gates may be swapped because every shared qubit is insular to both.

    A shared qubit on which both gates flip the basis state is treated as a
    conflict; otherwise the swap is realized by conjugating the non-flipping
    gate with X on that qubit (see :func:`swap_flips`).
    """
    shared = a.qubit_set & b.qubit_set
    if not shared:
        return True
    if not shared <= insular_set(a) or not shared <= insular_set(b):
        return False
    return not (shared & flip_set(a) & flip_set(b))


def conflict_pairs(circuit: Circuit, insular_aware: bool = True) -> set[tuple[int, int]]:
    """All ordered pairs of gates that must keep their relative order."""
    gates = circuit.gates
    out = set()
    for i, a in enumerate(gates):
        for b in gates[i + 1:]:
            if a.qubit_set & b.qubit_set:
                if insular_aware and gates_commute_insular(a, b):
                    continue
                out.add((a.id, b.id))
    return out


def swap_flips(circuit: Circuit, order: Sequence[int]) -> dict[int, frozenset[int]]:
    """X-conjugations needed when ``order`` swaps gates that share insular qubits.

    For every pair reordered relative to ``circuit``, the gate that does not
    flip the shared qubit is conjugated (a control on that qubit now triggers
    on |0>).  Returns gate id -> qubits to flip, for gates needing any.
    """
    pos = {g: i for i, g in enumerate(order)}
    gates = circuit.gates
    flips: dict[int, set[int]] = {}
    for i, a in enumerate(gates):
        fa = flip_set(a)
        for b in gates[i + 1:]:
            shared = a.qubit_set & b.qubit_set
            if not shared or pos[a.id] < pos[b.id]:
                continue
            fb = flip_set(b)
            for q in shared:
                if q in fa and q not in fb:
                    flips.setdefault(b.id, set()).symmetric_difference_update({q})
                elif q in fb and q not in fa:
                    flips.setdefault(a.id, set()).symmetric_difference_update({q})
    return {g: frozenset(s) for g, s in flips.items() if s}


# ---------------------------------------------------------------------------
# attachment


def attach_single_qubit_gates(circuit: Circuit) -> Circuit:
    """Fold every single-qubit gate into a neighbouring multi-qubit gate.

    A single-qubit gate goes to the next multi-qubit gate on its qubit, or to
    the previous one when no later one exists.  Runs of single-qubit gates
    travel together.  Single-qubit gates on a qubit that no multi-qubit gate
    touches stay top-level.  Top-level gates are renumbered densely.
    """
    gates = circuit.gates
    multi = [i for i, g in enumerate(gates) if g.kind.arity > 1]
    if not multi:
        if gates:
            warnings.warn("no multi-qubit gate to attach single-qubit gates to", NoHostWarning)
        return circuit
    n = circuit.num_qubits
    next_multi: list[int | None] = [None] * len(gates)
    upcoming: dict[int, int] = {}
    for i in range(len(gates) - 1, -1, -1):
        g = gates[i]
        if g.kind.arity == 1:
            next_multi[i] = upcoming.get(g.qubits[0])
        else:
            for q in g.qubits:
                upcoming[q] = i
    prev_multi: list[int | None] = [None] * len(gates)
    seen: dict[int, int] = {}
    for i, g in enumerate(gates):
        if g.kind.arity == 1:
            prev_multi[i] = seen.get(g.qubits[0])
        else:
            for q in g.qubits:
                seen[q] = i
    before: dict[int, list[Gate]] = {i: [] for i in multi}
    after: dict[int, list[Gate]] = {i: [] for i in multi}
    placed = set()
    for i, g in enumerate(gates):
        if g.kind.arity > 1:
            continue
        if next_multi[i] is not None:
            before[next_multi[i]].append(g)
        elif prev_multi[i] is not None:
            after[prev_multi[i]].append(g)
        else:
            continue
        placed.add(i)
    out = []
    for i, h in enumerate(gates):
        if h.kind.arity > 1:
            h = replace(h, attached_before=h.attached_before + tuple(before[i]),
                        attached_after=tuple(after[i]) + h.attached_after)
        elif i in placed:
            continue
        out.append(replace(h, id=len(out)))
    return Circuit(n, tuple(out))


# ---------------------------------------------------------------------------
# generators


def generate(family: str, n: int) -> Circuit:
    if n < 2:
        raise InvalidSize(f"generator needs n >= 2, got {n}")
    ops: list[tuple] = []
    if family == "ghz":
        ops.append(("H", (0,)))
        ops += [("CX", (i, i + 1)) for i in range(n - 1)]
    elif family == "qft":
        for i in range(n):
            ops.append(("H", (i,)))
            for j in range(i + 1, n):
                ops.append(("CP", (j, i), (math.pi / 2 ** (j - i),)))
    elif family == "graphstate_ring":
        ops += [("H", (i,)) for i in range(n)]
        ops += [("CZ", (i, (i + 1) % n)) for i in range(n)]
    else:
        raise CircuitError(f"unknown family '{family}'")
    return make_circuit(n, ops)


FAMILIES = ("ghz", "qft", "graphstate_ring")


# ---------------------------------------------------------------------------
# QASM


_ALLOWED_EXPR = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name,
                 ast.Load, ast.Add, ast.Sub, ast.Mult, ast.Div, ast.USub, ast.UAdd)


def _eval_angle(text: str, line: int, col: int) -> float:
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError:
        raise QasmSyntaxError(f"bad expression '{text.strip()}'", line, col) from None
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_EXPR):
            raise QasmSyntaxError(f"unsupported expression '{text.strip()}'", line, col)
        if isinstance(node, ast.Name) and node.id != "pi":
            raise QasmSyntaxError(f"unknown identifier '{node.id}'", line, col)
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise QasmSyntaxError("non-numeric constant", line, col)
    return float(eval(compile(tree, "<qasm>", "eval"), {"__builtins__": {}}, {"pi": math.pi}))


_GATE_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*(.*)$", re.S)
_ARG_RE = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)\s*\[\s*(\d+)\s*\]$")
_IGNORED = {"barrier"}
_REJECTED = {"creg", "measure", "reset", "if", "gate", "opaque"}


def _statements(text: str):
    """Yield (statement, line, col) with comments stripped."""
    buf, start = [], None
    line, col = 1, 1
    i = 0
    while i < len(text):
        ch = text[i]
        if text.startswith("//", i):
            while i < len(text) and text[i] != "\n":
                i += 1
            continue
        if ch == ";":
            stmt = "".join(buf).strip()
            if stmt:
                yield stmt, start[0], start[1]
            buf, start = [], None
        else:
            if start is None and not ch.isspace():
                start = (line, col)
            if start is not None:
                buf.append(ch)
        if ch == "\n":
            line, col = line + 1, 1
        else:
            col += 1
        i += 1
    rest = "".join(buf).strip()
    if rest:
        raise QasmSyntaxError("missing ';'", start[0], start[1])


def parse_qasm(text: str) -> Circuit:
    n: int | None = None
    reg = None
    gates: list[Gate] = []
    for stmt, line, col in _statements(text):
        head = stmt.split(None, 1)[0] if stmt.split() else ""
        if head == "OPENQASM":
            continue
        if head == "include":
            continue
        if head == "qreg":
            m = re.match(r"^qreg\s+([A-Za-z_]\w*)\s*\[\s*(\d+)\s*\]$", stmt)
            if not m:
                raise QasmSyntaxError("malformed qreg", line, col)
            if reg is not None:
                raise QasmSyntaxError("only one quantum register is supported", line, col)
            reg, n = m.group(1), int(m.group(2))
            continue
        m = _GATE_RE.match(stmt)
        if not m:
            raise QasmSyntaxError(f"cannot parse '{stmt}'", line, col)
        name, params_txt, args_txt = m.group(1), m.group(2), m.group(3)
        if name in _IGNORED:
            continue
        if name in _REJECTED or name.startswith("creg"):
            raise UnsupportedGate(name, line)
        kind = _QASM_NAMES.get(name) or _QASM_ALIASES.get(name)
        if kind is None:
            raise UnsupportedGate(name, line)
        if reg is None:
            raise QasmSyntaxError("gate before qreg declaration", line, col)
        params = []
        if params_txt is not None and params_txt.strip():
            params = [_eval_angle(p, line, col) for p in params_txt.split(",")]
        if len(params) != kind.nparams:
            raise QasmSyntaxError(f"{name} expects {kind.nparams} parameter(s)", line, col)
        qubits = []
        for a in args_txt.split(","):
            am = _ARG_RE.match(a.strip())
            if not am:
                raise QasmSyntaxError(f"bad operand '{a.strip()}'", line, col)
            if am.group(1) != reg:
                raise QasmSyntaxError(f"unknown register '{am.group(1)}'", line, col)
            q = int(am.group(2))
            if q >= n:
                raise QubitOutOfRange(f"line {line}: qubit {q} outside register of size {n}")
            qubits.append(q)
        if len(qubits) != kind.arity:
            raise QasmSyntaxError(f"{name} expects {kind.arity} operand(s)", line, col)
        if len(set(qubits)) != len(qubits):
            raise DuplicateOperand(f"line {line}: duplicate operand in {name}")
        gates.append(Gate(len(gates), kind, tuple(qubits), tuple(params)))
    if n is None:
        raise QasmSyntaxError("no qreg declared", 1, 1)
    return Circuit(n, tuple(gates))


def render_qasm(circuit: Circuit) -> str:
    """Debug serializer emitting the supported subset (attachments are flattened)."""
    lines = ["OPENQASM 2.0;", 'include "qelib1.inc";', f"qreg q[{circuit.num_qubits}];"]
    for g in circuit.primitive_gates():
        if g.flip:
            raise CircuitError("gates with flipped controls cannot be rendered as QASM")
        p = "(" + ",".join(repr(x) for x in g.params) + ")" if g.params else ""
        lines.append(f"{g.kind.qasm}{p} " + ",".join(f"q[{q}]" for q in g.qubits) + ";")
    return "\n".join(lines) + "\n"
