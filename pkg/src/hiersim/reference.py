"""Dense state-vector oracle and comparison helpers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .circuit import Circuit, Gate, unitary_of

MAX_REFERENCE_QUBITS = 26


class TooLarge(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


def num_qubits_of(vec: np.ndarray) -> int:
    n = int(vec.shape[0]).bit_length() - 1
    if 1 << n != vec.shape[0]:
        raise DimensionMismatch(f"length {vec.shape[0]} is not a power of two")
    return n


def zero_state(n: int) -> np.ndarray:
    v = np.zeros(1 << n, dtype=complex)
    v[0] = 1.0
    return v


def basis_state(n: int, index: int) -> np.ndarray:
    v = np.zeros(1 << n, dtype=complex)
    v[index] = 1.0
    return v


def random_state(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=1 << n) + 1j * rng.normal(size=1 << n)
    return v / np.linalg.norm(v)


def pair_index(q: int, i: int) -> tuple[int, int]:
    """The i-th amplitude pair touched by a gate on qubit q: (f(i), f(i) + 2^q)."""
    f = ((i >> q) << (q + 1)) + (i & ((1 << q) - 1))
    return f, f + (1 << q)


def apply_matrix(arr: np.ndarray, mat: np.ndarray, bits: Sequence[int]) -> np.ndarray:
    """Apply ``mat`` to the index bits ``bits`` of ``arr`` (first axis, length 2^n).

    ``bits[0]`` is the least-significant index of ``mat``.  Extra trailing axes of
    ``arr`` are carried along, which lets the same routine build fused matrices.
    Returns a new array.
    """
    k = len(bits)
    if k == 0:
        return arr * mat.reshape(())
    n = num_qubits_of(arr)
    rest = arr.shape[1:]
    t = arr.reshape((2,) * n + rest)
    axes = [n - 1 - b for b in reversed(bits)]
    m = mat.reshape((2,) * (2 * k))
    out = np.tensordot(m, t, axes=(list(range(k, 2 * k)), axes))
    out = np.moveaxis(out, list(range(k)), axes)
    return out.reshape(arr.shape)


def apply_gate_dense(state: np.ndarray, gate: Gate) -> np.ndarray:
    """Apply one primitive gate to a dense logical-order state (returns a new array)."""
    u = unitary_of(gate)
    if len(gate.qubits) == 1:
        q = gate.qubits[0]
        n = num_qubits_of(state)
        i = np.arange(1 << (n - 1))
        f = ((i >> q) << (q + 1)) + (i & ((1 << q) - 1))
        g = f + (1 << q)
        out = state.copy()
        a, b = state[f], state[g]
        out[f] = u[0, 0] * a + u[0, 1] * b
        out[g] = u[1, 0] * a + u[1, 1] * b
        return out
    return apply_matrix(state, u, gate.qubits)


def simulate_reference(circuit: Circuit, state: np.ndarray | None = None) -> np.ndarray:
    """Apply every primitive gate left to right (attachments are replayed in place)."""
    n = circuit.num_qubits
    if n > MAX_REFERENCE_QUBITS:
        raise TooLarge(f"{n} qubits exceeds the reference limit of {MAX_REFERENCE_QUBITS}")
    v = zero_state(n) if state is None else np.array(state, dtype=complex)
    if v.shape != (1 << n,):
        raise DimensionMismatch(f"state has shape {v.shape}, expected ({1 << n},)")
    for g in circuit.primitive_gates():
        v = apply_gate_dense(v, g)
    return v


@dataclass(frozen=True)
class ComparisonReport:
    max_abs_diff: float
    global_phase_aligned: bool
    norm_a: float
    norm_b: float


def compare(a: np.ndarray, b: np.ndarray, align_phase: bool = False) -> ComparisonReport:
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")
    if align_phase:
        inner = np.vdot(b, a)
        if abs(inner) > 0:
            b = b * (inner / abs(inner))
    return ComparisonReport(
        max_abs_diff=float(np.max(np.abs(a - b))) if a.size else 0.0,
        global_phase_aligned=align_phase,
        norm_a=float(np.linalg.norm(a)),
        norm_b=float(np.linalg.norm(b)),
    )
