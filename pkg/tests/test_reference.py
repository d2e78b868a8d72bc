import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiersim.circuit import Circuit, generate, make_circuit, unitary_of
from hiersim.reference import (
    DimensionMismatch, TooLarge, apply_gate_dense, apply_matrix, basis_state, compare,
    pair_index, random_state, simulate_reference, zero_state,
)

from oracles import random_circuit


def _bitrev(k: int, n: int) -> int:
    return int(format(k, f"0{n}b")[::-1], 2)


def _kron_apply(state, gate, n):
    """Dense full-matrix application through an explicit 2^n x 2^n operator."""
    u = unitary_of(gate)
    k = len(gate.qubits)
    full = np.zeros((1 << n, 1 << n), dtype=complex)
    for col in range(1 << n):
        sub_in = sum(((col >> q) & 1) << i for i, q in enumerate(gate.qubits))
        rest = col & ~sum(1 << q for q in gate.qubits)
        for sub_out in range(1 << k):
            row = rest | sum(((sub_out >> i) & 1) << q for i, q in enumerate(gate.qubits))
            full[row, col] = u[sub_out, sub_in]
    return full @ state


def test_ghz3():
    v = simulate_reference(generate("ghz", 3))
    expect = np.zeros(8, dtype=complex)
    expect[0] = expect[7] = 1 / math.sqrt(2)
    assert np.max(np.abs(v - expect)) < 1e-15


def test_empty_circuit_is_identity():
    rng = np.random.default_rng(1)
    v0 = random_state(3, rng)
    assert np.array_equal(simulate_reference(Circuit(3, ()), v0), v0)


@pytest.mark.parametrize("n", [3, 4, 5])
def test_qft_on_basis_states_matches_closed_form(n):
    """No terminal swaps: output k carries phase exp(2 pi i rev(x) k / 2^n)."""
    N = 1 << n
    for x in range(N):
        v = simulate_reference(generate("qft", n), basis_state(n, x))
        k = np.arange(N)
        expect = np.exp(2j * np.pi * _bitrev(x, n) * k / N) / math.sqrt(N)
        assert np.max(np.abs(v - expect)) < 1e-12


def test_qft4_on_0001_has_equal_magnitudes():
    v = simulate_reference(generate("qft", 4), basis_state(4, 1))
    assert np.allclose(np.abs(v), 0.25, atol=1e-14)


def test_pair_index():
    assert pair_index(0, 0) == (0, 1)
    assert pair_index(1, 1) == (1, 3)
    assert pair_index(2, 5) == (9, 13)
    # every index appears exactly once over all pairs
    for q in range(4):
        seen = sorted(x for i in range(8) for x in pair_index(q, i))
        assert seen == list(range(16))


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000))
def test_gate_application_matches_full_operator(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 5)
    c = random_circuit(rng, n, 1)
    g = c.gates[0]
    v = random_state(n, np.random.default_rng(seed))
    assert np.max(np.abs(apply_gate_dense(v, g) - _kron_apply(v, g, n))) < 1e-12


def test_apply_matrix_carries_trailing_axes():
    rng = np.random.default_rng(3)
    m = np.linalg.qr(rng.normal(size=(4, 4)) + 1j * rng.normal(size=(4, 4)))[0]
    block = rng.normal(size=(8, 5)) + 0j
    out = apply_matrix(block, m, [2, 0])
    for col in range(5):
        assert np.allclose(out[:, col], apply_matrix(block[:, col], m, [2, 0]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_norm_preserved(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 7)
    c = random_circuit(rng, n, rng.randint(0, 200))
    v = simulate_reference(c, random_state(n, np.random.default_rng(seed)))
    assert abs(np.linalg.norm(v) - 1) < 1e-10


def test_compare_examples():
    x = random_state(3, np.random.default_rng(0))
    assert compare(x, x).max_abs_diff == 0
    r = compare(x, np.exp(0.7j) * x, align_phase=True)
    assert r.max_abs_diff < 1e-12 and r.global_phase_aligned
    assert compare(x, np.exp(0.7j) * x).max_abs_diff > 0.1
    assert compare(basis_state(1, 0), basis_state(1, 1)).max_abs_diff == 1.0
    with pytest.raises(DimensionMismatch):
        compare(zero_state(2), zero_state(3))


def test_guards():
    with pytest.raises(TooLarge):
        simulate_reference(make_circuit(27, [("H", [0])]))
    with pytest.raises(DimensionMismatch):
        simulate_reference(generate("ghz", 3), zero_state(2))
