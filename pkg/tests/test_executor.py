import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiersim.circuit import Gate, GateKind, generate, make_circuit
from hiersim.executor import (
    CommStats, LocalityViolation, NotInsular, PlanViolation, QubitMapping, ShardLayout,
    execute_kernel, fuse_kernel_unitary, mapping_for_stage, read_state, remap, simulate,
    specialize_gate, to_logical, to_physical, write_state,
)
from hiersim.kernelizer import CostModel, Kernel, KernelKind, KernelPlan, ordered_kernelize
from hiersim.pipeline import run_pipeline
from hiersim.reference import apply_gate_dense, basis_state, random_state, simulate_reference
from hiersim.staging import MachineShape, Stage, StagingPlan

from oracles import enumerate_moves, random_circuit, random_kernel_case

DEFAULT = CostModel.default()


def test_layout_sizes():
    lay = ShardLayout(3, 1, 2)
    assert (lay.n, lay.shard_size, lay.node_size, lay.node_count, lay.shard_count) == (6, 8, 16, 4, 8)


def test_mapping_for_stage_keeps_slots():
    lay = ShardLayout(2, 1, 1)
    a = mapping_for_stage(Stage((), (0, 1), (2,), (3,)), lay)
    assert a.phys_of_logical == (0, 1, 2, 3)
    b = mapping_for_stage(Stage((), (1, 3), (2,), (0,)), lay, a)
    # q1 stays local in slot 1, q3 takes the freed local slot 0, q0 takes global slot 3
    assert b.phys_of_logical == (3, 1, 2, 0)
    assert b.classes(lay) == (frozenset({1, 3}), frozenset({2}), frozenset({0}))


# -- remapping

def _remap_counts(new_phys):
    lay = ShardLayout(1, 1, 1)
    v = np.arange(8, dtype=complex) + 1
    _, stats = remap(v, QubitMapping((0, 1, 2)), QubitMapping(new_phys), lay)
    return stats


def test_remap_regional_change_is_intra_node():
    stats = _remap_counts((1, 0, 2))
    assert stats.inter_node_amplitudes_moved == 0
    assert stats.intra_node_amplitudes_moved == 4
    assert (stats.intra_node_amplitudes_moved, stats.inter_node_amplitudes_moved) == \
        enumerate_moves((0, 1, 2), (1, 0, 2), 1, 1)
    assert stats.local_swaps == 1 and stats.global_swaps == 0


def test_remap_global_change_is_inter_node():
    stats = _remap_counts((2, 1, 0))
    assert stats.inter_node_amplitudes_moved == 4
    assert (stats.intra_node_amplitudes_moved, stats.inter_node_amplitudes_moved) == \
        enumerate_moves((0, 1, 2), (2, 1, 0), 1, 1)
    assert stats.local_swaps == 1 and stats.global_swaps == 1


def test_remap_identity_moves_nothing():
    s = _remap_counts((0, 1, 2))
    assert s.totals() == {"intra_node_amplitudes_moved": 0, "inter_node_amplitudes_moved": 0,
                          "local_swaps": 0, "global_swaps": 0}


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10_000))
def test_remap_is_a_permutation_with_exact_counts(seed):
    rng = random.Random(seed)
    n = rng.randint(1, 7)
    L = rng.randint(1, n)
    R = rng.randint(0, n - L)
    lay = ShardLayout(L, R, n - L - R)
    a, b = list(range(n)), list(range(n))
    rng.shuffle(a)
    rng.shuffle(b)
    old, new = QubitMapping(tuple(a)), QubitMapping(tuple(b))
    psi = random_state(n, np.random.default_rng(seed))
    phys = to_physical(psi, old)
    out, stats = remap(phys, old, new, lay)
    assert sorted(out.tolist(), key=lambda z: (z.real, z.imag)) == \
        sorted(phys.tolist(), key=lambda z: (z.real, z.imag))
    assert np.array_equal(to_logical(out, new), psi)
    assert (stats.intra_node_amplitudes_moved, stats.inter_node_amplitudes_moved) == \
        enumerate_moves(a, b, L, R)
    lo = lay.L + lay.R
    same_globals = all((a[q] >= lo) == (b[q] >= lo) and (a[q] < lo or a[q] == b[q])
                       for q in range(n))
    assert (stats.inter_node_amplitudes_moved == 0) == same_globals


def test_comm_stats_accumulate():
    total = CommStats()
    total.add(CommStats(4, 0, 1, 0), stage=1)
    total.add(CommStats(0, 4, 1, 1), stage=2)
    assert total.totals() == {"intra_node_amplitudes_moved": 4, "inter_node_amplitudes_moved": 4,
                              "local_swaps": 2, "global_swaps": 1}
    assert [r["stage"] for r in total.to_json()["per_stage"]] == [1, 2]
    lines = total.to_csv().strip().splitlines()
    assert lines[0].startswith("stage,") and lines[-1].startswith("total,")


# -- specialization and fusion

def test_specialize_controls_and_phases():
    m = QubitMapping((0, 1))
    cx = Gate(0, GateKind.CX, (0, 1))
    assert specialize_gate(cx, {0: 0}, m).kind == "identity"
    one = specialize_gate(cx, {0: 1}, m)
    assert one.kind == "matrix" and one.qubits == (1,)
    assert np.array_equal(one.matrix, [[0, 1], [1, 0]])
    z = specialize_gate(Gate(0, GateKind.Z, (1,)), {1: 1}, m)
    assert z.kind == "phase" and z.matrix[0, 0] == -1
    x = specialize_gate(Gate(0, GateKind.X, (1,)), {1: 0}, m)
    assert x.kind == "phase" and x.flip == {1}
    flipped = specialize_gate(cx.with_flip({0}), {0: 0}, m)
    assert flipped.kind == "matrix"
    with pytest.raises(NotInsular):
        specialize_gate(cx, {1: 0}, m)


def test_fuse_examples():
    c = make_circuit(2, [("H", [0]), ("H", [0]), ("CX", [0, 1]), ("H", [1])])
    by = c.gate_by_id()
    u, order = fuse_kernel_unitary(Kernel((0,), KernelKind.FUSION, frozenset({0}), 1), by)
    assert order == (0,) and np.allclose(u, np.array([[1, 1], [1, -1]]) / math.sqrt(2))
    u, _ = fuse_kernel_unitary(Kernel((0, 1), KernelKind.FUSION, frozenset({0}), 1), by)
    assert np.allclose(u, np.eye(2), atol=1e-15)
    u, order = fuse_kernel_unitary(Kernel((0, 2), KernelKind.FUSION, frozenset({0, 1}), 1), by)
    for col in range(4):
        v = apply_gate_dense(apply_gate_dense(basis_state(2, col), by[0]), by[2])
        assert np.allclose(u[:, col], v, atol=1e-15)
    assert np.max(np.abs(u @ u.conj().T - np.eye(4))) < 1e-10


def test_execute_kernel_locality_violation():
    c = make_circuit(2, [("H", [1])])
    k = Kernel((0,), KernelKind.FUSION, frozenset({1}), 1)
    with pytest.raises(LocalityViolation):
        execute_kernel(np.ones(2, dtype=complex), k, c.gate_by_id(), QubitMapping((0, 1)),
                       ShardLayout(1, 0, 1), 0)


def test_identity_kernel_leaves_shard():
    c = make_circuit(2, [("H", [0]), ("H", [0])])
    k = Kernel((0, 1), KernelKind.FUSION, frozenset({0}), 1)
    v = np.array([0.6, 0.8j, 0, 0], dtype=complex)
    for kind in KernelKind:
        out, frame = execute_kernel(v, k, c.gate_by_id(), QubitMapping((0, 1)),
                                    ShardLayout(2, 0, 0), 0, kind=kind)
        assert np.allclose(out, v, atol=1e-15) and frame == 0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 100_000))
def test_fusion_and_shared_memory_agree(seed):
    kernel, gates, mapping, layout, s, shard, frame = random_kernel_case(random.Random(seed))
    a, fa = execute_kernel(shard, kernel, gates, mapping, layout, s, frame, kind=KernelKind.FUSION)
    b, fb = execute_kernel(shard, kernel, gates, mapping, layout, s, frame, kind=KernelKind.SHM)
    assert fa == fb
    assert np.max(np.abs(a - b)) < 1e-12


# -- end to end

def test_ghz3_end_to_end():
    out = run_pipeline(generate("ghz", 3), MachineShape(2, 0, 1))
    expect = np.zeros(8, dtype=complex)
    expect[0] = expect[7] = 1 / math.sqrt(2)
    assert np.max(np.abs(out.result.state - expect)) < 1e-12


def test_qft6_with_regional_and_global_qubits():
    c = generate("qft", 6)
    out = run_pipeline(c, MachineShape(3, 1, 2))
    assert np.max(np.abs(out.result.state - simulate_reference(c))) < 1e-9


@pytest.mark.parametrize("kernelizer", ["dp", "ordered", "greedy"])
@pytest.mark.parametrize("fam", ["ghz", "qft", "graphstate_ring"])
def test_corpus_end_to_end(fam, kernelizer):
    for n in (6, 8):
        c = generate(fam, n)
        for L, R, G in ((n, 0, 0), (n - 2, 1, 1), (n - 4, 2, 2)):
            out = run_pipeline(c, MachineShape(L, R, G), kernelizer=kernelizer)
            assert np.max(np.abs(out.result.state - simulate_reference(c))) < 1e-9
            assert all(abs(x - 1) < 1e-9 for x in out.result.norms)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000))
def test_random_circuits_random_states(seed):
    rng = random.Random(seed)
    n = rng.randint(2, 7)
    c = random_circuit(rng, n, rng.randint(1, 25))
    need = 3 if any(g.kind is GateKind.CCX for g in c.gates) else 2
    L = rng.randint(min(need, n), n)
    R = rng.randint(0, n - L)
    psi = random_state(n, np.random.default_rng(seed))
    out = run_pipeline(c, MachineShape(L, R, n - L - R), state=psi,
                       kernelizer=rng.choice(["dp", "ordered"]), prune_T=rng.choice([4, 500]))
    assert np.max(np.abs(out.result.state - simulate_reference(c, psi))) < 1e-9


def test_shards_are_independent():
    c = generate("qft", 8)
    psi = random_state(8, np.random.default_rng(4))
    one = run_pipeline(c, MachineShape(4, 2, 2), state=psi, workers=1).result.state
    many = run_pipeline(c, MachineShape(4, 2, 2), state=psi, workers=4).result.state
    assert np.array_equal(one, many)


def test_repeated_partition_costs_nothing():
    c = make_circuit(3, [("H", [0]), ("H", [0])])
    st_ = Stage((0,), (0,), (1,), (2,))
    st2 = Stage((1,), (0,), (1,), (2,))
    plan = StagingPlan([st_, st2], 0.0, MachineShape(1, 1, 1))
    kps = [ordered_kernelize(c.subcircuit([0]), DEFAULT), ordered_kernelize(c.subcircuit([1]), DEFAULT)]
    res = simulate(c, plan, kps)
    assert res.comm.per_stage[0]["inter_node_amplitudes_moved"] == 0
    assert res.comm.per_stage[0]["intra_node_amplitudes_moved"] == 0
    assert np.allclose(res.state, basis_state(3, 0))


def test_bad_plan_is_rejected_before_running():
    c = generate("ghz", 3)
    plan = StagingPlan([Stage((0, 1, 2), (0,), (1,), (2,))], 0.0, MachineShape(1, 1, 1))
    kp = ordered_kernelize(c, DEFAULT)
    with pytest.raises(PlanViolation):
        simulate(c, plan, [kp])
    good = StagingPlan([Stage((0, 1, 2), (0, 1, 2), (), ())], 0.0, MachineShape(3, 0, 0))
    with pytest.raises(PlanViolation):
        simulate(c, good, [KernelPlan(kp.kernels[1:], kp.total_cost, kp.realized_order)])


def test_state_file_round_trip(tmp_path):
    psi = random_state(4, np.random.default_rng(9))
    path = tmp_path / "s.bin"
    write_state(path, psi, [2, 0, 3, 1])
    raw = np.frombuffer(path.read_bytes(), dtype="<f8")
    assert raw.size == 32
    phys = raw[0::2] + 1j * raw[1::2]
    assert np.array_equal(phys, to_physical(psi, QubitMapping((2, 0, 3, 1))))
    back, mapping = read_state(path)
    assert mapping == [2, 0, 3, 1] and np.array_equal(back, psi)
