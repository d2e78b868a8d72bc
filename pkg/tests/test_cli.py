import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from hiersim.cli import BENCH_COLUMNS, main
from hiersim.executor import read_state
from hiersim.reference import simulate_reference
from hiersim.circuit import generate, render_qasm


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_stage_ghz12(tmp_path, capsys):
    code, out, _ = run(capsys, "stage", "--gen", "ghz:12", "--local", "6", "--regional", "2",
                       "--global", "4", "--out", str(tmp_path))
    assert code == 0
    assert out.strip() == "stages=2 cost=18"
    data = json.loads((tmp_path / "staging.json").read_text())
    assert len(data["stages"]) == 2 and data["cost"] == 18
    assert data["shape"] == {"L": 6, "R": 2, "G": 4, "c": 3.0}


@pytest.mark.parametrize("argv", [
    ["stage", "--gen", "ghz:6", "--local", "0"],
    ["stage", "--gen", "ghz:6", "--local", "3", "--regional", "1"],
    ["stage", "--gen", "ghz:6", "--max-stages", "0"],
    ["stage", "--gen", "nope:6"],
    ["stage"],
    ["stage", "--gen", "ghz:6", "--comm-factor", "0.5"],
    ["kernelize", "--gen", "qft:6", "--cost-model", "/nonexistent/model.json"],
    ["bench", "--families", ""],
    ["bench", "--families", "ghz", "--sizes", ""],
])
def test_usage_errors(tmp_path, capsys, argv):
    code, _, err = run(capsys, *argv, "--out", str(tmp_path))
    assert code == 2 and err.startswith("error:")


def test_no_plan_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "stage", "--gen", "graphstate_ring:6", "--local", "2",
                       "--global", "4", "--max-stages", "1", "--out", str(tmp_path))
    assert code == 3 and err.startswith("infeasible")


def test_budget_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "stage", "--gen", "graphstate_ring:10", "--local", "3",
                       "--regional", "3", "--global", "4", "--budget-nodes", "5",
                       "--out", str(tmp_path))
    assert code == 5 and "budget" in err


def test_kernelize_writes_plans(tmp_path, capsys):
    code, out, _ = run(capsys, "kernelize", "--gen", "qft:6", "--local", "4", "--regional", "1",
                       "--global", "1", "--prune", "inf", "--out", str(tmp_path))
    assert code == 0 and out.startswith("stages=")
    k = int(out.split()[0].split("=")[1])
    for i in range(k):
        data = json.loads((tmp_path / f"kernels_stage{i}.json").read_text())
        assert data["kernels"]


def test_simulate_ghz3_and_verify(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--gen", "ghz:3", "--local", "3", "--verify",
                       "--out", str(tmp_path))
    assert code == 0 and "max_abs_diff" in out
    state, mapping = read_state(tmp_path / "state.bin")
    expect = np.zeros(8, dtype=complex)
    expect[0] = expect[7] = 1 / math.sqrt(2)
    assert np.max(np.abs(state - expect)) < 1e-12


def test_simulate_from_qasm_with_staging_and_state(tmp_path, capsys):
    qasm = tmp_path / "c.qasm"
    qasm.write_text(render_qasm(generate("qft", 6)))
    stage_dir = tmp_path / "s"
    assert run(capsys, "stage", "--input", str(qasm), "--local", "3", "--regional", "1",
               "--global", "2", "--out", str(stage_dir))[0] == 0
    code, out, _ = run(capsys, "simulate", "--input", str(qasm), "--local", "3",
                       "--regional", "1", "--global", "2", "--staging",
                       str(stage_dir / "staging.json"), "--state", "random", "--seed", "7",
                       "--verify", "--out", str(tmp_path / "r"))
    assert code == 0
    fields = dict(tok.split("=") for tok in out.split() if "=" in tok)
    assert int(fields["inter"]) > 0
    comm = json.loads((tmp_path / "r" / "comm.json").read_text())
    assert comm["total"]["inter_node_amplitudes_moved"] == int(fields["inter"])
    # feed the produced state back in as an input state
    code, _, _ = run(capsys, "simulate", "--gen", "ghz:6", "--local", "6", "--state",
                     str(tmp_path / "r" / "state.bin"), "--verify", "--out", str(tmp_path / "x"))
    assert code == 0


def test_bench_csv(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--families", "ghz,qft", "--sizes", "6-7", "--regional",
                       "1", "--global", "1", "--verify", "--out", str(tmp_path))
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert out.splitlines()[0] == ",".join(BENCH_COLUMNS)
    assert [(r["circuit"], r["n"]) for r in rows] == [("ghz", "6"), ("ghz", "7"), ("qft", "6"),
                                                      ("qft", "7")]
    for r in rows:
        assert float(r["kernel_cost_dp"]) <= float(r["kernel_cost_ordered"]) + 1e-9
        assert int(r["stages"]) <= int(r["greedy_stages"])
        assert float(r["max_abs_diff"]) < 1e-9


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hiersim.cli", "stage", "--gen", "ghz:4",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip() == "stages=1 cost=0"
