"""Write the shipped synthetic cost model.

fusion_cost[q] = 2^max(0, q-5) for q = 1..7, alpha = 0.8, per-gate cost by
arity (0.05, 0.08, 0.12).  Pass a path to write elsewhere, or --check to
compare against the packaged file.
"""

import argparse
import json
import sys
from pathlib import Path

from hiersim.circuit import GateKind

PACKAGED = Path(__file__).resolve().parents[1] / "src" / "hiersim" / "data" / "default_cost_model.json"
GATE_COST_BY_ARITY = {1: 0.05, 2: 0.08, 3: 0.12}


def build(q_max_fusion: int = 7) -> dict:
    return {
        "fusion_cost": [float(2 ** max(0, q - 5)) for q in range(1, q_max_fusion + 1)],
        "alpha": 0.8,
        "gate_cost": {k.name: GATE_COST_BY_ARITY[k.arity] for k in GateKind},
        "q_max_fusion": q_max_fusion,
        "q_max_shared": 10,
        "ls_qubits": 3,
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out", nargs="?", default=str(PACKAGED))
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    model = build()
    if args.check:
        same = json.loads(PACKAGED.read_text()) == model
        print("packaged cost model is up to date" if same else "packaged cost model differs")
        return 0 if same else 1
    Path(args.out).write_text(json.dumps(model, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
