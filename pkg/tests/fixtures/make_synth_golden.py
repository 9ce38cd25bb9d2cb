"""Freeze per-seed Synth benchmark metrics as the regression baseline.

usage: python tests/fixtures/make_synth_golden.py runs/synth_benchmark
"""

import json
import sys
from pathlib import Path

out = Path(sys.argv[1])
golden = {}
for m in ("erm", "ria-vrex"):
    res = json.loads((out / m / "results.json").read_text())
    golden[m] = {str(s["seed"]): {"id_test_acc": s["id_test_acc"], "ood_test_acc": s["ood_test_acc"],
                                  "final_train_loss": s["history"][-1]["train_loss"]}
                 for s in res["seeds"]}
(Path(__file__).parent / "synth_golden.json").write_text(json.dumps(golden, indent=2) + "\n")
