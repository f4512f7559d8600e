"""
The same workflow from the command line
=======================================

Every step is also a ``cataphase`` subcommand. Here they are driven through
``cataphase.cli.main`` so the demo runs without touching ``PATH``; in a shell
the arguments are identical.
"""

import json
import tempfile
from pathlib import Path

from cataphase.cli import main

work = Path(tempfile.mkdtemp(prefix="cataphase-demo-"))  # kept afterwards for inspection
(work / "sim.json").write_text(json.dumps({"n_videos": 8, "duration_range_s": [120, 200]}))
(work / "run.json").write_text(json.dumps({"model": {"kind": "gru", "hidden_sizes": [64, 64]},
                                           "training": {"epochs": 25}}))

###############################################################################
# simulate, train, eval
# ---------------------

steps = [
    ["simulate", "--config", str(work / "sim.json"), "--out", str(work / "data"), "--seed", "1"],
    ["train", "--task", "phase", "--config", str(work / "run.json"), "--data", str(work / "data"),
     "--out", str(work / "run")],
    ["eval", "--checkpoint", str(work / "run"), "--data", str(work / "data"), "--split", "holdout_test",
     "--report", str(work / "report")],
]
for argv in steps:
    code = main(argv)
    print("cataphase", argv[0], "->", code)

###############################################################################
# Outputs
# -------

for path in sorted(work.rglob("*")):
    if path.is_file():
        print(f"{path.relative_to(work)}")
report = json.loads((work / "report" / "report.json").read_text())
print("holdout accuracy", round(report["per_frame_accuracy"], 4), "macro F1", round(report["macro_f1"], 4))

###############################################################################
# Errors map to exit codes: 1 for usage, 2 for bad data, 3 for numeric blow-ups.

print("missing split ->", main(["eval", "--checkpoint", str(work / "run"), "--data", str(work / "data"),
                                "--split", "external_test", "--report", str(work / "nope")]))
