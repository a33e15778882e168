"""
The command-line workflow
=========================

The ``visitflow`` command works on a run directory. ``synth`` writes inputs
and a ``run.cfg``; every later step reads that config, accepts
``--set key=value`` overrides and writes its outputs next to it.
"""

import tempfile
from pathlib import Path

from visitflow.cli import main

run = Path(tempfile.mkdtemp()) / "demo-run"
quick = ["--set", "epochs=40", "--set", "hidden=32", "--set", "ff_hidden=64", "--set", "learning_rate=1e-3"]

main(["synth", "--run", str(run), "--seed", "7", "--units", "12", "--weeks", "60"])
for step in ["ingest", "train", "predict", "evaluate", "cluster", "moran", "attribute", "report"]:
    code = main([step, "--run", str(run), *quick])
    assert code == 0, step

# %%
# What the run leaves behind
# --------------------------
for path in sorted(run.rglob("*")):
    if path.is_file():
        print(path.relative_to(run))

print()
print((run / "report.txt").read_text())
