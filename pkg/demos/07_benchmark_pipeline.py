"""The full pipeline through the command-line interface.

Writes a reference model/config pair (reduced sizes so the demo finishes
in a couple of minutes), then drives every subcommand: simulate,
gen-dataset, train, verify, run, bench, plot-data.  The full-scale
numbers (200 runs, horizon 100) are produced by the acceptance suite.
"""

import tempfile
from pathlib import Path

from pdmhe.cli import main, write_reference_config

workdir = Path(tempfile.mkdtemp(prefix="pdmhe_demo_"))
config = write_reference_config(
    workdir,
    mc_runs=20,
    T=60,
    train_size=700,
    epochs=250,
    delta_p=3.0,
    delta_d=3.0,
    eps=0.2,       # modest verification budget so N stays small here
    beta=1e-3,
)
print(f"working directory: {workdir}\n")

for argv in (
    ["simulate"],
    ["gen-dataset", "--kind", "dual"],
    ["train"],
    ["verify"],
    ["run"],
    ["bench"],
    ["plot-data"],
):
    print(f"$ pdmhe --config {config.name} {' '.join(argv)}")
    rc = main(["--config", str(config)] + argv)
    print(f"(exit {rc})\n")
    if rc not in (0,):
        break

print("outputs:")
for path in sorted((workdir / "out").iterdir()):
    print(f"  {path.name}")
