"""
The command-line workflow end to end, at toy size
=================================================

Runs every ``advsig`` subcommand in order against a scratch workspace
with a configuration small enough to finish in about a minute.
"""

import sys
import tempfile
from pathlib import Path

import yaml

from advsig.cli import main

config = {
    "victim": {"width": 4},
    "schedule": {"epochs": 1, "decay_epochs": []},
    "data": {"victim_train": 200, "attack_train": 20, "attack_test": 20, "validation": 20},
    "attacks": {"cwl2_steps": 10},
    "feature": {"width": 4, "epochs": 1},
    "redrl": {"num_residual_blocks": 1, "channels": 8, "psi_width": 4},
    "recognizer": {"epochs": 2, "warmup_epochs": 1, "width": 4},
    "saliency": {"max_records": 8, "heatmaps": 1},
    "ablation": {"scenarios": ["A", "full"], "seeds": [0]},
}

root = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="advsig-"))
cfg_path = root / "tiny.yaml"
root.mkdir(parents=True, exist_ok=True)
cfg_path.write_text(yaml.safe_dump(config))

steps = ["train-victim", "gen-attacks", "train-redrl", "eval-recognition",
         "recovery-table", "ablate", "saliency", "render"]
for step in steps:
    code = main([step, "--config", str(cfg_path), "--out", str(root)])
    print(f"{step}: exit {code}")
    if code:
        break

print("artifacts under", root / "runs")
for run in sorted((root / "runs").iterdir()):
    print(" ", run.name, len(list(run.iterdir())), "files")
