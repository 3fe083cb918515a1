"""35-repeat stratified holdout on a preprocessed dataset.

    python scripts/run_bootstrap.py --data runs/desk --out results/bootstrap_desk.csv
"""

import argparse
import sys
from pathlib import Path

from phgcn.cli import main as cli

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="results/bootstrap_desk.csv")
    p.add_argument("--config", default=str(CONFIG))
    p.add_argument("--seed", default="0")
    p.add_argument("--jobs", default="1")
    a = p.parse_args()
    sys.exit(cli(["bootstrap", "--data", a.data, "--config", a.config, "--repeats", "35", "--seed", a.seed,
                  "--jobs", a.jobs, "--out", a.out]))
