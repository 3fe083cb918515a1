"""Training-set size sweep (71..186 step 5) with fixed test sets, as CSV plus an SVG plot.

    python scripts/run_sweep.py --data runs/desk --repeats 35
"""

import argparse
import sys
from pathlib import Path

from phgcn.cli import main as cli

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "desk.json"

if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--outdir", default="results")
    p.add_argument("--config", default=str(CONFIG))
    p.add_argument("--repeats", default="35")
    p.add_argument("--seed", default="0")
    p.add_argument("--jobs", default="1")
    a = p.parse_args()
    out = Path(a.outdir)
    sys.exit(cli(["sweep", "--data", a.data, "--config", a.config, "--repeats", a.repeats, "--seed", a.seed,
                  "--jobs", a.jobs, "--min", "71", "--max", "186", "--step", "5",
                  "--out", str(out / "sweep.csv"), "--svg", str(out / "sweep.svg")]))
