"""GCN on/off and image-node-count ablations on shared split plans.

    python scripts/run_ablation.py --data runs/desk --repeats 35
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
    common = ["--data", a.data, "--config", a.config, "--repeats", a.repeats, "--seed", a.seed, "--jobs", a.jobs]
    gcn_out = str(Path(a.outdir) / "ablation_gcn.csv")
    code = cli(["ablate", *common, "--mode", "gcn", "--out", gcn_out])
    if code == 0:
        # the node sweep reuses the GCN ablation's plans so all rows share test sets
        code = cli(["ablate", *common, "--mode", "nodes", "--splits", gcn_out + ".splits.json",
                    "--out", str(Path(a.outdir) / "ablation_nodes.csv")])
    sys.exit(code)
