"""Generate the default 204-sample synthetic cohort and preprocess it.

    python scripts/make_dataset.py --out runs/desk --config configs/desk.json

Raw volumes are generated lazily per sample, so nothing full-size is kept on disk.
"""

import argparse
import time
from pathlib import Path

from phgcn.cohort import CohortSpec, gen_cohort
from phgcn.config import load_config
from phgcn.preprocess import preprocess_cohort, write_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "desk.json")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    cohort = gen_cohort(CohortSpec(seed=args.seed))
    samples = preprocess_cohort(cohort, cfg.preprocess)
    write_dataset(samples, args.out, cfg.preprocess, extra={"cohort_seed": args.seed})
    print(f"{len(samples)} samples -> {args.out} ({time.perf_counter() - t0:.0f} s)")


if __name__ == "__main__":
    main()
