"""Command-line entry point: ``phgcn <subcommand> ...``.

Exit codes: 0 success, 1 invalid input (usage, config, file format), 2 any
other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .cohort import CohortSpec, RawCohortDir, gen_cohort, write_cohort
from .config import RunConfig, from_dict, load_config
from .errors import ValidationError
from .evalx import (SplitPlan, ablate, ablation_csv, bootstrap_experiment, format_ablation, format_group_table,
                    macro_metrics, make_splits, predict_proba, report_csv, sample_size_sweep, sweep_csv, sweep_sizes,
                    sweep_svg)
from .fusion import Batch, ModelConfig, collate
from .optim import DTYPES, grad_check, train
from .preprocess import PreprocessConfig, preprocess_cohort, read_dataset, write_dataset
from .tensorio import load_checkpoint, read_json, save_checkpoint, write_json

log = logging.getLogger("phgcn")


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    """Raises instead of exiting so :func:`main` owns the exit code."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _shape(text: str) -> tuple[int, ...]:
    dims = _int_list(text)
    if min(dims) < 1:
        raise argparse.ArgumentTypeError(f"shape dims must be positive, got {text!r}")
    return dims


def build_parser() -> Parser:
    p = Parser(prog="phgcn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="write a synthetic raw cohort")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n-per-class", type=_int_list, default=CohortSpec.n_per_class)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-sigma", type=float, default=CohortSpec.noise_sigma)

    pp = sub.add_parser("preprocess", help="raw cohort -> fixed-shape model inputs")
    pp.add_argument("--in", dest="inp", required=True, type=Path)
    pp.add_argument("--out", required=True, type=Path)
    pp.add_argument("--config", type=Path)

    t = sub.add_parser("train", help="train one model and write a checkpoint directory")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--ids", type=Path, help="train only on these ids (JSON list, splits entry or one id per line)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--data", required=True, type=Path)
    e.add_argument("--ids", type=Path)
    e.add_argument("--out", type=Path, help="per-sample probability CSV")

    def experiment(name, help_):
        q = sub.add_parser(name, help=help_)
        q.add_argument("--data", required=True, type=Path)
        q.add_argument("--config", type=Path)
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--repeats", type=int)
        q.add_argument("--epochs", type=int, help="override train.epochs")
        q.add_argument("--jobs", type=int, help="worker processes (results do not depend on it)")
        q.add_argument("--splits", type=Path, help="reuse split plans from a JSON file")
        q.add_argument("--out", required=True, type=Path)
        return q

    experiment("bootstrap", "repeated stratified holdout")
    s = experiment("sweep", "training-set size sweep on fixed test sets")
    s.add_argument("--min", dest="lo", type=int)
    s.add_argument("--max", dest="hi", type=int)
    s.add_argument("--step", type=int)
    s.add_argument("--svg", type=Path)
    a = experiment("ablate", "GCN or node-count ablation")
    a.add_argument("--mode", required=True, choices=("gcn", "nodes"))
    a.add_argument("--nodes", type=_int_list)

    gc = sub.add_parser("gradcheck", help="autograd vs finite differences for every parameter tensor")
    gc.add_argument("--config", type=Path)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--sax-shape", type=_shape, default=(8, 8, 4), help="input size (parameter shapes do not depend on it)")
    gc.add_argument("--ch4-shape", type=_shape, default=(8, 8))
    gc.add_argument("--h", type=float, default=1e-4)
    gc.add_argument("--tol", type=float, default=1e-3)
    gc.add_argument("--raw", action="store_true", help="plain finite differences, no activation-pattern replay")
    return p


# -- helpers -----------------------------------------------------------------------

def _metadata(args, extra: dict | None = None) -> dict:
    keep = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "verbose"}
    return {"tool": "phgcn", "version": __version__, "args": keep, **(extra or {})}


def _meta_path(out: Path) -> Path:
    return out.with_name(out.name + ".meta.json")


def _load_data(path: Path, cfg_path: Path | None):
    """Read a preprocessed directory and reconcile its shapes with the run config."""
    samples, manifest = read_dataset(path)
    data_pre = from_dict(PreprocessConfig, manifest["preprocess_config"], "manifest.preprocess_config")
    if cfg_path is None:
        base = RunConfig()
        enc = dataclasses.replace(base.model.encoder, sax_shape=data_pre.sax_shape, ch4_shape=data_pre.ch4_shape,
                                  frames=data_pre.frames_out)
        cfg = base.replace(preprocess=data_pre, model=dataclasses.replace(base.model, encoder=enc))
        cfg.validate()
    else:
        cfg = load_config(cfg_path)
        if cfg.preprocess != data_pre:
            raise ValidationError(f"{path} was preprocessed with {data_pre}, but {cfg_path} expects {cfg.preprocess}; "
                                  "re-run preprocess with this config")
    return samples, cfg


def _read_ids(path: Path, key: str = "test_ids") -> list[str]:
    text = path.read_text() if path.exists() else None
    if text is None:
        raise ValidationError(f"ids file {path} not found")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return [ln.strip() for ln in text.splitlines() if ln.strip()]
    if isinstance(obj, dict) and key in obj:
        obj = obj[key]
    if not isinstance(obj, list) or not all(isinstance(i, str) for i in obj):
        raise ValidationError(f"{path}: expected a list of sample ids")
    return obj


def _select(samples, ids):
    by_id = {s.id: s for s in samples}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ValidationError(f"unknown sample ids: {', '.join(missing[:5])}{' ...' if len(missing) > 5 else ''}")
    return [by_id[i] for i in ids]


def _experiment_setup(args):
    samples, cfg = _load_data(args.data, args.config)
    ex, tr = cfg.experiment, cfg.train
    if args.repeats is not None:
        ex = dataclasses.replace(ex, repeats=args.repeats)
    if args.jobs is not None:
        ex = dataclasses.replace(ex, jobs=args.jobs)
    if args.epochs is not None:
        tr = dataclasses.replace(tr, epochs=args.epochs)
    cfg = cfg.replace(experiment=ex, train=tr)
    cfg.validate()
    if args.splits is not None:
        raw = read_json(args.splits)
        plans = [SplitPlan.from_dict(d) for d in raw["plans"]]
    else:
        plans = make_splits(samples, ex.repeats, ex.per_class_test, args.seed)
    splits_path = args.out.with_name(args.out.name + ".splits.json")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_json(splits_path, {"seed": args.seed, "plans": [p.to_dict() for p in plans]})
    # every arm reads the plans back from the file it records
    plans = [SplitPlan.from_dict(d) for d in read_json(splits_path)["plans"]]
    return samples, cfg, plans, splits_path


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    if len(args.n_per_class) != 3:
        raise ValidationError("--n-per-class needs three comma-separated counts")
    spec = CohortSpec(n_per_class=args.n_per_class, seed=args.seed, noise_sigma=args.noise_sigma)
    spec.validate()
    write_cohort(gen_cohort(spec), args.out, spec)
    write_json(args.out / "run_metadata.json", _metadata(args))
    print(f"wrote {sum(spec.n_per_class)} samples to {args.out}")


def cmd_preprocess(args) -> None:
    cfg = load_config(args.config)
    cohort = RawCohortDir(args.inp)
    samples = preprocess_cohort(cohort, cfg.preprocess)
    write_dataset(samples, args.out, cfg.preprocess)
    write_json(args.out / "run_metadata.json", _metadata(args))
    print(f"preprocessed {len(samples)} samples into {args.out}")


def cmd_train(args) -> None:
    samples, cfg = _load_data(args.data, args.config)
    if args.ids is not None:
        samples = _select(samples, _read_ids(args.ids, "train_ids"))
    tr = dataclasses.replace(cfg.train, seed=args.seed)
    cfg = cfg.replace(train=tr)
    result = train(samples, tr, cfg.model)
    save_checkpoint(args.out, result.params, result.state, cfg.to_dict(), result.history)
    write_json(args.out / "run_metadata.json", _metadata(args, {"n_train": len(samples)}))
    last = f"{result.history[-1]:.4f}" if result.history else "n/a"
    print(f"trained on {len(samples)} samples for {tr.epochs} epochs; final mean loss {last}; wrote {args.out}")


def cmd_eval(args) -> None:
    params, state, cfg_dict = load_checkpoint(args.model)
    cfg = from_dict(RunConfig, cfg_dict, f"{args.model}/config.json")
    samples, _ = _load_data(args.data, None)
    if args.ids is not None:
        samples = _select(samples, _read_ids(args.ids))
    dtype = DTYPES[cfg.train.dtype]
    params = {k: torch.from_numpy(v).to(dtype) for k, v in params.items()}
    state = {k: torch.from_numpy(v).to(dtype) for k, v in state.items()}
    probs = predict_proba(params, state, collate(samples, dtype), cfg.model)
    labels = np.asarray([s.label for s in samples])
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        lines = ["id,label,p0,p1,p2,predicted"]
        lines += [f"{s.id},{s.label}," + ",".join(f"{v:.9f}" for v in p) + f",{int(np.argmax(p))}"
                  for s, p in zip(samples, probs)]
        args.out.write_text("\n".join(lines) + "\n")
        write_json(_meta_path(args.out), _metadata(args))
    try:
        m = macro_metrics(probs, labels)
    except ValueError as exc:
        print(f"evaluated {len(samples)} samples; metrics unavailable ({exc})")
        return
    print(" ".join(f"{k}={v:.4f}" for k, v in m.items()))


def cmd_bootstrap(args) -> None:
    samples, cfg, plans, splits = _experiment_setup(args)
    rep = bootstrap_experiment(samples, cfg.train, cfg.model, seed=args.seed, jobs=cfg.experiment.jobs, plans=plans)
    args.out.write_text(report_csv(rep))
    write_json(_meta_path(args.out), _metadata(args, {"splits": str(splits), "config": cfg.to_dict()}))
    print(format_group_table(rep))


def cmd_sweep(args) -> None:
    samples, cfg, plans, splits = _experiment_setup(args)
    ex = cfg.experiment
    sizes = sweep_sizes(args.lo if args.lo is not None else ex.sweep_min,
                        args.hi if args.hi is not None else ex.sweep_max,
                        args.step if args.step is not None else ex.sweep_step)
    res = sample_size_sweep(samples, cfg.train, cfg.model, sizes, plans, seed=args.seed, jobs=ex.jobs)
    args.out.write_text(sweep_csv(res))
    if args.svg is not None:
        args.svg.parent.mkdir(parents=True, exist_ok=True)
        args.svg.write_text(sweep_svg(res))
    write_json(_meta_path(args.out), _metadata(args, {"splits": str(splits), "sizes": sizes,
                                                      "config": cfg.to_dict()}))
    print(f"{len(sizes)} sweep points over {len(plans)} plans written to {args.out}")


def cmd_ablate(args) -> None:
    samples, cfg, plans, splits = _experiment_setup(args)
    nodes = args.nodes if args.nodes is not None else cfg.experiment.ablation_nodes
    res = ablate(samples, args.mode, cfg.train, cfg.model, seed=args.seed, node_list=nodes,
                 jobs=cfg.experiment.jobs, plans=plans)
    args.out.write_text(ablation_csv(res))
    write_json(_meta_path(args.out), _metadata(args, {"splits": str(splits), "config": cfg.to_dict()}))
    print(format_ablation(res))


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    if len(args.sax_shape) != 3 or len(args.ch4_shape) != 2:
        raise ValidationError("--sax-shape needs 3 dims and --ch4-shape 2 dims")
    enc = dataclasses.replace(cfg.model.encoder, sax_shape=args.sax_shape, ch4_shape=args.ch4_shape)
    model = dataclasses.replace(cfg.model, encoder=enc)
    gen = torch.Generator().manual_seed(args.seed)
    T = enc.frames
    batch = Batch(torch.randn((2, T) + args.sax_shape, generator=gen, dtype=torch.float64),
                  torch.randn((2, T) + args.ch4_shape, generator=gen, dtype=torch.float64),
                  torch.rand((2, 11), generator=gen, dtype=torch.float64),
                  torch.tensor([0, 2]))
    rep = grad_check(model, batch, torch.float64, args.h, args.tol, args.seed, piecewise=not args.raw)
    print("\n".join(rep.lines()))
    print(f"{'PASS' if rep.passed else 'FAIL'} max relative error {rep.max_rel_error:.3e} (tolerance {args.tol:g})")
    return 0 if rep.passed else 2


COMMANDS = {"gen-data": cmd_gen_data, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "bootstrap": cmd_bootstrap, "sweep": cmd_sweep, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        code = COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
