"""Metrics and the repeated stratified-holdout experiments.

"Bootstrap" here means repeated holdout without replacement: each repeat
draws a fixed number of test samples per class and trains on the rest.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import multiprocessing as mp
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import DegenerateClass, ValidationError
from .fusion import Batch, ModelConfig, collate, forward_full, softmax
from .optim import DTYPES, TrainConfig, train

log = logging.getLogger(__name__)

N_CLASSES = 3
CLASS_NAMES = ("Non-PH", "Pre-capillary PH", "Post-capillary PH")
DEFAULT_ABLATION_NODES = (5, 9, 10, 11, 12, 13, 22, 44)
ROW_FIELDS = ("acc", "auc_macro", "auc0", "auc1", "auc2", "sens0", "sens1", "sens2",
              "spec0", "spec1", "spec2", "acc0", "acc1", "acc2")


@dataclass(frozen=True)
class ExperimentConfig:
    repeats: int = 35
    per_class_test: int = 6
    sweep_min: int = 71
    sweep_max: int = 186
    sweep_step: int = 5
    ablation_nodes: tuple[int, ...] = DEFAULT_ABLATION_NODES
    jobs: int = 1

    def validate(self) -> None:
        if self.repeats < 1 or self.per_class_test < 1:
            raise ValidationError("repeats and per_class_test must be >= 1")
        if self.sweep_step < 1 or self.sweep_min < 1 or self.sweep_max < self.sweep_min:
            raise ValidationError("sweep needs 1 <= min <= max and step >= 1")
        if not self.ablation_nodes or min(self.ablation_nodes) < 1:
            raise ValidationError("ablation node counts must be >= 1")
        if self.jobs < 1:
            raise ValidationError("jobs must be >= 1")


# -- metrics -----------------------------------------------------------------------

def predict_proba(params, state, data, model_cfg: ModelConfig) -> np.ndarray:
    """Eval-mode class probabilities [N, C] in float64.

    ``data`` is a list of samples or a collated :class:`Batch`.
    """
    if not isinstance(data, Batch):
        data = collate(data, next(iter(params.values())).dtype)
    with torch.no_grad():
        logits, _ = forward_full(params, state, data, model_cfg, train=False)
    return softmax(logits.to(torch.float64)).numpy()


def accuracy(predicted, labels) -> float:
    predicted, labels = np.asarray(predicted), np.asarray(labels)
    if predicted.size == 0 or predicted.shape != labels.shape:
        raise ValueError("accuracy needs equal-length, non-empty inputs")
    return float(np.mean(predicted == labels))


def auc_class(scores, labels, k: int) -> float:
    """One-vs-rest Mann-Whitney AUC for class ``k``; ties count one half."""
    scores, labels = np.asarray(scores, dtype=np.float64), np.asarray(labels)
    pos, neg = scores[labels == k], scores[labels != k]
    if pos.size == 0 or neg.size == 0:
        raise DegenerateClass(f"DegenerateClass: class {k} needs positives and negatives "
                              f"(got {pos.size} and {neg.size})")
    # rank-sum form of the pair count: wins + ties / 2 over |pos| * |neg| pairs
    neg_sorted = np.sort(neg)
    below = np.searchsorted(neg_sorted, pos, side="left")
    tied = np.searchsorted(neg_sorted, pos, side="right") - below
    twice_wins = int(2 * below.sum() + tied.sum())
    return twice_wins / (2 * pos.size * neg.size)


def argmax_lowest(probs) -> np.ndarray:
    # np.argmax already returns the first maximum
    return np.argmax(np.asarray(probs), axis=1)


def macro_metrics(probs, labels) -> dict:
    probs, labels = np.asarray(probs, dtype=np.float64), np.asarray(labels)
    pred = argmax_lowest(probs)
    out = {"acc": accuracy(pred, labels)}
    aucs = [auc_class(probs[:, k], labels, k) for k in range(N_CLASSES)]
    for k in range(N_CLASSES):
        pos, hit = labels == k, pred == k
        tp, fn = int(np.sum(pos & hit)), int(np.sum(pos & ~hit))
        tn, fp = int(np.sum(~pos & ~hit)), int(np.sum(~pos & hit))
        out[f"auc{k}"] = aucs[k]
        out[f"sens{k}"] = tp / (tp + fn)
        out[f"spec{k}"] = tn / (tn + fp)
        out[f"acc{k}"] = (tp + tn) / labels.size
    out["auc_macro"] = sum(aucs) / N_CLASSES
    return {k: out[k] for k in ROW_FIELDS}


# -- splits ------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    repeat: int
    seed: int
    test_ids: tuple[str, ...]
    train_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"repeat": self.repeat, "seed": self.seed, "test_ids": list(self.test_ids),
                "train_ids": list(self.train_ids)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(int(d["repeat"]), int(d["seed"]), tuple(d["test_ids"]), tuple(d["train_ids"]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint64)[0])


def make_splits(dataset, repeats: int = 35, per_class_test: int = 6, seed: int = 0) -> list[SplitPlan]:
    """Per repeat, draw ``per_class_test`` test ids per class without replacement."""
    ids = [s.id for s in dataset]
    labels = np.asarray([int(s.label) for s in dataset])
    if len(set(ids)) != len(ids):
        raise ValidationError("sample ids must be unique")
    by_class = [np.flatnonzero(labels == k) for k in range(N_CLASSES)]
    for k, idx in enumerate(by_class):
        if idx.size <= per_class_test:
            raise ValidationError(f"class {k} has {idx.size} samples; need more than {per_class_test}")
    plans = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), r]))
        test = set()
        for idx in by_class:
            test.update(int(i) for i in rng.choice(idx, per_class_test, replace=False))
        plans.append(SplitPlan(r, int(seed),
                               tuple(ids[i] for i in sorted(test)),
                               tuple(ids[i] for i in range(len(ids)) if i not in test)))
    return plans


# -- ordered parallel map ----------------------------------------------------------

_WORK = {}


def _call(arg):
    fn, item = arg
    torch.set_num_threads(1)
    return fn(_WORK, item)


def ordered_map(fn, items, jobs: int = 1, context: dict | None = None) -> list:
    """``[fn(context, item) for item in items]``, optionally over forked workers.

    Results come back in input order; each item owns its seeds, so the
    output does not depend on ``jobs``.
    """
    items = list(items)
    _WORK.clear()
    _WORK.update(context or {})
    if jobs <= 1 or len(items) <= 1:
        # same thread count as the workers so reductions match bit for bit
        torch.set_num_threads(1)
        return [fn(_WORK, it) for it in items]
    ctx = mp.get_context("fork")
    with ctx.Pool(min(jobs, len(items))) as pool:
        return pool.map(_call, [(fn, it) for it in items], chunksize=1)


# -- training + evaluation on one plan ---------------------------------------------

@dataclass(frozen=True)
class RunSpec:
    """One train/evaluate job: a plan, optional train subset size, model variant."""
    plan: SplitPlan
    train_cfg: TrainConfig
    model_cfg: ModelConfig
    subset: int | None = None
    seed: int = 0


def subset_ids(plan: SplitPlan, size: int, seed: int) -> tuple[str, ...]:
    pool = plan.train_ids
    if size > len(pool):
        raise ValidationError(f"sweep size {size} exceeds training pool of {len(pool)}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), plan.repeat, size]))
    pick = np.sort(rng.choice(len(pool), size, replace=False))
    return tuple(pool[i] for i in pick)


def _run_one(ctx, spec: RunSpec) -> dict:
    data: Batch = ctx["data"]
    index = ctx["index"]
    train_ids = spec.plan.train_ids if spec.subset is None else subset_ids(spec.plan, spec.subset, spec.seed)
    dtype = DTYPES[spec.train_cfg.dtype]
    train_batch = _cast(data.take([index[i] for i in train_ids]), dtype)
    test_batch = _cast(data.take([index[i] for i in spec.plan.test_ids]), dtype)
    cfg = dataclasses.replace(spec.train_cfg, seed=derive_seed(spec.seed, spec.plan.repeat, 1))
    try:
        result = train(train_batch, cfg, spec.model_cfg)
    except Exception as exc:
        raise type(exc)(f"repeat {spec.plan.repeat}: {exc}") from exc
    probs = predict_proba(result.params, result.state, test_batch, spec.model_cfg)
    return macro_metrics(probs, test_batch.labels.numpy())


def _cast(b: Batch, dtype) -> Batch:
    return Batch(b.sax.to(dtype), b.ch4.to(dtype), b.clinical.to(dtype), b.labels)


def _context(pair):
    batch, ids = pair
    return {"data": batch, "index": {sid: i for i, sid in enumerate(ids)}}


def _as_pair(dataset):
    """Collate once (float64); runs cast to their training dtype."""
    if isinstance(dataset, tuple):
        return dataset
    return collate(dataset, torch.float64), [s.id for s in dataset]


# -- reports -----------------------------------------------------------------------

def summarize(rows: list[dict], fields=ROW_FIELDS) -> dict:
    """Mean and sample standard deviation (ddof=1) per column, ignoring NaN."""
    out = {}
    for f in fields:
        vals = np.asarray([r[f] for r in rows], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        out[f] = (float(vals.mean()) if vals.size else math.nan,
                  float(vals.std(ddof=1)) if vals.size > 1 else 0.0 if vals.size else math.nan)
    return out


@dataclass
class ExperimentReport:
    rows: list[dict]
    summary: dict = field(default_factory=dict)
    plans: list[SplitPlan] = field(default_factory=list)

    def group_table(self) -> list[tuple[str, dict]]:
        """Per-class rows (ACC, AUC, Sensitivity, Specificity) plus ALL."""
        s = self.summary
        out = [(CLASS_NAMES[k], {"ACC": s[f"acc{k}"], "AUC": s[f"auc{k}"], "Sensitivity": s[f"sens{k}"],
                                 "Specificity": s[f"spec{k}"]}) for k in range(N_CLASSES)]
        out.append(("ALL", {"ACC": s["acc"], "AUC": s["auc_macro"], "Sensitivity": None, "Specificity": None}))
        return out


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def report_csv(report: ExperimentReport) -> str:
    """Per-repeat rows, then mean/std rows, then the per-class summary table."""
    lines = ["repeat," + ",".join(ROW_FIELDS)]
    for r in report.rows:
        lines.append(f"{r['repeat']}," + ",".join(_fmt(r[f]) for f in ROW_FIELDS))
    lines.append("mean," + ",".join(_fmt(report.summary[f][0]) for f in ROW_FIELDS))
    lines.append("std," + ",".join(_fmt(report.summary[f][1]) for f in ROW_FIELDS))
    lines.append("")
    lines.append("group,ACC_mean,ACC_std,AUC_mean,AUC_std,Sensitivity_mean,Sensitivity_std,"
                 "Specificity_mean,Specificity_std")
    for name, cols in report.group_table():
        cells = []
        for c in ("ACC", "AUC", "Sensitivity", "Specificity"):
            v = cols[c]
            cells += ["", ""] if v is None else [_fmt(v[0]), _fmt(v[1])]
        lines.append(f"{name}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def format_group_table(report: ExperimentReport) -> str:
    out = [f"{'':<20}{'ACC':>18}{'AUC':>18}{'Sensitivity':>18}{'Specificity':>18}"]
    for name, cols in report.group_table():
        cells = ["n/a" if v is None else f"{v[0]:.3f} ± {v[1]:.3f}" for v in cols.values()]
        out.append(f"{name:<20}" + "".join(f"{c:>18}" for c in cells))
    return "\n".join(out)


# -- experiments -------------------------------------------------------------------

def bootstrap_experiment(dataset, train_cfg: TrainConfig, model_cfg: ModelConfig, repeats: int = 35,
                         seed: int = 0, per_class_test: int = 6, jobs: int = 1,
                         plans: list[SplitPlan] | None = None) -> ExperimentReport:
    """Train from scratch on every plan and evaluate on its test ids."""
    plans = plans if plans is not None else make_splits(dataset, repeats, per_class_test, seed)
    specs = [RunSpec(p, train_cfg, model_cfg, None, seed) for p in plans]
    metrics = ordered_map(_run_one, specs, jobs, _context(_as_pair(dataset)))
    rows = [{"repeat": p.repeat, **m} for p, m in zip(plans, metrics)]
    return ExperimentReport(rows, summarize(rows), plans)


def sweep_sizes(lo: int = 71, hi: int = 186, step: int = 5) -> list[int]:
    if step < 1 or lo < 1 or hi < lo:
        raise ValidationError("sweep needs 1 <= min <= max and step >= 1")
    return list(range(lo, hi + 1, step))


@dataclass
class SweepResult:
    sizes: list[int]
    per_run: dict  # (repeat, size) -> metrics dict, NaN-filled when a point is missing
    points: list[dict]  # per size: {field: (mean, min, max)}
    plans: list[SplitPlan] = field(default_factory=list)


SWEEP_FIELDS = ("acc", "auc_macro", "auc0", "auc1", "auc2")


def _run_point(ctx, spec: RunSpec) -> dict:
    try:
        return _run_one(ctx, spec)
    except DegenerateClass as exc:
        log.warning("missing sweep point (repeat %d, size %s): %s", spec.plan.repeat, spec.subset, exc)
        return {f: math.nan for f in ROW_FIELDS}


def sample_size_sweep(dataset, train_cfg: TrainConfig, model_cfg: ModelConfig, sizes, plans: list[SplitPlan],
                      seed: int = 0, jobs: int = 1) -> SweepResult:
    """Train on random subsets of each plan's training ids; test sets stay fixed per plan."""
    sizes = list(sizes)
    for p in plans:
        if max(sizes) > len(p.train_ids):
            raise ValidationError(f"sweep size {max(sizes)} exceeds training pool of {len(p.train_ids)}")
    specs = [RunSpec(p, train_cfg, model_cfg, n, seed) for p in plans for n in sizes]
    metrics = ordered_map(_run_point, specs, jobs, _context(_as_pair(dataset)))
    per_run = {(s.plan.repeat, s.subset): m for s, m in zip(specs, metrics)}
    points = []
    for n in sizes:
        pt = {}
        for f in SWEEP_FIELDS:
            vals = np.asarray([per_run[(p.repeat, n)][f] for p in plans])
            vals = vals[~np.isnan(vals)]
            pt[f] = (float(vals.mean()), float(vals.min()), float(vals.max())) if vals.size else (math.nan,) * 3
        points.append(pt)
    return SweepResult(sizes, per_run, points, plans)


def sweep_csv(res: SweepResult) -> str:
    head = ["size"] + [f"{f}_{s}" for f in SWEEP_FIELDS for s in ("mean", "min", "max")]
    lines = [",".join(head)]
    for n, pt in zip(res.sizes, res.points):
        lines.append(f"{n}," + ",".join(_fmt(v) for f in SWEEP_FIELDS for v in pt[f]))
    return "\n".join(lines) + "\n"


def sweep_svg(res: SweepResult, width: int = 720, panel_h: int = 150) -> str:
    """One panel per metric: min/max band in grey, mean as a line."""
    pad_l, pad_r, pad_t, gap = 50, 20, 20, 30
    height = pad_t + len(SWEEP_FIELDS) * (panel_h + gap)
    lo, hi = min(res.sizes), max(res.sizes)
    span = max(hi - lo, 1)

    def x(n):
        return pad_l + (n - lo) / span * (width - pad_l - pad_r)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">']
    for i, f in enumerate(SWEEP_FIELDS):
        top = pad_t + i * (panel_h + gap)

        def y(v):
            return top + (1 - v) * panel_h

        ok = [(n, pt[f]) for n, pt in zip(res.sizes, res.points) if not math.isnan(pt[f][0])]
        out.append(f'<rect x="{pad_l}" y="{top}" width="{width - pad_l - pad_r}" height="{panel_h}" '
                   f'fill="none" stroke="#888"/>')
        out.append(f'<text x="{pad_l + 4}" y="{top + 12}">{f.upper()}</text>')
        for v in (0.0, 0.5, 1.0):
            out.append(f'<text x="{pad_l - 6}" y="{y(v) + 4:.1f}" text-anchor="end">{v:.1f}</text>')
        if ok:
            band = [f"{x(n):.2f},{y(v[2]):.2f}" for n, v in ok] + [f"{x(n):.2f},{y(v[1]):.2f}" for n, v in reversed(ok)]
            out.append(f'<polygon points="{" ".join(band)}" fill="#ccc" stroke="none"/>')
            line = " ".join(f"{x(n):.2f},{y(v[0]):.2f}" for n, v in ok)
            out.append(f'<polyline points="{line}" fill="none" stroke="#c33" stroke-width="1.5"/>')
    bottom = pad_t + len(SWEEP_FIELDS) * (panel_h + gap) - gap + 14
    for n in (lo, hi):
        out.append(f'<text x="{x(n):.1f}" y="{bottom}" text-anchor="middle">{n}</text>')
    out.append(f'<text x="{width / 2:.0f}" y="{bottom}" text-anchor="middle">training samples</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


ABLATION_FIELDS = (("AUC", "auc_macro"), ("ACC", "acc"), ("AUC0", "auc0"), ("AUC1", "auc1"), ("AUC2", "auc2"))


@dataclass
class AblationResult:
    mode: str
    labels: list[str]
    reports: list[ExperimentReport]
    plans: list[SplitPlan]


def ablate(dataset, mode: str, train_cfg: TrainConfig, model_cfg: ModelConfig, repeats: int = 35, seed: int = 0,
           node_list=DEFAULT_ABLATION_NODES, per_class_test: int = 6, jobs: int = 1,
           plans: list[SplitPlan] | None = None) -> AblationResult:
    """Run every arm on the same plans and training seeds."""
    if mode == "gcn":
        arms = [("Full_model", dataclasses.replace(model_cfg, fusion=dataclasses.replace(model_cfg.fusion, no_gcn=False))),
                ("No_GCN", dataclasses.replace(model_cfg, fusion=dataclasses.replace(model_cfg.fusion, no_gcn=True)))]
    elif mode == "nodes":
        node_list = tuple(int(n) for n in node_list)
        if not node_list or min(node_list) < 1:
            raise ValidationError("node counts must be >= 1")
        if model_cfg.fusion.adjacency == "custom":
            raise ValidationError("node ablation needs a generated adjacency (bipartite or complete)")
        arms = [(str(n), dataclasses.replace(model_cfg, encoder=dataclasses.replace(model_cfg.encoder, n_image_nodes=n)))
                for n in node_list]
    else:
        raise ValidationError(f"ablation mode must be 'gcn' or 'nodes', got {mode!r}")
    plans = plans if plans is not None else make_splits(dataset, repeats, per_class_test, seed)
    specs = [RunSpec(p, train_cfg, cfg, None, seed) for _, cfg in arms for p in plans]
    metrics = ordered_map(_run_one, specs, jobs, _context(_as_pair(dataset)))
    reports = []
    for a in range(len(arms)):
        chunk = metrics[a * len(plans):(a + 1) * len(plans)]
        rows = [{"repeat": p.repeat, **m} for p, m in zip(plans, chunk)]
        reports.append(ExperimentReport(rows, summarize(rows), plans))
    return AblationResult(mode, [name for name, _ in arms], reports, plans)


def ablation_csv(res: AblationResult) -> str:
    first = "nodes" if res.mode == "nodes" else "model"
    head = [first] + [f"{c}_{s}" for c, _ in ABLATION_FIELDS for s in ("mean", "std")]
    lines = [",".join(head)]
    for name, rep in zip(res.labels, res.reports):
        lines.append(f"{name}," + ",".join(_fmt(v) for _, f in ABLATION_FIELDS for v in rep.summary[f]))
    return "\n".join(lines) + "\n"


def format_ablation(res: AblationResult) -> str:
    out = [f"{'':<12}" + "".join(f"{c:>18}" for c, _ in ABLATION_FIELDS)]
    for name, rep in zip(res.labels, res.reports):
        out.append(f"{name:<12}" + "".join(f"{rep.summary[f][0]:.3f} ± {rep.summary[f][1]:.3f}".rjust(18)
                                           for _, f in ABLATION_FIELDS))
    return "\n".join(out)
