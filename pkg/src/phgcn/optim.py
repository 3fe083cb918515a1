"""Adam, the mini-batch training loop and a finite-difference gradient checker."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import ActivationPattern
from .errors import NonFiniteGradient, TrainingDiverged, ValidationError
from .fusion import Batch, ModelConfig, collate, cross_entropy, forward_full, init_model

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.006
    batch_size: int = 2
    epochs: int = 30
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValidationError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValidationError("Adam betas must lie in [0, 1) and eps > 0")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update. Returns ``(new_params, state)``."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise NonFiniteGradient(name)
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m.get(name, torch.zeros_like(p)) * b1 + (1 - b1) * g
        v = state.v.get(name, torch.zeros_like(p)) * b2 + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = p - cfg.learning_rate * (m / c1) / (torch.sqrt(v / c2) + cfg.adam_eps)
    return new, state


@dataclass
class TrainResult:
    params: dict
    state: dict
    history: list
    init_params: dict


def batch_loss(params, bn_state, batch: Batch, model_cfg: ModelConfig, train: bool = True, gates=None):
    logits, new_state = forward_full(params, bn_state, batch, model_cfg, train, gates=gates)
    return cross_entropy(logits, batch.labels).mean(), new_state


def _seeds(seed: int) -> tuple[int, np.random.Generator]:
    ss = np.random.SeedSequence(int(seed))
    init_ss, shuffle_ss = ss.spawn(2)
    return int(init_ss.generate_state(1, dtype=np.uint64)[0]), np.random.default_rng(shuffle_ss)


def train(dataset, cfg: TrainConfig, model_cfg: ModelConfig) -> TrainResult:
    """Adam on mean per-sample cross-entropy; deterministic given (dataset, cfg).

    ``dataset`` is a list of preprocessed samples or an already collated
    :class:`Batch`.
    """
    cfg.validate()
    data = dataset if isinstance(dataset, Batch) else collate(dataset, DTYPES[cfg.dtype])
    n = len(data)
    if n == 0:
        raise ValidationError("training set is empty")
    init_seed, shuffle_rng = _seeds(cfg.seed)
    params, bn_state = init_model(model_cfg, init_seed, DTYPES[cfg.dtype])
    init = {k: v.clone() for k, v in params.items()}
    adam = AdamState()
    names = list(params)
    history = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n) if cfg.shuffle else np.arange(n)
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            leaves = {k: params[k].detach().requires_grad_(True) for k in names}
            loss, bn_state = batch_loss(leaves, bn_state, data.take(idx), model_cfg, train=True)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = torch.autograd.grad(loss, [leaves[k] for k in names])
            with torch.no_grad():
                params, adam = adam_step({k: params[k].detach() for k in names},
                                         dict(zip(names, grads)), adam, cfg)
            total += float(loss.detach()) * len(idx)
        history.append(total / n)
        log.debug("epoch %d mean loss %.6f", epoch + 1, history[-1])
    return TrainResult({k: v.detach() for k, v in params.items()}, bn_state, history, init)


# -- gradient checking -------------------------------------------------------------

@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    argmax: tuple
    passed: bool
    tolerance: float
    n_checked: int
    n_kinked: int = 0


@dataclass
class GradReport:
    tensors: list[TensorCheck]

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    def failing(self) -> list[str]:
        return [t.name for t in self.tensors if not t.passed]

    def lines(self) -> list[str]:
        return [f"{'ok  ' if t.passed else 'FAIL'} {t.name:<24} max_rel={t.max_rel_error:.3e} "
                f"at {t.argmax} ({t.n_checked} coords, {t.n_kinked} straddle a kink)" for t in self.tensors]


def check_gradients(loss_fn, params: dict, grads: dict, h_rel: float = 1e-4, tol: float = 1e-3,
                    max_coords: int = 64, seed: int = 0, abs_floor: float = 1e-6,
                    crossed=None) -> GradReport:
    """Compare ``grads`` with central differences of ``loss_fn(params)``.

    Step per coordinate is ``h_rel * max(1, |theta|)``; relative error is
    ``|a - n| / max(|a|, |n|, abs_floor)``. At most ``max_coords``
    coordinates per tensor are sampled with a fixed seed. ``crossed``, if
    given, is polled after each coordinate and should return whether the
    perturbation flipped a non-differentiable decision.
    """
    rng = np.random.default_rng(seed)
    work = {k: v.detach().clone() for k, v in params.items()}
    checks = []
    for name in sorted(params):
        p = work[name]
        flat = p.view(-1)
        size = flat.numel()
        coords = np.arange(size) if size <= max_coords else np.sort(rng.choice(size, max_coords, replace=False))
        analytic = grads[name].detach().reshape(-1)
        worst, where, kinked = 0.0, (), 0
        for c in coords:
            orig = flat[c].item()
            h = h_rel * max(1.0, abs(orig))
            flat[c] = orig + h
            up = float(loss_fn(work))
            flat[c] = orig - h
            down = float(loss_fn(work))
            flat[c] = orig
            if crossed is not None and crossed():
                kinked += 1
            num = (up - down) / (2 * h)
            a = float(analytic[c])
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            if err >= worst:
                worst, where = err, tuple(int(i) for i in np.unravel_index(int(c), tuple(p.shape)))
        checks.append(TensorCheck(name, worst, where, worst <= tol, tol, len(coords), kinked))
    return GradReport(checks)


def grad_check(model_cfg: ModelConfig, batch: Batch, dtype=torch.float64, h_rel: float = 1e-4,
               tol: float = 1e-3, seed: int = 0, max_coords: int = 64, params=None, bn_state=None,
               piecewise: bool = True) -> GradReport:
    """Autograd vs finite differences for every parameter tensor of the full model.

    BatchNorm runs in train mode on the fixed ``batch`` (needs >= 2 samples).
    With ``piecewise`` the finite-difference loss keeps the ReLU masks and
    max-pool winners recorded at the unperturbed point, so a step that would
    cross a kink still differentiates the piece autograd differentiates; the
    report counts how many coordinates were affected.
    """
    if len(batch) < 2:
        raise ValidationError("grad_check needs a batch of at least 2 samples")
    if params is None:
        params, bn_state = init_model(model_cfg, seed, dtype)
    params = {k: v.to(dtype) for k, v in params.items()}
    bn_state = {k: v.to(dtype) for k, v in bn_state.items()}
    batch = Batch(batch.sax.to(dtype), batch.ch4.to(dtype), batch.clinical.to(dtype), batch.labels)

    pattern = ActivationPattern()
    leaves = {k: v.clone().requires_grad_(True) for k, v in params.items()}
    loss, _ = batch_loss(leaves, bn_state, batch, model_cfg, train=True, gates=pattern)
    names = sorted(leaves)
    grads = dict(zip(names, torch.autograd.grad(loss, [leaves[k] for k in names])))
    pattern.freeze()

    def loss_fn(p):
        with torch.no_grad():
            if piecewise:
                return batch_loss(p, bn_state, batch, model_cfg, train=True, gates=pattern)[0]
            probe = ActivationPattern()
            probe.store, probe.replay = pattern.store, True
            # probe only counts flips; the raw loss below ignores the pattern
            batch_loss(p, bn_state, batch, model_cfg, train=True, gates=probe)
            pattern.changed += probe.changed
            return batch_loss(p, bn_state, batch, model_cfg, train=True)[0]

    def crossed():
        flipped = pattern.changed > 0
        pattern.changed = 0
        return flipped

    return check_gradients(loss_fn, params, grads, h_rel, tol, max_coords, seed, crossed=crossed)
