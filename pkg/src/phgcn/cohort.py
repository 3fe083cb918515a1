"""Synthetic cohort generator.

Every quantity here is an invented stand-in for private clinical data: a
deforming annular "myocardium" phantom for the short-axis (SAX) series, a
two-chamber elliptical phantom for the four-chamber (4CH) series, a pulsating
disk for the pulmonary-artery cross-section, and Bernoulli clinical flags.
Class signal is planted in chamber size, wall-motion amplitude, the
pulmonary-artery relative area change (RAC) and a few flag rates.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ValidationError
from .tensorio import read_json, read_tensor, write_json, write_tensor

LABEL_NAMES = ("Non-PH", "Pre-capillary PH", "Post-capillary PH")
FLAG_NAMES = ("ihd", "dcm", "vhd", "copd", "portal_htn", "rid", "hyperthyroid", "renal_insuff")

# Per-class Bernoulli rates, ordered as FLAG_NAMES.
DEFAULT_FLAG_RATES = (
    (0.05, 0.15, 0.30, 0.03, 0.02, 0.15, 0.02, 0.04),
    (0.05, 0.15, 0.30, 0.04, 0.06, 0.55, 0.03, 0.05),
    (0.15, 0.70, 0.80, 0.02, 0.02, 0.10, 0.02, 0.08),
)

# label -> (LV cavity radius mm, LV wall-motion amplitude, RV half-width mm, RV motion amplitude)
PHANTOM_CLASS_PARAMS = (
    (24.0, 0.30, 16.0, 0.25),
    (20.0, 0.18, 26.0, 0.10),
    (30.0, 0.12, 18.0, 0.15),
)
WALL_MM = 9.0
EDGE_MM = 1.0
PA_SHAPE = (64, 64)


@dataclass(frozen=True)
class CohortSpec:
    n_per_class: tuple[int, int, int] = (60, 112, 32)
    seed: int = 0
    noise_sigma: float = 0.05
    rac_params: tuple[tuple[float, float], ...] = ((0.60, 0.08), (0.15, 0.05), (0.35, 0.07))
    raw_frames: int = 25
    spacing_range: tuple[float, float] = (1.2, 1.6)
    sax_raw_shape: tuple[int, int, int] = (160, 160, 14)
    ch4_raw_shape: tuple[int, int] = (176, 176)
    flag_rates: tuple[tuple[float, ...], ...] = DEFAULT_FLAG_RATES
    male_rate: float = 0.6
    age_range: tuple[float, float] = (18.0, 90.0)

    def validate(self) -> None:
        if len(self.n_per_class) != 3 or any(n < 0 for n in self.n_per_class):
            raise ValidationError("n_per_class must be three non-negative counts")
        if sum(self.n_per_class) == 0:
            raise ValidationError("cohort is empty: n_per_class sums to 0")
        if len(self.rac_params) != 3 or any(m <= 0 or s < 0 for m, s in self.rac_params):
            raise ValidationError("rac_params needs three (mean > 0, stddev >= 0) pairs")
        lo, hi = self.spacing_range
        if not (0 < lo <= hi < 10):
            raise ValidationError(f"spacing_range {self.spacing_range} must lie within (0, 10)")
        if self.raw_frames < 5:
            raise ValidationError("raw_frames must be >= 5")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if len(self.flag_rates) != 3 or any(len(r) != len(FLAG_NAMES) for r in self.flag_rates):
            raise ValidationError("flag_rates must be 3 rows of 8 probabilities")

    @property
    def labels(self) -> list[int]:
        return [k for k, n in enumerate(self.n_per_class) for _ in range(n)]


@dataclass
class ClinicalRecord:
    age_years: float
    sex: int
    ihd: int = 0
    dcm: int = 0
    vhd: int = 0
    copd: int = 0
    portal_htn: int = 0
    rid: int = 0
    hyperthyroid: int = 0
    renal_insuff: int = 0

    def flags(self) -> list[int]:
        return [getattr(self, name) for name in FLAG_NAMES]

    def to_dict(self) -> dict:
        return {"age_years": self.age_years, "sex": self.sex, **dict(zip(FLAG_NAMES, self.flags()))}


@dataclass
class RawSample:
    id: str
    label: int
    spacing: float
    sax_raw: np.ndarray  # [H, W, D, F] float32
    ch4_raw: np.ndarray  # [H, W, F] float32
    pa_mask_raw: np.ndarray  # [h, w, F] uint8
    sax_roi_mask: np.ndarray  # [H, W, D] uint8
    ch4_roi_mask: np.ndarray  # [H, W] uint8
    clinical: ClinicalRecord
    rac_target: float = field(default=0.0, repr=False)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def _cycle(n_frames: int) -> np.ndarray:
    """0 at end-diastole, ~1 at mid-cycle."""
    t = np.arange(n_frames)
    return (1.0 - np.cos(2 * np.pi * t / n_frames)) / 2.0


def gen_pa_mask_series(label: int, spec: CohortSpec, rng: np.random.Generator,
                       shape=PA_SHAPE, spacing: float = 1.4, rac: float | None = None):
    """Pulsating disk for the pulmonary-artery cross-section.

    The radius follows ``r_min + (r_max - r_min) * (1 - cos) / 2`` with
    ``r_max = r_min * sqrt(1 + rac)``. Each frame keeps the ``round(pi r^2)``
    pixels nearest the centre, so every pixel count is within one of the
    continuous disk area and the measured RAC tracks the analytic target.

    Returns ``(mask [h, w, F] uint8, rac_drawn)``.
    """
    if label not in (0, 1, 2):
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    if rac is None:
        mean, sd = spec.rac_params[label]
        rac = max(0.0, float(rng.normal(mean, sd)))
    r_min_mm = float(rng.uniform(10.0, 14.0))
    r_min = r_min_mm / spacing
    r_max = r_min * np.sqrt(1.0 + rac)
    radii = r_min + (r_max - r_min) * _cycle(spec.raw_frames)

    h, w = shape
    # off-lattice centre so pixel counts grow in small steps
    cy = (h - 1) / 2 + float(rng.uniform(-0.5, 0.5)) + 0.137
    cx = (w - 1) / 2 + float(rng.uniform(-0.5, 0.5)) + 0.291
    yy, xx = np.mgrid[0:h, 0:w]
    dist2 = (yy - cy) ** 2 + (xx - cx) ** 2
    d2 = np.sort(dist2.ravel())
    mask = np.zeros((h, w, spec.raw_frames), dtype=np.uint8)
    for f, r in enumerate(radii):
        count = max(1, int(round(np.pi * r * r)))
        count = min(count, d2.size)
        # threshold at the count-th smallest distance; ties resolved by inclusion
        mask[:, :, f] = dist2 <= d2[count - 1]
    return mask, rac


def _render_sax(label: int, spec: CohortSpec, rng: np.random.Generator, spacing: float):
    rc0, amp, _, _ = PHANTOM_CLASS_PARAMS[label]
    rc0 *= float(rng.uniform(0.9, 1.1))
    amp *= float(rng.uniform(0.85, 1.15))
    H, W, D = spec.sax_raw_shape
    F = spec.raw_frames
    off = rng.uniform(-6.0, 6.0, size=2)
    y = (np.arange(H) - (H - 1) / 2) * spacing - off[0]
    x = (np.arange(W) - (W - 1) / 2) * spacing - off[1]
    r = np.hypot(y[:, None], x[None, :])
    z = (np.arange(D) - (D - 1) / 2) * spacing
    taper = np.sqrt(np.clip(1.0 - (z / 45.0) ** 2, 0.0, 1.0))
    cavity = rc0 * taper[:, None] * (1.0 - amp * _cycle(F))[None, :]  # [D, F]
    outer = cavity + WALL_MM * (1.0 + 0.3 * amp * _cycle(F))[None, :]
    rr = r[:, :, None, None].astype(np.float32)
    outer, cavity = outer.astype(np.float32), cavity.astype(np.float32)
    img = 0.4 * expit((outer - rr) / EDGE_MM) + 0.5 * expit((cavity - rr) / EDGE_MM)
    img += np.float32(spec.noise_sigma) * rng.standard_normal(img.shape, dtype=np.float32)
    roi = np.broadcast_to((r <= outer.max() + 2.0)[:, :, None], (H, W, D))
    return img.astype(np.float32), roi.astype(np.uint8)


def _ellipse_dist(y, x, cy, cx, ay, ax):
    """Approximate signed distance (mm) to an axis-aligned ellipse; negative inside."""
    d = np.sqrt(((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2)
    return (d - 1.0) * np.minimum(ay, ax)


def _render_ch4(label: int, spec: CohortSpec, rng: np.random.Generator, spacing: float):
    rc0, amp, rv0, rv_amp = PHANTOM_CLASS_PARAMS[label]
    rc0 *= float(rng.uniform(0.9, 1.1))
    rv0 *= float(rng.uniform(0.9, 1.1))
    amp *= float(rng.uniform(0.85, 1.15))
    rv_amp *= float(rng.uniform(0.85, 1.15))
    H, W = spec.ch4_raw_shape
    F = spec.raw_frames
    off = rng.uniform(-6.0, 6.0, size=2)
    y = ((np.arange(H) - (H - 1) / 2) * spacing - off[0])[:, None, None]
    x = ((np.arange(W) - (W - 1) / 2) * spacing - off[1])[None, :, None]
    c = _cycle(F)[None, None, :]
    lv_cx, rv_cx = rc0 * 0.6 + 6.0, -(rv0 * 0.8 + 10.0)
    lv_s = 1.0 - amp * c
    rv_s = 1.0 - rv_amp * c
    lv = _ellipse_dist(y, x, 0.0, lv_cx, 1.8 * rc0 * lv_s, rc0 * lv_s)
    rv = _ellipse_dist(y, x, 6.0, rv_cx, 1.5 * rv0 * rv_s, rv0 * rv_s)
    cavity = np.minimum(lv, rv).astype(np.float32)
    img = 0.4 * expit((WALL_MM - cavity) / EDGE_MM) + 0.5 * expit(-cavity / EDGE_MM)
    img += np.float32(spec.noise_sigma) * rng.standard_normal(img.shape, dtype=np.float32)
    roi = (cavity[:, :, 0] <= WALL_MM * 1.3 + 2.0)
    return img.astype(np.float32), roi.astype(np.uint8)


def _clinical(label: int, spec: CohortSpec, rng: np.random.Generator) -> ClinicalRecord:
    age = float(rng.uniform(*spec.age_range))
    sex = int(rng.random() < spec.male_rate)
    flags = (rng.random(len(FLAG_NAMES)) < np.asarray(spec.flag_rates[label])).astype(int)
    return ClinicalRecord(age, sex, **{k: int(v) for k, v in zip(FLAG_NAMES, flags)})


def gen_sample(spec: CohortSpec, index: int) -> RawSample:
    label = spec.labels[index]
    rng = sample_rng(spec.seed, index)
    spacing = float(rng.uniform(*spec.spacing_range))
    clinical = _clinical(label, spec, rng)
    pa, rac = gen_pa_mask_series(label, spec, rng, spacing=spacing)
    sax, sax_roi = _render_sax(label, spec, rng, spacing)
    ch4, ch4_roi = _render_ch4(label, spec, rng, spacing)
    return RawSample(f"s{index:04d}", label, spacing, sax, ch4, pa, sax_roi, ch4_roi, clinical, rac)


class Cohort(Sequence):
    """Lazily rendered cohort; item ``i`` depends only on (spec, i).

    A full-size cohort is several GB of float32 images, so samples are
    rendered on access instead of being held in memory.
    """

    def __init__(self, spec: CohortSpec):
        spec.validate()
        self.spec = spec
        self._labels = spec.labels

    def __len__(self) -> int:
        return len(self._labels)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return gen_sample(self.spec, index)

    @property
    def labels(self) -> list[int]:
        return list(self._labels)

    def ages(self) -> list[float]:
        # clinical draws come first in each sample stream, so this skips rendering
        out = []
        for i, label in enumerate(self._labels):
            rng = sample_rng(self.spec.seed, i)
            rng.uniform(*self.spec.spacing_range)
            out.append(_clinical(label, self.spec, rng).age_years)
        return out


def gen_cohort(spec: CohortSpec) -> Cohort:
    return Cohort(spec)


# -- on-disk layout ------------------------------------------------------------

RAW_FILES = ("sax_raw", "ch4_raw", "pa_mask_raw", "sax_roi_mask", "ch4_roi_mask")


def write_cohort(cohort, out_dir, spec: CohortSpec | None = None) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in cohort:
        files = {}
        for key in RAW_FILES:
            rel = f"tensors/{s.id}_{key}.pht"
            write_tensor(out / rel, getattr(s, key))
            files[key] = rel
        entries.append({
            "id": s.id,
            "label": s.label,
            "spacing_mm": s.spacing,
            "files": files,
            "clinical": s.clinical.to_dict(),
        })
    manifest = {"format": "phgcn-raw-cohort/1", "samples": entries}
    if spec is not None:
        manifest["cohort_spec"] = _spec_dict(spec)
    write_json(out / "manifest.json", manifest)
    return out


def _spec_dict(spec: CohortSpec) -> dict:
    from dataclasses import asdict
    return asdict(spec)


class RawCohortDir(Sequence):
    """Read-only view over a cohort directory written by :func:`write_cohort`."""

    def __init__(self, path):
        self.path = Path(path)
        manifest = read_json(self.path / "manifest.json")
        if manifest.get("format") != "phgcn-raw-cohort/1":
            raise ValidationError(f"{self.path}: not a raw cohort directory (format={manifest.get('format')!r})")
        self.entries = manifest["samples"]

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        e = self.entries[index]
        arrays = {k: read_tensor(self.path / e["files"][k]) for k in RAW_FILES}
        return RawSample(e["id"], int(e["label"]), float(e["spacing_mm"]),
                         clinical=ClinicalRecord(**e["clinical"]), **arrays)

    @property
    def labels(self) -> list[int]:
        return [int(e["label"]) for e in self.entries]

    def ages(self) -> list[float]:
        return [float(e["clinical"]["age_years"]) for e in self.entries]
