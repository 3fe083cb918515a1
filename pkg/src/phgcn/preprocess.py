"""Raw series -> fixed-shape model inputs, plus the pulmonary-artery RAC feature."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import warnings

import numpy as np
from scipy import ndimage

from .cohort import FLAG_NAMES, RawSample
from .errors import EmptyPaMask, EmptyRoi, ValidationError
from .tensorio import read_json, read_tensor, write_json, write_tensor

CLINICAL_NODE_NAMES = ("age_norm", "sex", *FLAG_NAMES, "rac")


@dataclass(frozen=True)
class PreprocessConfig:
    target_spacing: float = 1.4
    sax_shape: tuple[int, int, int] = (144, 144, 12)
    ch4_shape: tuple[int, int] = (160, 160)
    frames_out: int = 5
    frame_step: int = 5
    roi_margin_px: int = 2

    def validate(self, raw_frames: int | None = None) -> None:
        if not self.target_spacing > 0:
            raise ValidationError("target_spacing must be > 0")
        if len(self.sax_shape) != 3 or len(self.ch4_shape) != 2:
            raise ValidationError("sax_shape needs 3 dims and ch4_shape 2 dims")
        if min(self.sax_shape) < 1 or min(self.ch4_shape) < 1:
            raise ValidationError("target shapes must be positive")
        if self.frames_out < 1 or self.frame_step < 1 or self.roi_margin_px < 0:
            raise ValidationError("frames_out, frame_step must be >= 1 and roi_margin_px >= 0")
        if raw_frames is not None and (self.frames_out - 1) * self.frame_step >= raw_frames:
            raise ValidationError(
                f"{self.frames_out} frames at step {self.frame_step} need more than {raw_frames} raw frames")


@dataclass
class RacResult:
    areas_mm2: np.ndarray
    max_area: float
    min_area: float
    rac: float


@dataclass
class Sample:
    id: str
    sax: np.ndarray  # [H, W, D, T]
    ch4: np.ndarray  # [H, W, T]
    clinical_nodes: np.ndarray  # [11], ordered as CLINICAL_NODE_NAMES
    label: int


def _output_grid(n_in: int, spacing: float, target: float) -> int:
    # keep every sample point inside the source extent
    return int(np.floor((n_in - 1) * spacing / target + 1e-9)) + 1


def resample_spacing(image, spacing: float, target: float, n_spatial: int | None = None, order: int = 3):
    """Resample the leading ``n_spatial`` axes from ``spacing`` to ``target`` mm.

    Cubic spline interpolation (``order=3``) with mirror boundaries; output
    index ``j`` samples source coordinate ``j * target / spacing``. Trailing
    axes (time) are processed independently. Returns ``(array, target)``.
    """
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("empty image")
    if spacing <= 0 or target <= 0:
        raise ValueError("spacings must be positive")
    if not np.all(np.isfinite(image)):
        raise ValueError("image contains non-finite values")
    n_spatial = image.ndim if n_spatial is None else n_spatial
    if spacing == target:
        return image.copy(), target

    scale = target / spacing
    spatial = image.shape[:n_spatial]
    out_shape = tuple(_output_grid(n, spacing, target) for n in spatial)
    trailing = image.shape[n_spatial:]
    flat = image.reshape(spatial + (-1,))
    out = np.empty(out_shape + (flat.shape[-1],), dtype=image.dtype if image.dtype.kind == "f" else np.float64)
    with warnings.catch_warnings():
        # a 1-D matrix selects scipy's separable zoom path (behaviour note only)
        warnings.simplefilter("ignore", UserWarning)
        for k in range(flat.shape[-1]):
            out[..., k] = ndimage.affine_transform(
                flat[..., k].astype(np.float64), np.full(n_spatial, scale),
                output_shape=out_shape, order=order, mode="mirror")
    return out.reshape(out_shape + trailing), target


def resample_mask(mask, spacing: float, target: float, n_spatial: int | None = None):
    """Nearest-neighbour counterpart of :func:`resample_spacing` for binary masks."""
    mask = np.asarray(mask)
    if spacing == target:
        return mask.copy()
    out, _ = resample_spacing(mask.astype(np.float64), spacing, target, n_spatial, order=0)
    return (out > 0.5).astype(np.uint8)


def crop_roi(image, roi_mask, margin_px: int = 0):
    """Crop the leading axes of ``image`` to the mask's bounding box plus a margin."""
    image = np.asarray(image)
    roi_mask = np.asarray(roi_mask)
    if image.shape[:roi_mask.ndim] != roi_mask.shape:
        raise ValueError(f"mask shape {roi_mask.shape} does not match image {image.shape}")
    nz = np.nonzero(roi_mask)
    if nz[0].size == 0:
        raise EmptyRoi("EmptyRoi: ROI mask has no foreground voxels")
    slices = tuple(
        slice(max(0, int(idx.min()) - margin_px), min(n, int(idx.max()) + 1 + margin_px))
        for idx, n in zip(nz, roi_mask.shape)
    )
    return image[slices].copy()


def standardize_shape(image, target_dims):
    """Zero-pad (extra voxel on the high side) or centre-crop the leading axes to ``target_dims``."""
    image = np.asarray(image)
    target_dims = tuple(int(t) for t in target_dims)
    if any(t < 1 for t in target_dims):
        raise ValueError("target dims must be positive")
    crop, pad = [], []
    for n, t in zip(image.shape, target_dims):
        if n >= t:
            start = (n - t) // 2
            crop.append(slice(start, start + t))
            pad.append((0, 0))
        else:
            crop.append(slice(None))
            lo = (t - n) // 2
            pad.append((lo, t - n - lo))
    rest = image.ndim - len(target_dims)
    out = image[tuple(crop)]
    return np.pad(out, pad + [(0, 0)] * rest)


def subsample_frames(series, frames_out: int, frame_step: int):
    """Frames ``0, step, 2*step, ...`` along the last axis."""
    series = np.asarray(series)
    n = series.shape[-1]
    if frames_out < 1 or frame_step < 1:
        raise ValueError("frames_out and frame_step must be >= 1")
    if (frames_out - 1) * frame_step >= n:
        raise ValueError(f"need more than {(frames_out - 1) * frame_step} frames, series has {n}")
    return series[..., 0:(frames_out - 1) * frame_step + 1:frame_step].copy()


def compute_rac(pa_mask_series, spacing: float) -> RacResult:
    """Relative area change (max - min) / min of a [h, w, frames] mask series."""
    masks = np.asarray(pa_mask_series)
    counts = (masks != 0).reshape(-1, masks.shape[-1]).sum(axis=0)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise EmptyPaMask(f"EmptyPaMask: frames {empty} have no foreground pixels")
    areas = counts.astype(np.float64) * spacing * spacing
    mx, mn = float(areas.max()), float(areas.min())
    return RacResult(areas, mx, mn, (mx - mn) / mn)


def normalize_age(age: float, cohort_min: float, cohort_max: float) -> float:
    if cohort_min > cohort_max:
        raise ValueError("cohort_min > cohort_max")
    if cohort_max == cohort_min:
        return 0.5
    return float(np.clip((age - cohort_min) / (cohort_max - cohort_min), 0.0, 1.0))


def clinical_nodes(raw: RawSample, age_range: tuple[float, float], rac: float) -> np.ndarray:
    c = raw.clinical
    vals = [normalize_age(c.age_years, *age_range), c.sex, *c.flags(), rac]
    return np.asarray(vals, dtype=np.float64)


def _prepare(series, roi, spacing, cfg: PreprocessConfig, target_dims):
    n_sp = len(target_dims)
    # every step below is per-frame, so subsampling first gives identical output
    series = subsample_frames(series, cfg.frames_out, cfg.frame_step)
    series, _ = resample_spacing(series, spacing, cfg.target_spacing, n_spatial=n_sp)
    roi = resample_mask(roi, spacing, cfg.target_spacing, n_spatial=n_sp)
    series = crop_roi(series, roi, cfg.roi_margin_px)
    return standardize_shape(series, target_dims).astype(np.float32)


def build_sample(raw: RawSample, cfg: PreprocessConfig, age_range: tuple[float, float]) -> Sample:
    try:
        sax = _prepare(raw.sax_raw, raw.sax_roi_mask, raw.spacing, cfg, cfg.sax_shape)
        ch4 = _prepare(raw.ch4_raw, raw.ch4_roi_mask, raw.spacing, cfg, cfg.ch4_shape)
        rac = compute_rac(raw.pa_mask_raw, raw.spacing).rac
    except ValueError as exc:
        raise type(exc)(f"sample {raw.id}: {exc}") from exc
    return Sample(raw.id, sax, ch4, clinical_nodes(raw, age_range, rac), raw.label)


def preprocess_cohort(cohort, cfg: PreprocessConfig, age_range=None) -> list[Sample]:
    """Preprocess every sample; the age range defaults to the cohort's own min/max."""
    if age_range is None:
        ages = cohort.ages()
        age_range = (min(ages), max(ages))
    return [build_sample(raw, cfg, age_range) for raw in cohort]


# -- preprocessed cohort directories ---------------------------------------------

FORMAT = "phgcn-preprocessed/1"


def write_dataset(samples, out_dir, cfg: PreprocessConfig, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        files = {"sax": f"tensors/{s.id}_sax.pht", "ch4": f"tensors/{s.id}_ch4.pht"}
        write_tensor(out / files["sax"], s.sax)
        write_tensor(out / files["ch4"], s.ch4)
        entries.append({"id": s.id, "label": int(s.label), "files": files,
                        "clinical_nodes": [float(v) for v in s.clinical_nodes]})
    manifest = {"format": FORMAT, "clinical_node_names": list(CLINICAL_NODE_NAMES),
                "preprocess_config": asdict(cfg), "samples": entries}
    if extra:
        manifest.update(extra)
    write_json(out / "manifest.json", manifest)
    write_json(out / "preprocess_config.json", asdict(cfg))
    return out


def read_dataset(path) -> tuple[list[Sample], dict]:
    """Load a preprocessed directory; returns (samples, manifest)."""
    path = Path(path)
    manifest = read_json(path / "manifest.json")
    if manifest.get("format") != FORMAT:
        raise ValidationError(f"{path}: not a preprocessed cohort (format={manifest.get('format')!r})")
    samples = []
    for e in manifest["samples"]:
        samples.append(Sample(e["id"], read_tensor(path / e["files"]["sax"]),
                              read_tensor(path / e["files"]["ch4"]),
                              np.asarray(e["clinical_nodes"], dtype=np.float64), int(e["label"])))
    return samples, manifest
