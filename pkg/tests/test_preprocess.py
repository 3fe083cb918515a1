import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from phgcn.cohort import gen_cohort
from phgcn.errors import EmptyPaMask, EmptyRoi, ValidationError
from phgcn.preprocess import (CLINICAL_NODE_NAMES, PreprocessConfig, build_sample, compute_rac, crop_roi,
                              normalize_age, preprocess_cohort, read_dataset, resample_mask, resample_spacing,
                              standardize_shape, subsample_frames, write_dataset)


def test_linear_ramp_survives_cubic_resampling_in_interior():
    # a cubic spline reproduces linear functions; the mirror boundary only disturbs a few edge voxels
    src_sp, dst_sp = 1.3, 1.4
    i, j = np.arange(60) * src_sp, np.arange(50) * src_sp
    img = 2.0 + 0.5 * i[:, None] - 0.25 * j[None, :]
    out, sp = resample_spacing(img, src_sp, dst_sp)
    assert sp == dst_sp
    assert out.shape == (int((60 - 1) * src_sp / dst_sp) + 1, int((50 - 1) * src_sp / dst_sp) + 1)
    y, x = np.arange(out.shape[0]) * dst_sp, np.arange(out.shape[1]) * dst_sp
    ref = 2.0 + 0.5 * y[:, None] - 0.25 * x[None, :]
    assert np.abs(out - ref)[12:-12, 12:-12].max() < 1e-6


def test_resample_identity_is_a_copy():
    img = np.random.default_rng(0).standard_normal((5, 6, 3)).astype(np.float32)
    out, _ = resample_spacing(img, 1.4, 1.4)
    assert out is not img and np.array_equal(out, img)


def test_resample_keeps_trailing_axes_independent():
    rng = np.random.default_rng(1)
    img = rng.standard_normal((20, 18, 4))
    out, _ = resample_spacing(img, 1.5, 1.4, n_spatial=2)
    for t in range(4):
        single, _ = resample_spacing(img[..., t], 1.5, 1.4)
        assert np.array_equal(out[..., t], single)


def test_resample_rejects_bad_input():
    with pytest.raises(ValueError):
        resample_spacing(np.array([[np.nan, 1.0]]), 1.2, 1.4)
    with pytest.raises(ValueError):
        resample_spacing(np.zeros((0, 3)), 1.2, 1.4)


def test_resample_mask_stays_binary():
    m = np.zeros((30, 30), np.uint8)
    m[10:20, 5:25] = 1
    out = resample_mask(m, 1.3, 1.4)
    assert set(np.unique(out)) <= {0, 1} and out.sum() > 0


def test_crop_roi_by_hand():
    img = np.arange(100).reshape(10, 10)
    mask = np.zeros((10, 10), np.uint8)
    mask[3:5, 6:8] = 1
    assert np.array_equal(crop_roi(img, mask), img[3:5, 6:8])
    assert np.array_equal(crop_roi(img, mask, margin_px=2), img[1:7, 4:10])


def test_crop_roi_empty_mask():
    with pytest.raises(EmptyRoi, match="EmptyRoi"):
        crop_roi(np.ones((4, 4)), np.zeros((4, 4)))


def test_standardize_shape_by_hand():
    a = np.arange(1, 4)  # [1, 2, 3]
    assert standardize_shape(a, (6,)).tolist() == [0, 1, 2, 3, 0, 0]
    assert standardize_shape(np.arange(7), (3,)).tolist() == [2, 3, 4]
    assert standardize_shape(np.arange(6), (3,)).tolist() == [1, 2, 3]


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=9),
                  elements=st.floats(-5, 5, width=32)),
       st.lists(st.integers(1, 12), min_size=3, max_size=3))
def test_standardize_shape_always_hits_target(img, dims):
    dims = tuple(dims[:img.ndim])
    out = standardize_shape(img, dims)
    assert out.shape == dims
    # padding adds zeros only; cropping keeps a contiguous block, so the multiset of kept values is a subset
    assert np.count_nonzero(out) <= np.count_nonzero(img)


def test_standardize_keeps_trailing_time_axis():
    out = standardize_shape(np.ones((5, 7, 3)), (8, 4))
    assert out.shape == (8, 4, 3)


def test_subsample_frames():
    s = np.arange(25)
    assert subsample_frames(s, 5, 5).tolist() == [0, 5, 10, 15, 20]
    with pytest.raises(ValueError):
        subsample_frames(np.arange(20), 5, 5)


def test_rac_hand_case():
    masks = np.zeros((20, 20, 3), np.uint8)
    for f, n in enumerate((100, 150, 120)):
        masks[..., f].flat[:n] = 1
    res = compute_rac(masks, 1.4)
    assert res.rac == pytest.approx(0.5, abs=1e-12)
    assert res.max_area == pytest.approx(150 * 1.96) and res.min_area == pytest.approx(100 * 1.96)


def test_rac_constant_area_is_exactly_zero():
    masks = np.zeros((8, 8, 5), np.uint8)
    masks[2:5, 2:5, :] = 1
    assert compute_rac(masks, 1.37).rac == 0.0


def test_rac_empty_frame():
    masks = np.ones((4, 4, 3), np.uint8)
    masks[..., 1] = 0
    with pytest.raises(EmptyPaMask, match=r"\[1\]"):
        compute_rac(masks, 1.4)


@given(st.floats(0, 120), st.floats(0, 60), st.floats(0, 60))
def test_age_normalisation_in_unit_interval(age, lo, extra):
    v = normalize_age(age, lo, lo + extra)
    assert 0.0 <= v <= 1.0
    if extra == 0:
        assert v == 0.5


def test_config_validation():
    with pytest.raises(ValidationError):
        PreprocessConfig(frames_out=6).validate(raw_frames=25)
    PreprocessConfig().validate(raw_frames=25)  # frames 0, 5, ..., 20


def test_built_sample_shapes_and_roundtrip(small_spec, tmp_path):
    cfg = PreprocessConfig(target_spacing=5.6, sax_shape=(36, 36, 3), ch4_shape=(40, 40))
    coh = gen_cohort(small_spec)
    samples = preprocess_cohort(coh, cfg)
    ages = coh.ages()
    for raw, s in zip(coh, samples):
        assert s.sax.shape == (36, 36, 3, 5) and s.sax.dtype == np.float32
        assert s.ch4.shape == (40, 40, 5)
        assert s.clinical_nodes.shape == (len(CLINICAL_NODE_NAMES),) == (11,)
        assert s.clinical_nodes[0] == normalize_age(raw.clinical.age_years, min(ages), max(ages))
        assert s.clinical_nodes[-1] == compute_rac(raw.pa_mask_raw, raw.spacing).rac
    write_dataset(samples, tmp_path / "d", cfg)
    back, manifest = read_dataset(tmp_path / "d")
    assert manifest["clinical_node_names"] == list(CLINICAL_NODE_NAMES)
    for a, b in zip(samples, back):
        assert a.id == b.id and np.array_equal(a.sax, b.sax) and np.array_equal(a.clinical_nodes, b.clinical_nodes)


def test_sample_errors_name_the_sample(small_spec):
    raw = gen_cohort(small_spec)[0]
    raw.sax_roi_mask[:] = 0
    with pytest.raises(EmptyRoi, match=raw.id):
        build_sample(raw, PreprocessConfig(target_spacing=5.6, sax_shape=(36, 36, 3), ch4_shape=(40, 40)), (18, 90))
