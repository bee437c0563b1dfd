import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smilegen import dataset as ds
from smilegen import landmarks as lm
from smilegen.errors import DegenerateGeometryError, ParseError, ValidationError


def rotate(points, degrees, center=(0.5, 0.5), scale=1.0):
    a = math.radians(degrees)
    m = scale * np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    c = np.asarray(center)
    return (points - c) @ m.T + c


def test_landmark_set_validation():
    tpl = lm.neutral_template()
    lms = lm.LandmarkSet(tpl)
    assert lms.points.shape == (68, 2)
    with pytest.raises(ValueError):
        lms.points[0, 0] = 0.1
    with pytest.raises(ValidationError):
        lm.LandmarkSet(tpl[:67])
    bad = tpl.copy()
    bad[3, 0] = 1.2
    with pytest.raises(ValidationError):
        lm.LandmarkSet(bad)
    bad[3, 0] = np.nan
    with pytest.raises(ValidationError):
        lm.LandmarkSet(bad)


def test_landmark_json_round_trip(tmp_path):
    lms = lm.LandmarkSet(lm.neutral_template())
    lm.save_landmark_file(lms, tmp_path / "a.json")
    assert lm.load_landmark_file(tmp_path / "a.json") == lms
    (tmp_path / "b.json").write_text("{not json")
    with pytest.raises(ParseError):
        lm.load_landmark_file(tmp_path / "b.json")


def test_landmark_image_validation():
    with pytest.raises(ValidationError):
        lm.LandmarkImage(np.zeros((2, 32, 32), np.float32))
    with pytest.raises(ValidationError):
        lm.LandmarkImage(np.full((1, 64, 64), 0.5, np.float32), binary=True)


def test_rasterize_empty_and_single_point():
    assert lm.rasterize_points(np.zeros((0, 2))).sum() == 0
    img = lm.rasterize_points(np.array([[0.5, 0.5]]), dilation=1)
    assert img.sum() == 1
    assert img[32, 32] == 1


def test_rasterize_footprint_union_count():
    pts = lm.neutral_template()
    img = lm.rasterize(lm.LandmarkSet(pts))
    # brute-force union of 3x3 footprints
    cells = set()
    for x, y in pts:
        c, r = int(math.floor(x * 63 + 0.5)), int(math.floor(y * 63 + 0.5))
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if 0 <= r + dr < 64 and 0 <= c + dc < 64:
                    cells.add((r + dr, c + dc))
    count = int(img.pixels.sum())
    assert count == len(cells)
    assert 68 <= count <= 68 * 9


def test_rasterize_argument_checks():
    with pytest.raises(ValidationError):
        lm.rasterize_points(np.zeros((1, 2)), dilation=2)
    with pytest.raises(ValidationError):
        lm.rasterize_points(np.zeros((1, 2)), side=8)


def test_binarize():
    zero = lm.LandmarkImage(np.zeros((1, 64, 64), np.float32))
    assert lm.binarize_decoded(zero).pixels.sum() == 0
    half = lm.LandmarkImage(np.full((1, 64, 64), 0.5, np.float32))
    assert lm.binarize_decoded(half).pixels.min() == 1
    vals = np.where(np.random.default_rng(0).random((1, 64, 64)) > 0.5, 0.7, 0.2).astype(np.float32)
    out = lm.binarize_decoded(lm.LandmarkImage(vals)).pixels
    assert np.array_equal(out == 1, vals == np.float32(0.7))


def test_align_fixed_point():
    aligned, t = lm.align(lm.LandmarkSet(lm.neutral_template()))
    assert t.scale == pytest.approx(1.0, abs=1e-9)
    assert t.rotation == pytest.approx(0.0, abs=1e-9)
    assert t.tx == pytest.approx(0.0, abs=1e-9) and t.ty == pytest.approx(0.0, abs=1e-9)


def test_align_recovers_rotation_and_scale():
    tpl = lm.neutral_template()
    aligned, t = lm.align(lm.LandmarkSet(rotate(tpl, 10.0)))
    assert np.allclose(aligned.points, tpl, atol=1e-6)
    assert math.degrees(t.rotation) == pytest.approx(-10.0, abs=1e-6)
    small = rotate(tpl, 0.0, scale=1.5)
    small = (small - small.mean(0)) * 0.6 + 0.5  # keep in range: net scale 0.9
    aligned, t = lm.align(lm.LandmarkSet(small))
    assert t.scale == pytest.approx(1 / 0.9, abs=1e-6)
    big = (tpl - 0.5) * 1.5 + 0.5
    t2 = lm.similarity_to_canonical(big)
    assert t2.scale == pytest.approx(1 / 1.5, abs=1e-6)


def test_align_degenerate():
    pts = lm.neutral_template()
    pts[42:48] = pts[36:42]
    with pytest.raises(DegenerateGeometryError):
        lm.align(lm.LandmarkSet(pts))


def test_transform_inverse():
    t = lm.AlignmentTransform(1.3, 0.4, 0.1, -0.2)
    p = np.random.default_rng(1).random((5, 2))
    assert np.allclose(t.inverse().apply(t.apply(p)), p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(-30, 30), st.floats(0.7, 1.2), st.floats(-0.05, 0.05), st.floats(-0.05, 0.05))
def test_align_and_intensity_invariant_under_similarity(deg, scale, dx, dy):
    tpl = lm.neutral_template()
    moved = rotate(tpl, deg, scale=scale) + np.array([dx, dy])
    if moved.min() < 0 or moved.max() > 1:
        return
    aligned, _ = lm.align(lm.LandmarkSet(moved))
    assert np.allclose(aligned.points, tpl, atol=1e-9)
    assert lm.smile_intensity_array(moved) == pytest.approx(lm.smile_intensity_array(tpl), abs=1e-9)


def test_smile_intensity_monotone_in_corners():
    tpl = lm.neutral_template()
    base = lm.smile_intensity(lm.LandmarkSet(tpl))
    wide = tpl.copy()
    wide[48, 0] -= 0.05
    wide[54, 0] += 0.05
    assert lm.smile_intensity(lm.LandmarkSet(wide)) > base
    assert base >= 0


def test_smile_intensity_apex_is_trajectory_max():
    cfg = ds.SynthConfig(num_identities=1)
    for s in ds.synthesize(cfg).all:
        curve = lm.smile_intensity_array(s.points)
        apex = cfg.dynamics[s.label].apex_frame(cfg.T)
        assert curve[apex] == pytest.approx(curve.max(), abs=1e-12)
        assert curve[0] <= curve[apex]


def test_tracking_recovers_synthetic_points():
    split = ds.synthesize(ds.SynthConfig(num_identities=3))
    model = lm.DisplacementModel.fit([s.points for s in split.train])
    for s in split.test[:4]:
        tracked = lm.track_landmarks(s.images, s.points[0], model)
        err = np.linalg.norm(tracked - s.points, axis=-1) * 63
        assert err.mean() < 0.5
        assert err.max() < 1.5


def test_displacement_model_projection_of_member_is_exact():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(136, 4)))[0].T
    model = lm.DisplacementModel(basis)
    d = (basis.T @ rng.normal(size=4)).reshape(68, 2)
    out = model.project(d, np.ones(68), ridge=0.0)
    assert np.allclose(out, d, atol=1e-10)
