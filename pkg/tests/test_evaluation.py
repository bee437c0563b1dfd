import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from smilegen import dataset as ds
from smilegen import evaluation as ev
from smilegen.errors import ValidationError


def ssim_brute_force(a, b, w=8):
    """Loop over every window position; population statistics; values already in [0, 1]."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    H, W = a.shape
    for r in range(H - w + 1):
        for c in range(W - w + 1):
            x = a[r:r + w, c:c + w].ravel()
            y = b[r:r + w, c:c + w].ravel()
            mx, my = x.sum() / x.size, y.sum() / y.size
            vx = ((x - mx) ** 2).sum() / x.size
            vy = ((y - my) ** 2).sum() / y.size
            cov = ((x - mx) * (y - my)).sum() / x.size
            vals.append(((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def test_ssim_identity_and_brute_force():
    rng = np.random.default_rng(0)
    a = rng.random((16, 16))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ev.ssim(a, a, value_range=(0, 1)) == pytest.approx(1.0, abs=1e-12)
    assert ev.ssim(a, b, value_range=(0, 1)) == pytest.approx(ssim_brute_force(a, b), abs=1e-12)


def test_ssim_maps_value_range():
    rng = np.random.default_rng(1)
    a = rng.random((3, 12, 12)) * 2 - 1
    b = rng.random((3, 12, 12)) * 2 - 1
    expected = np.mean([ssim_brute_force((x + 1) / 2, (y + 1) / 2) for x, y in zip(a, b)])
    assert ev.ssim(a, b) == pytest.approx(expected, abs=1e-12)


def test_ssim_of_inverted_binary_image_is_negative():
    a = (np.random.default_rng(2).random((16, 16)) > 0.5).astype(float)
    assert ev.ssim(a, 1 - a, value_range=(0, 1)) < 0


def test_ssim_errors():
    with pytest.raises(ValidationError):
        ev.ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ValidationError):
        ev.ssim(np.zeros((4, 4)), np.zeros((4, 4)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)), arrays(np.float64, (10, 10), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s1 = ev.ssim(a, b, value_range=(0, 1))
    assert s1 == pytest.approx(ev.ssim(b, a, value_range=(0, 1)), abs=1e-9)
    assert -1 - 1e-9 <= s1 <= 1 + 1e-9


def test_inception_score_examples():
    same = lambda f: np.tile([0.2, 0.3, 0.5], (len(f), 1))  # noqa: E731
    assert ev.inception_score(np.zeros((5, 3, 8, 8)), same) == pytest.approx(1.0, abs=1e-12)
    assert ev.inception_score_from_probs([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(2.0, abs=1e-12)
    with pytest.raises(ValidationError):
        ev.inception_score(np.zeros((0, 3, 8, 8)), same)


def test_inception_score_direct_kl():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.3, 0.4, 0.3]])
    m = p.mean(0)
    kl = [sum(pi * math.log(pi / mi) for pi, mi in zip(row, m)) for row in p]
    assert ev.inception_score_from_probs(p) == pytest.approx(math.exp(sum(kl) / 3), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(0.01, 1.0)), st.randoms())
def test_inception_score_properties(raw, rnd):
    p = raw / raw.sum(1, keepdims=True)
    score = ev.inception_score_from_probs(p)
    assert score >= 1.0
    perm = list(range(len(p)))
    rnd.shuffle(perm)
    assert ev.inception_score_from_probs(p[perm]) == pytest.approx(score, rel=1e-12)


def test_delta_is():
    frames = np.zeros((4, 3, 8, 8))
    clf = lambda f: np.tile([0.5, 0.5], (len(f), 1))  # noqa: E731
    assert ev.delta_is(frames, frames, clf) == 0.0
    assert abs(1.354 - 1.419) == pytest.approx(0.065, abs=1e-12)


def test_moving_average_examples():
    assert ev.moving_average([0, 0, 5, 0, 0])[2] == pytest.approx(1.0)
    assert np.allclose(ev.moving_average(np.full(7, 3.0)), 3.0)
    assert len(ev.moving_average(np.arange(9.0))) == 9


def test_au_curve_constant_and_apex():
    cfg = ds.SynthConfig(num_identities=1)
    split = ds.synthesize(cfg)
    s = split.all[0]
    const = ev.au_curve(np.repeat(s.points[:1], 10, axis=0))
    assert np.allclose(const.smoothed, const.smoothed[0])
    for s in split.all:
        c = ev.au_curve(s.points)
        assert len(c.smoothed) == cfg.T
        apex = cfg.dynamics[s.label].apex_frame(cfg.T)
        assert int(np.argmax(c.raw)) == apex


def test_au_curve_distance_examples():
    a = np.zeros(32)
    assert ev.au_curve_distance(a, a) == 0.0
    assert ev.au_curve_distance(a + 0.1, a) == pytest.approx(3.2, abs=1e-9)
    with pytest.raises(ValidationError):
        ev.au_curve_distance(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(*[arrays(np.float64, 12, elements=st.floats(-5, 5)) for _ in range(3)])
def test_au_curve_distance_is_a_metric(a, b, c):
    d = ev.au_curve_distance
    assert d(a, b) >= 0
    assert d(a, b) == pytest.approx(d(b, a))
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9


def test_rises_to_apex():
    assert ev.rises_to_apex(np.array([0, 1, 2, 3, 3, 2.0]))
    assert not ev.rises_to_apex(np.array([0, 2, 1, 3, 2.0]))


def test_mode_diversity_examples():
    rng = np.random.default_rng(0)
    p = rng.random((1, 5, 68, 2))
    assert ev.mode_diversity(np.concatenate([p, p, p])) == 0.0
    assert ev.mode_diversity(np.concatenate([p, p + 0.01])) == pytest.approx(0.01 * math.sqrt(2), abs=1e-12)
    with pytest.raises(ValidationError):
        ev.mode_diversity(p)


def test_identity_descriptor_matches_on_real_frames():
    split = ds.synthesize(ds.SynthConfig(num_identities=4, T=8))
    gallery = {}
    for s in split.all:
        gallery.setdefault(s.identity, ev.identity_descriptor(s.neutral_face, s.points[0]))
    for s in split.all:
        for face, pts in zip(s.faces, s.points):
            assert ev.match_identity(ev.identity_descriptor(face, pts), gallery) == s.identity


def test_evaluate_corpus_against_itself():
    split = ds.synthesize(ds.SynthConfig(num_identities=2, T=8))
    samples = list(split.all)
    clf = lambda f: np.tile([0.6, 0.4], (len(f), 1))  # noqa: E731
    report = ev.evaluate_corpus([(s, {}) for s in samples], samples, clf, {"dataset": "synthetic"})
    agg = report.aggregate
    assert agg["ssim"] == pytest.approx(1.0, abs=1e-12)
    assert agg["deltaIs"] == 0.0
    assert agg["auCurveDistance"] == 0.0
    assert agg["modeDiversity"] > 0
    vals = [r["ssim"] for r in report.per_sequence]
    assert agg["ssim"] == pytest.approx(np.mean(vals))
    again = ev.evaluate_corpus([(s, {}) for s in samples], samples, clf, {"dataset": "synthetic"})
    assert again.to_json() == report.to_json()


def test_evaluate_corpus_length_mismatch():
    a = ds.synthesize(ds.SynthConfig(num_identities=2, T=8)).all
    b = ds.synthesize(ds.SynthConfig(num_identities=2, T=6)).all
    with pytest.raises(ValidationError):
        ev.evaluate_corpus([(s, {}) for s in a], list(b))


def test_frame_classifier_probabilities():
    split = ds.synthesize(ds.SynthConfig(num_identities=2, T=4))
    frames = np.concatenate([s.faces for s in split.all])
    labels = np.concatenate([[s.label_index] * s.T for s in split.all])
    clf = ev.train_frame_classifier(frames, labels, 2, epochs=1)
    p = clf.predict_proba(frames)
    assert p.shape == (len(frames), 2)
    assert np.allclose(p.sum(1), 1, atol=1e-6)
    assert np.array_equal(p, clf.predict_proba(frames))


def test_write_report(tmp_path):
    split = ds.synthesize(ds.SynthConfig(num_identities=2, T=8))
    samples = list(split.all)
    report = ev.evaluate_corpus([(s, {}) for s in samples], samples)
    ev.write_report(report, tmp_path)
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "curves.png").stat().st_size > 0
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert len(lines) == 1 + len(samples) * 8
