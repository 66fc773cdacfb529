import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from talkinghead.data import generate_synthetic_dataset
from talkinghead.idlepose import build_idle_pose_tensor, generate_segments
from talkinghead.data import PoseTensor
from talkinghead.metrics import (
    EmotionClassifier,
    MetricReport,
    MotionStats,
    UntrainedClassifierError,
    emotion_score,
    format_metric,
    lmd,
    motion_stats,
    psnr,
    softmax,
    ssim,
    train_emotion_classifier,
)
from talkinghead.numerics import ShapeError

from oracles import ssim_bruteforce

C1, C2 = 1e-4, 9e-4
images = arrays(np.float64, (9, 10), elements=st.floats(0, 1))


# --- psnr ------------------------------------------------------------------


def test_psnr_anchors():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(np.zeros((3, 3)), np.ones((3, 3))) == 0.0


def test_psnr_errors():
    with pytest.raises(ShapeError):
        psnr(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.ones(3), peak=0)


@given(images, st.floats(1e-4, 0.2), st.floats(1.05, 3.0))
def test_psnr_strictly_decreasing_in_error(a, scale, factor):
    noise = np.sin(np.arange(a.size)).reshape(a.shape) + 1.5
    assert psnr(a, a + scale * noise) > psnr(a, a + factor * scale * noise)


@given(images)
def test_psnr_infinite_only_for_identical(a):
    b = a.copy()
    b[0, 0] = np.nextafter(b[0, 0], 2.0)
    assert psnr(a, a) == math.inf and psnr(a, b) < math.inf


# --- ssim ------------------------------------------------------------------


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 1, (16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


@given(images, images)
def test_ssim_symmetric_and_bounded(a, b):
    v = ssim(a, b)
    assert v == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1 - 1e-9 <= v <= 1 + 1e-9


@given(st.floats(0, 1), st.floats(0, 1))
def test_ssim_constant_images_closed_form(p, q):
    want = (2 * p * q + C1) * C2 / ((p * p + q * q + C1) * C2)
    assert ssim(np.full((8, 8), p), np.full((8, 8), q)) == pytest.approx(want, abs=1e-9)


def test_ssim_matches_bruteforce_oracle():
    rng = np.random.default_rng(7)
    for k in range(50):
        shape = (16, 16) if k % 2 else (16, 16, 3)
        a = rng.uniform(0, 1, shape)
        b = np.clip(a + rng.normal(0, 0.2, shape), 0, 1) if k % 3 else rng.uniform(0, 1, shape)
        assert abs(ssim(a, b) - ssim_bruteforce(a, b)) < 1e-10


def test_ssim_rejects_small_images_and_bad_layouts():
    with pytest.raises(ValueError):
        ssim(np.zeros((6, 10)), np.zeros((6, 10)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8, 2)), np.zeros((8, 8, 2)))
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))


# --- lmd -------------------------------------------------------------------


def test_lmd_anchors(rng):
    a = rng.standard_normal((5, 68, 3))
    assert lmd(a, a) == (0.0, 0.0)
    m, f = lmd(a, a + np.array([0.0, 1.0, 0.0]))
    assert m == pytest.approx(1.0) and f == pytest.approx(1.0)
    b = a.copy()
    b[:, 48:68, 0] += 0.3
    m, f = lmd(a, b)
    assert m == pytest.approx(0.3) and f == pytest.approx(20 / 68 * 0.3)
    with pytest.raises(ShapeError):
        lmd(a, a[:4])


@given(arrays(np.float64, (2, 68, 3), elements=st.floats(-5, 5)),
       arrays(np.float64, (2, 68, 3), elements=st.floats(-5, 5)))
def test_lmd_pseudometric(a, b):
    ab, ba = lmd(a, b), lmd(b, a)
    assert ab == pytest.approx(ba) and min(ab) >= 0
    if not np.array_equal(a, b):
        assert ab[1] > 0


# --- motion ----------------------------------------------------------------


def test_motion_anchors():
    assert motion_stats(np.ones((6, 12))) == MotionStats(0.0, 0.0, 0.0, 0.0)
    u = np.array([3.0, 4.0])
    ramp = motion_stats(np.arange(7)[:, None] * u)
    assert ramp.vel_avg == pytest.approx(5.0) and ramp.vel_std == pytest.approx(0.0, abs=1e-12)
    assert ramp.acc_avg == pytest.approx(0.0, abs=1e-12)
    hand = motion_stats(np.array([[0.0], [1.0], [3.0]]))
    assert (hand.vel_avg, hand.vel_std, hand.acc_avg, hand.acc_std) == (1.5, 0.5, 1.0, 0.0)
    with pytest.raises(ValueError):
        motion_stats(np.zeros((2, 12)))


def test_acceleration_is_norm_of_vector_difference():
    # v = (1,0) then (0,1): same speed, so a difference of norms would give 0
    st_ = motion_stats(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]))
    assert st_.acc_avg == pytest.approx(math.sqrt(2))


@given(arrays(np.float64, (8, 3), elements=st.floats(-10, 10)))
def test_motion_stats_nonnegative(x):
    assert min(vars(motion_stats(x)).values()) >= 0


def test_idle_spans_have_zero_velocity(rng):
    src = PoseTensor(rng.standard_normal((40, 12)))
    segs = generate_segments(40, 3, 5, 2, seed=1)
    out = build_idle_pose_tensor(src, segs, 40).values
    for s in segs:
        span = out[s.start:s.end + 1]
        if span.shape[0] >= 3:
            assert motion_stats(span).vel_avg == 0.0


# --- emotion proxy ---------------------------------------------------------


def test_untrained_classifier_refuses(rng):
    with pytest.raises(UntrainedClassifierError):
        emotion_score(EmotionClassifier.init(rng), np.zeros((2, 68, 3)), "happy")


@pytest.fixture(scope="module")
def classifier():
    clf, curve = train_emotion_classifier(generate_synthetic_dataset(30, 16, 30), seed=1, steps=300)
    return clf, curve


def test_probabilities_normalised(classifier, rng):
    clf, _ = classifier
    p = clf.probabilities(rng.standard_normal((6, 68, 3)) * 0.1)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-5)
    one = rng.standard_normal((1, 68, 3)) * 0.1
    assert emotion_score(clf, one, "sad") == pytest.approx(float(clf.probabilities(one)[0, 1]))


def test_held_out_happy_beats_chance(classifier):
    clf, curve = classifier
    assert curve[-1] < curve[0]
    held = [c for c in generate_synthetic_dataset(31, 16, 30) if c.emotion == "happy"]
    scores = [emotion_score(clf, c.landmarks, "happy") for c in held]
    assert all(0 <= s <= 1 for s in scores)
    assert np.mean(scores) > 1 / 8


def test_softmax_is_stable():
    p = softmax(np.array([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(p)) and p[0, 0] == pytest.approx(1.0)


# --- report ----------------------------------------------------------------


def test_report_formatting():
    rep = MetricReport(1.0, math.inf, 0.5, 0.0, 0.0, MotionStats(0.1, 0.0, 0.2, 0.0))
    text = rep.to_keyvalue()
    assert "psnr=inf" in text and "ssim=1.000000" in text and text.endswith("\n")
    assert format_metric(float("nan")) == "nan"
    assert len(MetricReport.HEADER) == len(rep.values())
