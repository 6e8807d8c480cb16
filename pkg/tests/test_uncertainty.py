import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from radepth.structures import DepthMap, InputError
from radepth.uncertainty import (
    ModelEvaluationError,
    NoiseConfig,
    SegmentMap,
    UncertaintyMap,
    keep_segments,
    mask_image,
    perturb,
    segment_desk,
    uncertain_pixel_counts,
    uncertainty_map,
)


def _const(value=2.0):
    return lambda img: DepthMap.from_array(np.full(img.shape[:2], value))


class Sequence:
    """Returns the listed constant depths in turn."""

    def __init__(self, values):
        self.values = list(values)
        self.i = 0

    def __call__(self, img):
        v = self.values[self.i]
        self.i += 1
        return DepthMap.from_array(np.full(img.shape[:2], v))


def test_constant_model_gives_zero(rng):
    U = uncertainty_map(_const(), rng.random((8, 8, 3)), NoiseConfig(0.1, 5), rng)
    assert np.all(U.values == 0) and U.valid.all()


def test_zero_sigma_gives_zero(rng):
    brightness = lambda img: DepthMap.from_array(1 + img.mean(axis=2))  # noqa: E731
    U = uncertainty_map(brightness, rng.random((8, 8, 3)), NoiseConfig(0.0, 3), rng)
    assert np.all(U.values == 0)


def test_hand_case_one_and_three():
    U = uncertainty_map(Sequence([1.0, 3.0]), np.zeros((2, 2, 3)), NoiseConfig(0.1, 2), np.random.default_rng(0))
    assert np.allclose(U.values, 0.5, atol=1e-15)


def test_zero_mean_is_guarded():
    U = uncertainty_map(Sequence([0.0, 0.0]), np.zeros((2, 2, 3)), NoiseConfig(0.1, 2), np.random.default_rng(0))
    assert not np.isnan(U.values).any()


def test_noise_config_validation():
    with pytest.raises(InputError):
        NoiseConfig(-0.1, 3)
    with pytest.raises(InputError):
        NoiseConfig(0.1, 1)


def test_perturb_is_seeded_and_clipped():
    img = np.full((6, 6, 3), 0.99)
    a = perturb(img, NoiseConfig(0.5, 2), np.random.default_rng(3))
    b = perturb(img, NoiseConfig(0.5, 2), np.random.default_rng(3))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_model_failure_names_variant():
    def broken(img):
        raise RuntimeError("boom")

    with pytest.raises(ModelEvaluationError, match="variant 0"):
        uncertainty_map(broken, np.zeros((2, 2, 3)), NoiseConfig(0.1, 2), np.random.default_rng(0))


def test_q_100_keeps_nothing():
    U = UncertaintyMap(np.ones((4, 4)), np.ones((4, 4), bool))
    S = SegmentMap(np.repeat([0, 1], 8).reshape(4, 4), 2)
    assert keep_segments(U, S, 0.5, 100.0) == set()


def test_threshold_is_strict():
    # exactly 25 % of segment 0 is above h
    vals = np.zeros((4, 4))
    vals[0, :2] = 1.0
    U = UncertaintyMap(vals, np.ones((4, 4), bool))
    S = SegmentMap(np.repeat([0, 1], 8).reshape(4, 4), 2)
    assert keep_segments(U, S, 0.5, 25.0) == set()
    assert keep_segments(U, S, 0.5, 24.9) == {0}


@given(
    labels=arrays(np.int64, (6, 7), elements=st.integers(0, 4)),
    values=arrays(np.float64, (6, 7), elements=st.floats(0, 1)),
    h=st.floats(0, 1),
    q=st.floats(0, 100),
)
def test_keep_segments_matches_loop_oracle(labels, values, h, q):
    S = SegmentMap.from_labels(labels)
    U = UncertaintyMap(values, np.ones(values.shape, bool))
    expected = set()
    for s in range(S.num_segments):
        pix = values[S.labels == s]
        p = sum(1 for x in pix if x > h)
        if p * 100 > len(pix) * q:
            expected.add(s)
    assert keep_segments(U, S, h, q) == expected
    assert uncertain_pixel_counts(U, S, h).sum() == np.count_nonzero(values > h)


def test_mask_image_keeps_only_kept_segments(rng):
    img = rng.random((4, 4, 3)) + 0.01
    S = SegmentMap(np.arange(16).reshape(4, 4) % 3, 3)
    out = mask_image(np.clip(img, 0, 1), S, {1})
    keep = S.labels == 1
    assert np.array_equal(out[keep], np.clip(img, 0, 1)[keep])
    assert not out[~keep].any()


def test_segment_map_validation():
    with pytest.raises(InputError):
        SegmentMap(np.array([[0, 2]]), 3)  # segment 1 empty
    with pytest.raises(InputError):
        SegmentMap(np.array([[0, 3]]), 3)
    S = SegmentMap.from_labels(np.array([[7, 3], [3, 9]]))
    assert S.labels.tolist() == [[1, 0], [0, 2]]


def test_segment_desk_covers_image(rng):
    S = segment_desk(rng.random((32, 40, 3)))
    assert S.shape == (32, 40)
    assert np.bincount(S.labels.ravel()).min() > 0


def test_keep_segments_shape_mismatch():
    with pytest.raises(InputError):
        keep_segments(UncertaintyMap(np.zeros((2, 2)), np.ones((2, 2), bool)),
                      SegmentMap(np.zeros((3, 3), int), 1), 0.1, 10)
