import numpy as np
import pytest

from rav import datasim as D
from rav import landmarks as L
from rav import morphable as M
from rav.errors import ContractViolation
from rav.imageops import to_grayscale


@pytest.fixture(scope="module")
def sample():
    model = M.make_synthetic_model(seed=0)
    return D.generate_sample(model, 5, "happy", D.DegradationConfig())


@pytest.fixture(autouse=True)
def no_detector():
    L.clear_detector()
    yield
    L.clear_detector()


def grid_landmarks(res):
    # plausible fixed layout, in-bounds for a res x res image
    f = res / 128.0
    return {
        "left_eye_outer": (40 * f, 44 * f), "left_eye_inner": (52 * f, 44 * f),
        "right_eye_inner": (76 * f, 44 * f), "right_eye_outer": (88 * f, 44 * f),
        "left_iris": (46 * f, 46 * f), "right_iris": (82 * f, 46 * f),
        "nose_tip": (64 * f, 64 * f), "mouth_left": (52 * f, 88 * f),
        "mouth_right": (76 * f, 88 * f), "chin": (64 * f, 112 * f),
    }


def test_oracle_passthrough(sample):
    lm = L.get_landmarks(sample.full_face, sample_meta=sample)
    assert lm.points == sample.landmarks.points


def test_missing_detector_raises(sample):
    with pytest.raises(L.DetectorNotRegistered):
        L.get_landmarks(sample.full_face)


def test_detector_stub_accepted_iff_in_bounds(sample):
    L.register_detector(lambda img: L.LandmarkSet(grid_landmarks(img.shape[0]),
                                                  source="detector"))
    lm = L.get_landmarks(sample.full_face)
    assert lm.source == "detector"
    L.register_detector(lambda img: L.LandmarkSet(grid_landmarks(10 * img.shape[0]),
                                                  source="detector"))
    with pytest.raises(ContractViolation):
        L.get_landmarks(sample.full_face)


def test_landmark_ordering_invariant():
    pts = grid_landmarks(128)
    pts["left_eye_outer"], pts["right_eye_outer"] = pts["right_eye_outer"], pts["left_eye_outer"]
    # construction allows it (tilted views can invert the order), but the
    # frontal-view check rejects it
    lm = L.LandmarkSet(pts)
    with pytest.raises(ContractViolation):
        lm.validate_eye_order()


def test_paste_idempotent_at_zero_feather(sample):
    dp = sample.dp_image
    lm = sample.landmarks
    H, W = dp.shape[:2]
    lw = L.eye_window(lm, "left", H, W)
    rw = L.eye_window(lm, "right", H, W)
    fw = L.lower_face_window(lm, H, W)
    eyeL = to_grayscale(L.crop_window(dp, lw))
    eyeR = to_grayscale(L.crop_window(dp, rw))
    lower = to_grayscale(L.crop_window(dp, fw))
    out = L.paste_crops(dp, eyeL, eyeR, lower, lm, feather_px=0)
    inside = np.zeros((H, W), dtype=bool)
    for win in (lw, rw, fw):
        sy, sx = win.slices
        inside[sy, sx] = True
    # outside all windows: bit-equal dp
    assert np.array_equal(out[~inside], dp[~inside])
    # inside: grayscale conversion of dp only
    gray3 = np.repeat(to_grayscale(dp)[:, :, None], 3, axis=2)
    assert np.max(np.abs(out[inside] - gray3[inside])) <= 1e-9


def test_paste_locality(sample):
    dp = sample.dp_image
    lm = sample.landmarks
    H, W = dp.shape[:2]
    out = L.paste_crops(dp, sample.eye_left[0][1], sample.eye_right[0][1],
                        sample.lower_face[1], lm, feather_px=4)
    inside = np.zeros((H, W), dtype=bool)
    for win in (L.eye_window(lm, "left", H, W), L.eye_window(lm, "right", H, W),
                L.lower_face_window(lm, H, W)):
        sy, sx = win.slices
        inside[sy, sx] = True
    assert np.array_equal(out[~inside], dp[~inside])


def test_feather_weights_match_closed_form_oracle():
    h, w, f = 17, 23, 4
    weights = L.feather_weights(h, w, f)
    for iy in range(h):
        for ix in range(w):
            d = min(iy, h - 1 - iy, ix, w - 1 - ix)
            assert weights[iy, ix] == pytest.approx(min(1.0, d / f), abs=1e-12)
    # center 1, edge 0, symmetric
    assert weights[h // 2, w // 2] == 1.0
    assert weights[0].max() == 0.0
    assert np.allclose(weights, weights[::-1])
    assert np.allclose(weights, weights[:, ::-1])


def test_feather_weights_range():
    w = L.feather_weights(9, 9, 3)
    assert w.min() >= 0.0 and w.max() <= 1.0


def test_window_outside_image_raises():
    win = L.Window(-1, 0, 8, 8)
    with pytest.raises(ContractViolation):
        win.check_inside(16, 16)
