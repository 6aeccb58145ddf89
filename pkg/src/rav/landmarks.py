"""Landmark provisioning and crop compositing.

Pastes frontalized grayscale eye / lower-face crops back onto the color
reference (DP) image to form the restoration input. Window geometry mirrors
the dataset simulator's crop geometry so paste inverts crop at zero
degradation: eye windows are squares of 25% of image width centered on the
eye-corner midpoints; the lower-face window is 50% wide and spans nose tip
to chin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .imageops import gray_to_rgb, resize, to_grayscale

LANDMARK_NAMES = (
    "left_eye_outer", "left_eye_inner", "right_eye_inner", "right_eye_outer",
    "left_iris", "right_iris", "nose_tip", "mouth_left", "mouth_right", "chin",
)

EYE_WINDOW_FRACTION = 0.25
LOWER_WINDOW_FRACTION = 0.5


class DetectorNotRegistered(RuntimeError):
    """get_landmarks was called with no oracle metadata and no detector."""


@dataclass(frozen=True)
class LandmarkSet:
    points: dict
    source: str = "oracle"  # oracle | detector

    def __post_init__(self):
        missing = set(LANDMARK_NAMES) - set(self.points)
        if missing:
            raise ContractViolation(f"missing landmarks: {sorted(missing)}")
        for name, (x, y) in self.points.items():
            if not (np.isfinite(x) and np.isfinite(y)):
                raise ContractViolation(f"non-finite landmark {name}")

    def validate_eye_order(self) -> None:
        """Frontal-view invariant; perspective at extreme camera yaw can
        legitimately invert the image-coordinate order, so this is not
        enforced at construction time."""
        if not self.points["left_eye_outer"][0] < self.points["right_eye_outer"][0]:
            raise ContractViolation("left eye must lie left of right eye in image coords")

    def validate_bounds(self, height: int, width: int) -> None:
        for name, (x, y) in self.points.items():
            if not (0 <= x < width and 0 <= y < height):
                raise ContractViolation(f"landmark {name} outside image bounds")

    def eye_center(self, side: str):
        a = self.points[f"{side}_eye_outer"]
        b = self.points[f"{side}_eye_inner"]
        return ((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0)


_default_detector = None


def register_detector(fn) -> None:
    """Install a callable(img) -> LandmarkSet as the fallback detector."""
    global _default_detector
    _default_detector = fn


def clear_detector() -> None:
    global _default_detector
    _default_detector = None


def get_landmarks(img: np.ndarray, sample_meta=None) -> LandmarkSet:
    """Oracle metadata wins; otherwise dispatch to the registered detector."""
    if sample_meta is not None:
        lm = sample_meta.landmarks if hasattr(sample_meta, "landmarks") else LandmarkSet(dict(sample_meta))
        lm.validate_bounds(img.shape[0], img.shape[1])
        return lm
    if _default_detector is None:
        raise DetectorNotRegistered("no oracle landmarks and no detector registered")
    lm = _default_detector(img)
    if not isinstance(lm, LandmarkSet):
        lm = LandmarkSet(dict(lm), source="detector")
    lm.validate_eye_order()
    lm.validate_bounds(img.shape[0], img.shape[1])
    return lm


@dataclass(frozen=True)
class Window:
    x0: int
    y0: int
    w: int
    h: int

    @property
    def slices(self):
        return slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w)

    def check_inside(self, height, width):
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > width or self.y0 + self.h > height:
            raise ContractViolation(f"window {self} outside image bounds")


def _clamp_window(cx, cy, size, height, width) -> Window:
    x0 = int(round(cx - size / 2.0))
    y0 = int(round(cy - size / 2.0))
    x0 = min(max(x0, 0), width - size)
    y0 = min(max(y0, 0), height - size)
    return Window(x0, y0, size, size)


def eye_window(lm: LandmarkSet, side: str, height: int, width: int) -> Window:
    size = max(int(round(EYE_WINDOW_FRACTION * width)), 2)
    cx, cy = lm.eye_center(side)
    return _clamp_window(cx, cy, size, height, width)


def lower_face_window(lm: LandmarkSet, height: int, width: int) -> Window:
    w = max(int(round(LOWER_WINDOW_FRACTION * width)), 2)
    nose = lm.points["nose_tip"]
    chin = lm.points["chin"]
    y0 = int(round(nose[1]))
    h = max(int(round(chin[1])) - y0, 2)
    x0 = int(round(nose[0] - w / 2.0))
    x0 = min(max(x0, 0), width - w)
    y0 = min(max(y0, 0), height - h)
    return Window(x0, y0, w, h)


def feather_weights(h: int, w: int, feather_px: int) -> np.ndarray:
    """Blend weights: 0 on the window edge, linear ramp to 1 over feather_px.

    feather_px = 0 means a hard paste (weight 1 everywhere inside).
    """
    if feather_px <= 0:
        return np.ones((h, w))
    iy = np.arange(h)
    ix = np.arange(w)
    dy = np.minimum(iy, h - 1 - iy)
    dx = np.minimum(ix, w - 1 - ix)
    d = np.minimum(dy[:, None], dx[None, :])
    return np.clip(d / float(feather_px), 0.0, 1.0)


def paste_crops(dp: np.ndarray, eye_left: np.ndarray, eye_right: np.ndarray,
                lower: np.ndarray, lm: LandmarkSet, feather_px: int = 4) -> np.ndarray:
    """Composite frontalized grayscale crops onto the color DP image.

    Crops are rescaled to their landmark windows, replicated to 3 channels,
    and alpha-blended with a feathered border; pixels outside all windows
    equal dp exactly.
    """
    H, W = dp.shape[:2]
    lm.validate_eye_order()
    lm.validate_bounds(H, W)
    out = dp.copy()
    placements = [
        (eye_window(lm, "left", H, W), eye_left),
        (eye_window(lm, "right", H, W), eye_right),
        (lower_face_window(lm, H, W), lower),
    ]
    for win, crop in placements:
        win.check_inside(H, W)
        patch = gray_to_rgb(resize(np.asarray(crop, dtype=np.float64), win.h, win.w))
        w = feather_weights(win.h, win.w, feather_px)[:, :, None]
        sy, sx = win.slices
        out[sy, sx] = w * patch + (1.0 - w) * out[sy, sx]
    return out


def crop_window(img: np.ndarray, win: Window) -> np.ndarray:
    sy, sx = win.slices
    return img[sy, sx].copy()


def eye_band_window(lm: LandmarkSet, height: int, width: int, margin_frac: float = 0.06) -> Window:
    """Single band covering both eyes plus a margin; the eye region-of-interest."""
    lw = eye_window(lm, "left", height, width)
    rw = eye_window(lm, "right", height, width)
    m = int(round(margin_frac * width))
    x0 = max(min(lw.x0, rw.x0) - m, 0)
    x1 = min(max(lw.x0 + lw.w, rw.x0 + rw.w) + m, width)
    y0 = max(min(lw.y0, rw.y0) - m, 0)
    y1 = min(max(lw.y0 + lw.h, rw.y0 + rw.h) + m, height)
    return Window(x0, y0, x1 - x0, y1 - y0)
