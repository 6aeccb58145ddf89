"""Synthetic desk-scale analog of a VR face-tracking dataset.

Renders full-face / reference images from the morphable model and produces
degraded multi-angle grayscale eye and lower-face crops with complete ground
truth (coefficients, pose, landmarks, gaze). Degradation stages run in a
fixed order so outputs are bit-reproducible for a given (seed, config).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import morphable as mm
from .errors import ContractViolation
from .imageops import clip01, bilinear_sample, save_png, to_grayscale
from .landmarks import (LandmarkSet, LANDMARK_NAMES, Window, crop_window,
                        eye_window, lower_face_window)

ANGLE_TAGS = ("front", "left-60", "right-60", "top-30")
ANGLE_POSES = {  # (yaw, pitch) degrees of the capture camera
    "front": (0.0, 0.0),
    "left-60": (-60.0, 0.0),
    "right-60": (60.0, 0.0),
    "top-30": (0.0, 30.0),
}
EXPRESSION_TAGS = ("anger", "contempt", "disgust", "fear",
                   "happy", "neutral", "sad", "surprise")

# Expression templates over the structured expression components
# (0: eye shift x / gaze yaw, 1: eye shift y / gaze pitch, 2: jaw open, 3+: free).
_EXPRESSION_TEMPLATES = {
    "anger":    (0.0, -0.6, 0.3, -0.8, 0.0, 0.0),
    "contempt": (0.5, 0.0, 0.1, 0.4, -0.5, 0.0),
    "disgust":  (0.0, -0.4, 0.5, 0.0, 0.8, -0.4),
    "fear":     (0.0, 0.7, 0.9, 0.5, 0.0, 0.6),
    "happy":    (0.0, 0.2, 0.7, 0.9, 0.3, 0.0),
    "neutral":  (0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    "sad":      (0.0, -0.7, 0.2, -0.5, -0.6, 0.2),
    "surprise": (0.0, 0.5, 1.2, 0.0, 0.4, 0.8),
}

GAZE_DEGREES_PER_UNIT = 10.0  # maps structured eye-shift coefficients to gaze angles


@dataclass(frozen=True)
class DegradationConfig:
    radial_k1: float = 0.15
    radial_k2: float = 0.05
    vignette_strength: float = 0.5
    blur_sigma: float = 0.8
    grayscale: bool = True
    noise_sigma: float = 0.02
    eyebrow_occlusion_fraction: float = 0.3
    mask_margin: int = 2
    lighting_gain_range: tuple = (0.7, 1.3)
    lighting_offset_range: tuple = (-0.1, 0.1)
    resolution: int = 128
    alpha_scale: float = 1.5
    expression_jitter: float = 0.1
    camera_distance: float = 2.5

    def __post_init__(self):
        vals = [self.radial_k1, self.radial_k2, self.vignette_strength,
                self.blur_sigma, self.noise_sigma]
        if not all(np.isfinite(v) for v in vals):
            raise ContractViolation("degradation parameters must be finite")
        if self.blur_sigma < 0 or self.vignette_strength < 0:
            raise ContractViolation("blur_sigma and vignette_strength must be >= 0")
        if not 0.0 <= self.eyebrow_occlusion_fraction <= 1.0:
            raise ContractViolation("eyebrow_occlusion_fraction must be in [0, 1]")

    @staticmethod
    def neutral() -> "DegradationConfig":
        """Identity degradation: every stage disabled."""
        return DegradationConfig(radial_k1=0.0, radial_k2=0.0, vignette_strength=0.0,
                                 blur_sigma=0.0, grayscale=False, noise_sigma=0.0,
                                 eyebrow_occlusion_fraction=0.0, mask_margin=0,
                                 lighting_gain_range=(1.0, 1.0),
                                 lighting_offset_range=(0.0, 0.0))


@dataclass
class VRSample:
    full_face: np.ndarray
    dp_image: np.ndarray
    eye_left: list          # [(angle_tag, grayscale image)]
    eye_right: list
    lower_face: tuple       # (angle_tag, grayscale image)
    coeffs: mm.CoefficientPair
    pose: mm.CameraPose
    expression_tag: str
    landmarks: LandmarkSet
    gaze: dict              # {"left": (yaw, pitch), "right": (yaw, pitch)} degrees
    seed: int

    def validate(self) -> None:
        if self.expression_tag not in EXPRESSION_TAGS:
            raise ContractViolation(f"unknown expression {self.expression_tag!r}")
        for tag, _ in list(self.eye_left) + list(self.eye_right) + [self.lower_face]:
            if tag not in ANGLE_TAGS:
                raise ContractViolation(f"unknown angle tag {tag!r}")
        H, W = self.full_face.shape[:2]
        self.landmarks.validate_bounds(H, W)
        for img in [self.full_face, self.dp_image]:
            if img.min() < 0 or img.max() > 1:
                raise ContractViolation("image outside [0, 1]")


# ---------------------------------------------------------------------------
# degradation stages

def _radius_sq(h, w):
    """Squared radius normalized to 1 at the half-diagonal, about image center."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    half_diag = np.hypot(cy + 0.5, cx + 0.5)
    ys, xs = np.mgrid[0:h, 0:w]
    return ((ys - cy) ** 2 + (xs - cx) ** 2) / half_diag ** 2, (cy, cx)


def apply_radial_distortion(img: np.ndarray, k1: float, k2: float) -> np.ndarray:
    """Inverse-warp x' = x (1 + k1 r^2 + k2 r^4), bilinear, edge-clamped."""
    h, w = img.shape[:2]
    r2, (cy, cx) = _radius_sq(h, w)
    scale = 1.0 + k1 * r2 + k2 * r2 * r2
    ys, xs = np.mgrid[0:h, 0:w]
    sx = cx + (xs - cx) * scale
    sy = cy + (ys - cy) * scale
    return bilinear_sample(img, sx, sy)


def apply_vignette(img: np.ndarray, a: float) -> np.ndarray:
    r2, _ = _radius_sq(*img.shape[:2])
    gain = np.maximum(0.0, 1.0 - a * r2)
    return img * (gain[:, :, None] if img.ndim == 3 else gain)


def circular_mask(img: np.ndarray, margin: int) -> np.ndarray:
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    radius = w / 2.0 - margin
    ys, xs = np.mgrid[0:h, 0:w]
    inside = ((ys - cy) ** 2 + (xs - cx) ** 2) <= radius ** 2
    out = img.copy()
    out[~inside] = 0.0
    return out


def degrade(img: np.ndarray, cfg: DegradationConfig, rng) -> np.ndarray:
    """Fixed-order degradation chain; deterministic given the rng state.

    Order: distort, vignette, blur, noise, lighting jitter, grayscale,
    circular field-of-view mask, clamp.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    out = np.asarray(img, dtype=np.float64)
    if cfg.radial_k1 != 0.0 or cfg.radial_k2 != 0.0:
        out = apply_radial_distortion(out, cfg.radial_k1, cfg.radial_k2)
    if cfg.vignette_strength != 0.0:
        out = apply_vignette(out, cfg.vignette_strength)
    if cfg.blur_sigma > 0:
        if out.ndim == 3:
            out = np.stack([gaussian_filter(out[..., c], cfg.blur_sigma, mode="nearest")
                            for c in range(3)], axis=-1)
        else:
            out = gaussian_filter(out, cfg.blur_sigma, mode="nearest")
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=out.shape)
    lo, hi = cfg.lighting_gain_range
    if (lo, hi) != (1.0, 1.0) or cfg.lighting_offset_range != (0.0, 0.0):
        gain = rng.uniform(lo, hi)
        offset = rng.uniform(*cfg.lighting_offset_range)
        out = gain * out + offset
    if cfg.grayscale:
        g = to_grayscale(out)
        out = np.repeat(g[:, :, None], 3, axis=2) if img.ndim == 3 else g
    if cfg.mask_margin > 0:
        out = circular_mask(out, cfg.mask_margin)
    return clip01(out)


# ---------------------------------------------------------------------------
# sample generation

def expression_beta(expression_tag: str, k_e: int, jitter: float, rng) -> np.ndarray:
    if expression_tag not in _EXPRESSION_TEMPLATES:
        raise ContractViolation(f"unknown expression tag {expression_tag!r}")
    template = np.zeros(k_e)
    src = _EXPRESSION_TEMPLATES[expression_tag]
    template[:min(k_e, len(src))] = src[:k_e]
    if jitter > 0:
        template = template + rng.normal(0.0, jitter, size=k_e)
    return np.clip(template, -3.0, 3.0)


def _project_landmarks(model, verts, pose, resolution) -> LandmarkSet:
    idx = mm.landmark_vertex_indices(model)
    uv, _ = mm.project_vertices(verts, pose)
    pts = {}
    for name in LANDMARK_NAMES:
        x, y = uv[idx[name]]
        pts[name] = (float(np.clip(x, 0, resolution - 1)),
                     float(np.clip(y, 0, resolution - 1)))
    return LandmarkSet(pts, source="oracle")


def generate_sample(model: mm.MorphableModel, identity_seed: int,
                    expression_tag: str, cfg: DegradationConfig) -> VRSample:
    rng = np.random.default_rng([identity_seed, 0xFACE])
    res = cfg.resolution
    alpha = np.clip(rng.normal(0.0, cfg.alpha_scale / 2.0, model.k_shape), -3.0, 3.0)
    beta = expression_beta(expression_tag, model.k_expression, cfg.expression_jitter, rng)
    coeffs = mm.CoefficientPair(alpha, beta)
    neutral = mm.CoefficientPair(alpha, np.zeros(model.k_expression))
    pose = mm.default_pose(res, distance=cfg.camera_distance)

    full_face = mm.render_3dmm(model, coeffs, pose, res)
    dp_image = mm.render_3dmm(model, neutral, pose, res)
    verts = mm.evaluate(model, coeffs)
    lm = _project_landmarks(model, verts, pose, res)
    lm.validate_eye_order()

    g_yaw = GAZE_DEGREES_PER_UNIT * float(beta[0]) if model.k_expression > 0 else 0.0
    g_pitch = GAZE_DEGREES_PER_UNIT * float(beta[1]) if model.k_expression > 1 else 0.0
    gaze = {"left": (g_yaw, g_pitch), "right": (g_yaw, g_pitch)}

    def capture(tag, window_of):
        yaw, pitch = ANGLE_POSES[tag]
        cam = mm.default_pose(res, yaw=yaw, pitch=pitch, distance=cfg.camera_distance)
        render = mm.render_3dmm(model, coeffs, cam, res)
        lm_t = _project_landmarks(model, verts, cam, res)
        win = window_of(lm_t)
        crop = to_grayscale(crop_window(render, win))
        if cfg.eyebrow_occlusion_fraction > 0 and rng.random() < cfg.eyebrow_occlusion_fraction:
            brow = mm.region_mask(model, coeffs, cam, res, "eyebrow")
            crop = crop * (1.0 - crop_window(brow.astype(np.float64), win))
        return degrade(crop, cfg, rng)

    eye_left = [(tag, capture(tag, lambda l: eye_window(l, "left", res, res)))
                for tag in ANGLE_TAGS]
    eye_right = [(tag, capture(tag, lambda l: eye_window(l, "right", res, res)))
                 for tag in ANGLE_TAGS]
    lower = ("front", capture("front", lambda l: lower_face_window(l, res, res)))

    sample = VRSample(full_face=full_face, dp_image=dp_image, eye_left=eye_left,
                      eye_right=eye_right, lower_face=lower, coeffs=coeffs, pose=pose,
                      expression_tag=expression_tag, landmarks=lm, gaze=gaze,
                      seed=identity_seed)
    sample.validate()
    return sample


# ---------------------------------------------------------------------------
# dataset writer

def _sample_entry(i, tag, sample: VRSample, paths: dict) -> dict:
    return {
        "index": i,
        "expression": tag,
        "seed": sample.seed,
        "paths": paths,
        "shape_coeffs": sample.coeffs.shape_coeffs.tolist(),
        "expression_coeffs": sample.coeffs.expression_coeffs.tolist(),
        "pose": {"yaw": sample.pose.yaw, "pitch": sample.pose.pitch,
                 "distance": sample.pose.distance, "focal": sample.pose.focal,
                 "principal": list(sample.pose.principal)},
        "landmarks": {k: list(v) for k, v in sample.landmarks.points.items()},
        "gaze": {k: list(v) for k, v in sample.gaze.items()},
    }


def generate_dataset(model: mm.MorphableModel, n: int, cfg: DegradationConfig,
                     out_dir, seed: int) -> dict:
    """Write `n` samples (class-balanced over the 8 expressions) plus manifest.

    Deterministic in (seed, cfg); returns the manifest dict, also written to
    out_dir/manifest.json.
    """
    out_dir = Path(out_dir)
    for sub in ("full", "dp", "eyeL", "eyeR", "lower"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    hasher = hashlib.sha256()
    for i in range(n):
        tag = EXPRESSION_TAGS[i % len(EXPRESSION_TAGS)]
        identity_seed = int(np.random.default_rng([seed, i]).integers(0, 2 ** 31))
        sample = generate_sample(model, identity_seed, tag, cfg)
        paths = {}
        stem = f"{i:06d}_{tag}"
        for key, img in (("full", sample.full_face), ("dp", sample.dp_image)):
            rel = f"{key}/{stem}.png"
            save_png(img, out_dir / rel)
            paths[key] = rel
        for key, crops in (("eyeL", sample.eye_left), ("eyeR", sample.eye_right)):
            paths[key] = {}
            for angle, img in crops:
                rel = f"{key}/{stem}_{angle}.png"
                save_png(img, out_dir / rel)
                paths[key][angle] = rel
        angle, img = sample.lower_face
        rel = f"lower/{stem}_{angle}.png"
        save_png(img, out_dir / rel)
        paths["lower"] = {angle: rel}
        entry = _sample_entry(i, tag, sample, paths)
        entries.append(entry)
        hasher.update(json.dumps(entry, sort_keys=True).encode())
        for p in sorted(_flat_paths(paths)):
            hasher.update((out_dir / p).read_bytes())
    manifest = {
        "schema": "rav-dataset/1",
        "n": n,
        "seed": seed,
        "config": asdict(cfg),
        "samples": entries,
        "content_hash": hasher.hexdigest(),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def _flat_paths(paths: dict):
    for v in paths.values():
        if isinstance(v, dict):
            yield from v.values()
        else:
            yield v


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != "rav-dataset/1":
        raise ContractViolation("not a dataset manifest")
    return manifest


def manifest_landmarks(entry: dict) -> LandmarkSet:
    return LandmarkSet({k: tuple(v) for k, v in entry["landmarks"].items()})


def validate_dataset(manifest: dict, out_dir) -> None:
    """Bulk invariant check: files exist, class balance within 1."""
    out_dir = Path(out_dir)
    counts = {t: 0 for t in EXPRESSION_TAGS}
    for entry in manifest["samples"]:
        counts[entry["expression"]] += 1
        for p in _flat_paths(entry["paths"]):
            if not (out_dir / p).exists():
                raise ContractViolation(f"missing dataset file {p}")
        manifest_landmarks(entry)
    if manifest["samples"]:
        vals = list(counts.values())
        if max(vals) - min(vals) > 1:
            raise ContractViolation("expression classes out of balance")
