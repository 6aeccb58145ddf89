"""Image-quality and gaze evaluation: SSIM, PSNR, perceptual distance, eye-ROI
metrics, and dataset-level report generation."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate

from .datasim import load_manifest, manifest_landmarks
from .errors import ContractViolation
from .imageops import load_png
from .landmarks import eye_band_window
from .perceptual import get_proxy

PSNR_CAP_DB = 100.0
_C1 = 0.01 ** 2  # (0.01 * L)^2, L = 1 for [0, 1] images
_C2 = 0.03 ** 2


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim_map(a: np.ndarray, b: np.ndarray, window=None) -> np.ndarray:
    """Per-window SSIM for a single channel; 'valid' windows only."""
    if window is None:
        window = _gaussian_window()
    pad = window.shape[0] // 2

    def filt(x):
        return correlate(x, window, mode="nearest")[pad:-pad, pad:-pad]

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a ** 2 + mu_b ** 2 + _C1) * (var_a + var_b + _C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5), mean over windows/channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("ssim inputs must share shape")
    if min(a.shape[0], a.shape[1]) < 11:
        raise ContractViolation("ssim needs images of at least 11x11")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    vals = [ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[2])]
    return float(np.mean(vals))


def psnr(a: np.ndarray, b: np.ndarray, cap_db: float = PSNR_CAP_DB) -> float:
    """10 log10(1 / MSE) for [0, 1] images, capped for identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("psnr inputs must share shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap_db
    return float(min(10.0 * np.log10(1.0 / mse), cap_db))


def perceptual(a: np.ndarray, b: np.ndarray, seed: int = 0) -> float:
    """Randomized perceptual proxy distance (seed-fixed feature pyramid)."""
    proxy = get_proxy(seed)

    def to_t(x):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim == 2:
            x = np.repeat(x[:, :, None], 3, axis=2)
        return torch.from_numpy(x).permute(2, 0, 1)[None]

    with torch.no_grad():
        return float(proxy(to_t(a), to_t(b)))


@dataclass
class MetricReport:
    per_sample: list
    aggregate: dict
    errors: list
    config: dict

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"per_sample": self.per_sample, "aggregate": self.aggregate,
                       "errors": self.errors, "config": self.config}, fh, indent=1)

    def to_csv(self, path) -> None:
        cols = ["index", "ssim", "psnr_db", "perceptual",
                "roi_ssim", "roi_psnr_db", "roi_perceptual"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in self.per_sample:
                writer.writerow({c: row[c] for c in cols})


def evaluate_pair(pred: np.ndarray, truth: np.ndarray, lm) -> dict:
    H, W = truth.shape[:2]
    roi = eye_band_window(lm, H, W)
    sy, sx = roi.slices
    return {
        "ssim": ssim(pred, truth),
        "psnr_db": psnr(pred, truth),
        "perceptual": perceptual(pred, truth),
        "roi_ssim": ssim(pred[sy, sx], truth[sy, sx]),
        "roi_psnr_db": psnr(pred[sy, sx], truth[sy, sx]),
        "roi_perceptual": perceptual(pred[sy, sx], truth[sy, sx]),
    }


def evaluate_dataset(pred_dir, truth_manifest_path, dataset_dir=None) -> MetricReport:
    """Pair predictions (by ground-truth filename) with manifest entries.

    Predictions live flat in pred_dir under the full-face basename; missing
    files are listed under errors and excluded from aggregates.
    """
    pred_dir = Path(pred_dir)
    manifest = load_manifest(truth_manifest_path)
    dataset_dir = Path(dataset_dir) if dataset_dir else Path(truth_manifest_path).parent
    rows, errors = [], []
    for entry in manifest["samples"]:
        rel = entry["paths"]["full"]
        pred_path = pred_dir / Path(rel).name
        if not pred_path.exists():
            errors.append({"index": entry["index"], "missing": str(pred_path)})
            continue
        truth = load_png(dataset_dir / rel)
        pred = load_png(pred_path)
        if pred.shape != truth.shape:
            errors.append({"index": entry["index"], "shape_mismatch": str(pred_path)})
            continue
        row = evaluate_pair(pred, truth, manifest_landmarks(entry))
        row["index"] = entry["index"]
        rows.append(row)
    keys = ["ssim", "psnr_db", "perceptual", "roi_ssim", "roi_psnr_db", "roi_perceptual"]
    aggregate = {k: (float(np.mean([r[k] for r in rows])) if rows else None) for k in keys}
    aggregate["count"] = len(rows)
    config = {
        "ssim_window": "11x11 gaussian sigma=1.5", "psnr_cap_db": PSNR_CAP_DB,
        "perceptual": "randomized proxy (not pretrained LPIPS)",
        "roi": "eye band: union of both 25%-width eye windows + 6% margin",
    }
    return MetricReport(per_sample=rows, aggregate=aggregate, errors=errors, config=config)
