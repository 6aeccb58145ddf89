import numpy as np
import pytest

from rav import datasim as D
from rav import metrics as X
from rav import morphable as M
from rav.imageops import save_png, load_png


@pytest.fixture(scope="module")
def img():
    rng = np.random.default_rng(0)
    return rng.uniform(0, 1, (32, 32, 3))


def test_ssim_identity(img):
    assert X.ssim(img, img) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric(img):
    rng = np.random.default_rng(1)
    other = np.clip(img + rng.normal(0, 0.1, img.shape), 0, 1)
    assert X.ssim(img, other) == pytest.approx(X.ssim(other, img), abs=1e-12)


def test_ssim_range(img):
    rng = np.random.default_rng(2)
    for _ in range(3):
        other = rng.uniform(0, 1, img.shape)
        v = X.ssim(img, other)
        assert -1.0 <= v <= 1.0


def test_ssim_inverted_checker_negative():
    # direct computation on a 16x16 checker: windows with mean 0.5 and high
    # variance contribute ~ -1; the overall score must be negative
    y, x = np.mgrid[0:16, 0:16]
    checker = (((y // 4) + (x // 4)) % 2).astype(np.float64)
    val = X.ssim(checker, 1.0 - checker)
    assert val < 0
    smap = X.ssim_map(checker, 1.0 - checker)
    # independently recompute one interior window with explicit loops
    win = np.outer(*(2 * [np.exp(-((np.arange(11) - 5.0) ** 2) / (2 * 1.5 ** 2))]))
    win /= win.sum()
    a = checker[0:11, 0:11]
    b = 1.0 - a
    mu_a = (win * a).sum(); mu_b = (win * b).sum()
    var_a = (win * a * a).sum() - mu_a ** 2
    var_b = (win * b * b).sum() - mu_b ** 2
    cov = (win * a * b).sum() - mu_a * mu_b
    expect = ((2 * mu_a * mu_b + 0.01 ** 2) * (2 * cov + 0.03 ** 2)
              / ((mu_a ** 2 + mu_b ** 2 + 0.01 ** 2) * (var_a + var_b + 0.03 ** 2)))
    assert smap[0, 0] == pytest.approx(expect, abs=1e-9)


def test_psnr_identity_cap(img):
    assert X.psnr(img, img) == X.PSNR_CAP_DB


def test_psnr_constant_offset_closed_form():
    a = np.full((16, 16), 0.4)
    b = a + 0.1
    assert X.psnr(a, b) == pytest.approx(20.0, abs=1e-6)


def test_psnr_matches_direct_mse_oracle(img):
    rng = np.random.default_rng(3)
    other = rng.uniform(0, 1, img.shape)
    mse = np.mean((img - other) ** 2)
    assert X.psnr(img, other) == pytest.approx(10 * np.log10(1 / mse), abs=1e-9)


def test_perceptual_identity_and_nonnegative(img):
    assert X.perceptual(img, img) == pytest.approx(0.0, abs=1e-10)
    rng = np.random.default_rng(4)
    assert X.perceptual(img, rng.uniform(0, 1, img.shape)) >= 0


def test_perceptual_monotone_under_noise():
    rng = np.random.default_rng(5)
    base = rng.uniform(0.2, 0.8, (32, 32, 3))
    vals = []
    for sigma in (0.01, 0.05, 0.1):
        noisy = np.clip(base + np.random.default_rng(7).normal(0, sigma, base.shape), 0, 1)
        vals.append(X.perceptual(base, noisy))
    assert vals[0] < vals[1] < vals[2]


def test_perceptual_deterministic(img):
    rng = np.random.default_rng(6)
    other = rng.uniform(0, 1, img.shape)
    assert X.perceptual(img, other) == X.perceptual(img, other)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    model = M.make_synthetic_model(seed=0)
    cfg = D.DegradationConfig(resolution=64)
    manifest = D.generate_dataset(model, 4, cfg, out, seed=1)
    return out, manifest


def test_evaluate_dataset_perfect_predictions(small_dataset, tmp_path):
    ds_dir, manifest = small_dataset
    pred = tmp_path / "pred"
    pred.mkdir()
    for entry in manifest["samples"]:
        rel = entry["paths"]["full"]
        save_png(load_png(ds_dir / rel), pred / rel.split("/")[-1])
    report = X.evaluate_dataset(pred, ds_dir / "manifest.json")
    assert report.aggregate["count"] == 4
    for row in report.per_sample:
        assert row["ssim"] == pytest.approx(1.0, abs=1e-9)
        assert row["psnr_db"] == X.PSNR_CAP_DB
        assert row["perceptual"] == pytest.approx(0.0, abs=1e-9)


def test_evaluate_dataset_missing_prediction(small_dataset, tmp_path):
    ds_dir, manifest = small_dataset
    pred = tmp_path / "pred2"
    pred.mkdir()
    kept = manifest["samples"][1:]
    for entry in kept:
        rel = entry["paths"]["full"]
        save_png(load_png(ds_dir / rel), pred / rel.split("/")[-1])
    report = X.evaluate_dataset(pred, ds_dir / "manifest.json")
    assert len(report.errors) == 1
    assert report.aggregate["count"] == 3
    # aggregate equals hand-computed mean of the per-sample values
    assert report.aggregate["ssim"] == pytest.approx(
        np.mean([r["ssim"] for r in report.per_sample]), abs=1e-12)


def test_report_serialization(small_dataset, tmp_path):
    ds_dir, manifest = small_dataset
    pred = tmp_path / "pred3"
    pred.mkdir()
    for entry in manifest["samples"]:
        rel = entry["paths"]["full"]
        save_png(load_png(ds_dir / rel), pred / rel.split("/")[-1])
    report = X.evaluate_dataset(pred, ds_dir / "manifest.json")
    report.to_json(tmp_path / "report.json")
    report.to_csv(tmp_path / "report.csv")
    assert (tmp_path / "report.json").exists()
    assert (tmp_path / "report.csv").read_text().count("\n") == 5
