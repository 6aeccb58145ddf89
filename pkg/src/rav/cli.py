"""Command-line entry point tying the pipeline stages together.

Every subcommand validates its configuration, runs one module operation, and
writes outputs under a run directory together with a versioned manifest of
inputs, outputs, and seeds. Exit status is 0 on success; failures print a
categorized error and exit nonzero.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import align as AL
from . import avatar3d as AV
from . import datasim as DS
from . import metrics as MX
from . import morphable as MM
from . import restore2d as R2
from .archive import ArchiveError
from .bench import bench as run_bench
from .config import load_run_config
from .errors import ContractViolation, MissingArtifact
from .imageops import load_png, resize, save_png
from .landmarks import LandmarkSet, paste_crops
from .perceptual import PerceptualProxy
from .trainutil import (load_checkpoint, load_history_csv, save_checkpoint,
                        save_history_csv, to_image, to_tensor)

RUN_SCHEMA = "rav-run/1"

_CATEGORIES = (
    (MissingArtifact, "missing-artifact"),
    (FileNotFoundError, "missing-artifact"),
    (ArchiveError, "bad-artifact"),
    (ContractViolation, "contract-violation"),
)


def _categorize(exc: Exception) -> str:
    for etype, name in _CATEGORIES:
        if isinstance(exc, etype):
            return name
    return "internal-error"


def _guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Exception as exc:  # categorized exit for operators
            click.echo(f"error[{_categorize(exc)}]: {exc}", err=True)
            sys.exit(2)
    return wrapper


def _start_run(out, force: bool) -> Path:
    out = Path(out)
    if (out / "run.json").exists() and not force:
        raise ContractViolation(
            f"run directory {out} already holds a run; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, command: str, seed, inputs: dict,
                        outputs: list, extra: dict | None = None) -> None:
    manifest = {"schema": RUN_SCHEMA, "command": command, "seed": seed,
                "inputs": inputs, "outputs": sorted(str(o) for o in outputs)}
    if extra:
        manifest.update(extra)
    with open(out / "run.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def _require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"{what} not found: {path}")
    return path


def _scaled_landmarks(entry: dict, factor: float) -> LandmarkSet:
    return LandmarkSet({k: (v[0] * factor, v[1] * factor)
                        for k, v in entry["landmarks"].items()})


def _load_entry_images(ds_dir: Path, entry: dict, resolution: int):
    """(dp, full, eyeL, eyeR, lower, landmarks) at the requested resolution."""
    full = load_png(ds_dir / entry["paths"]["full"])
    dp = load_png(ds_dir / entry["paths"]["dp"])
    factor = resolution / full.shape[0]
    if factor != 1.0:
        full = resize(full, resolution, resolution)
        dp = resize(dp, resolution, resolution)
    lm = _scaled_landmarks(entry, factor)
    eye_l = load_png(ds_dir / entry["paths"]["eyeL"]["front"])
    eye_r = load_png(ds_dir / entry["paths"]["eyeR"]["front"])
    lower = load_png(ds_dir / entry["paths"]["lower"]["front"])
    return dp, full, eye_l, eye_r, lower, lm


def _restoration_batch(ds_dir: Path, manifest: dict, resolution: int) -> R2.RestorationBatch:
    xs, zs, ys = [], [], []
    for entry in manifest["samples"]:
        dp, full, eye_l, eye_r, lower, lm = _load_entry_images(ds_dir, entry, resolution)
        x = paste_crops(dp, eye_l, eye_r, lower, lm)
        xs.append(to_tensor(x)[0])
        zs.append(to_tensor(dp)[0])
        ys.append(to_tensor(full)[0])
    return R2.RestorationBatch(x=torch.stack(xs), z=torch.stack(zs), y=torch.stack(ys))


@click.group()
def main():
    """Reverse pass-through face pipeline: data simulation, frontalization,
    restoration, avatar rendering, evaluation, and benchmarking."""


@main.command("simulate-data")
@click.option("--n", default=16, show_default=True, help="number of samples")
@click.option("--seed", default=None, type=int, help="dataset seed")
@click.option("--resolution", default=128, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="run directory")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def simulate_data(n, seed, resolution, out, config_path, force):
    """Generate a synthetic degraded-capture dataset plus manifest."""
    cfg = load_run_config(config_path, {"seed": seed})
    out = _start_run(out, force)
    model = MM.make_synthetic_model(seed=cfg.seed)
    sim_cfg = DS.DegradationConfig(**{"resolution": resolution, **cfg.datasim})
    manifest = DS.generate_dataset(model, n, sim_cfg, out, seed=cfg.seed)
    MM.save_model(model, out / "model.rav")
    _write_run_manifest(out, "simulate-data", cfg.seed,
                        {"n": n, "resolution": resolution},
                        [out / "manifest.json", out / "model.rav"],
                        {"content_hash": manifest["content_hash"]})
    click.echo(f"wrote {n} samples to {out} (hash {manifest['content_hash'][:12]})")


@main.command("train-align")
@click.option("--dataset", "dataset_dir", default=None, type=click.Path())
@click.option("--toy", is_flag=True, help="train on the synthetic rotation domain")
@click.option("--slot", default="CG_LE", type=click.Choice(AL.SLOTS))
@click.option("--steps", default=500, show_default=True)
@click.option("--resolution", default=32, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--autoencoder", is_flag=True, help="ablation: paired L1 autoencoder")
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def train_align(dataset_dir, toy, slot, steps, resolution, lr, seed, autoencoder,
                out, config_path, force):
    """Train one frontalization slot (CycleGAN objective)."""
    cfg = load_run_config(config_path, {"seed": seed})
    out = _start_run(out, force)
    al_cfg = AL.AlignConfig(**{"resolution": resolution, "learning_rate": lr,
                               "seed": cfg.seed, **cfg.align})
    if toy:
        data = AL.make_toy_rotation_dataset(16, resolution, seed=cfg.seed)
    else:
        ds_dir = _require(dataset_dir or cfg.dataset_dir or "", "dataset directory")
        manifest = DS.load_manifest(_require(ds_dir / "manifest.json", "dataset manifest"))
        key = {"CG_LE": "eyeL", "CG_RE": "eyeR", "CG_Face": "lower"}[slot]
        # index-aligned pairs: each tilted crop against its sample's frontal
        a_imgs, b_imgs = [], []
        for entry in manifest["samples"]:
            crops = {angle: resize(load_png(Path(ds_dir) / rel), resolution, resolution)
                     for angle, rel in entry["paths"][key].items()}
            front = crops["front"]
            tilted = [img for angle, img in crops.items() if angle != "front"]
            for img in tilted or [front]:  # lower-face crops exist only frontally
                a_imgs.append(img)
                b_imgs.append(front)
        stack = lambda lst: torch.from_numpy(np.stack(lst)[:, None]).float()
        data = {"A": stack(a_imgs), "B": stack(b_imgs)}
    model_slot = AL.AlignmentSlot(al_cfg)
    if autoencoder:
        history = AL.train_autoencoder_alignment(model_slot, data, steps, al_cfg)
    else:
        history = AL.train_alignment(model_slot, data, steps, al_cfg)
    ckpt = out / "align.rav"
    save_checkpoint(ckpt, model_slot.modules())
    save_history_csv(out / "history.csv", history)
    from .plotting import plot_loss_curves
    plot_loss_curves(history, out / "loss.png")
    _write_run_manifest(out, "train-align", cfg.seed,
                        {"slot": slot, "steps": steps, "toy": toy,
                         "autoencoder": autoencoder},
                        [ckpt, out / "history.csv", out / "loss.png"])
    click.echo(f"trained {slot} for {steps} steps -> {ckpt}")


def _restore_models(resolution, cfg, no_cross_attention=False):
    gen_cfg = R2.GeneratorConfig(**{"resolution": resolution,
                                    "use_cross_attention": not no_cross_attention,
                                    **cfg.restore.get("generator", {})})
    disc_cfg = R2.DiscriminatorConfig(**cfg.restore.get("discriminator", {}))
    return gen_cfg, disc_cfg


@main.command("train-restore")
@click.option("--dataset", "dataset_dir", default=None, type=click.Path())
@click.option("--steps", default=500, show_default=True)
@click.option("--resolution", default=64, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--batch", default=4, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--no-cross-attention", is_flag=True)
@click.option("--no-perceptual", is_flag=True)
@click.option("--no-reference", is_flag=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def train_restore(dataset_dir, steps, resolution, lr, batch, seed,
                  no_cross_attention, no_perceptual, no_reference, out,
                  config_path, force):
    """Train the reference-guided restoration GAN on a simulated dataset."""
    cfg = load_run_config(config_path, {"seed": seed})
    out = _start_run(out, force)
    ds_dir = _require(dataset_dir or cfg.dataset_dir or "", "dataset directory")
    manifest = DS.load_manifest(_require(Path(ds_dir) / "manifest.json",
                                         "dataset manifest"))
    data = _restoration_batch(Path(ds_dir), manifest, resolution)
    gen_cfg, disc_cfg = _restore_models(resolution, cfg, no_cross_attention)
    weights = R2.LossWeights(lpips=0.0) if no_perceptual else R2.LossWeights()
    train_cfg = R2.RestoreTrainConfig(
        generator=gen_cfg, discriminator=disc_cfg, weights=weights,
        learning_rate=lr, batch_size=batch, steps=steps, seed=cfg.seed,
        use_reference=not no_reference)
    ckpt = out / "restore.rav"
    _, _, history = R2.train_restoration(data, train_cfg, checkpoint_path=ckpt)
    save_history_csv(out / "history.csv", history)
    from .plotting import plot_loss_curves
    plot_loss_curves(history, out / "loss.png")
    _write_run_manifest(out, "train-restore", cfg.seed,
                        {"steps": steps, "resolution": resolution,
                         "ablations": {"no_cross_attention": no_cross_attention,
                                       "no_perceptual": no_perceptual,
                                       "no_reference": no_reference}},
                        [ckpt, out / "history.csv", out / "loss.png"])
    click.echo(f"trained restoration for {steps} steps -> {ckpt}")


@main.command("restore")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--resolution", default=64, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def restore_cmd(dataset_dir, checkpoint, resolution, out, config_path, force):
    """Run restoration inference over a dataset's degraded crops."""
    cfg = load_run_config(config_path, {})
    out = _start_run(out, force)
    ds_dir = _require(dataset_dir, "dataset directory")
    ckpt = _require(checkpoint, "restoration checkpoint")
    manifest = DS.load_manifest(_require(Path(ds_dir) / "manifest.json",
                                         "dataset manifest"))
    gen_cfg, _ = _restore_models(resolution, cfg)
    gen = R2.RestorationGenerator(gen_cfg)
    load_checkpoint(ckpt, {"generator": gen})
    pred_dir = out / "pred"
    pred_dir.mkdir(exist_ok=True)
    outputs = []
    for entry in manifest["samples"]:
        dp, full, eye_l, eye_r, lower, lm = _load_entry_images(
            Path(ds_dir), entry, resolution)
        img = R2.restore(gen, eye_l, eye_r, lower, dp, lm)
        dest = pred_dir / Path(entry["paths"]["full"]).name
        save_png(img, dest)
        outputs.append(dest)
    _write_run_manifest(out, "restore", cfg.seed,
                        {"dataset": str(ds_dir), "checkpoint": str(ckpt)}, outputs)
    click.echo(f"restored {len(outputs)} images -> {pred_dir}")


@main.command("evaluate")
@click.option("--pred", required=True, type=click.Path())
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--resolution", default=None, type=int,
              help="prediction resolution if it differs from the dataset")
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@_guarded
def evaluate(pred, dataset_dir, resolution, out, force):
    """Score predictions against dataset ground truth (full face + eye ROI)."""
    out = _start_run(out, force)
    pred_dir = _require(pred, "prediction directory")
    ds_dir = _require(dataset_dir, "dataset directory")
    manifest_path = _require(Path(ds_dir) / "manifest.json", "dataset manifest")
    if resolution is not None:
        # rescale ground truth to the prediction resolution in a temp tree
        manifest = DS.load_manifest(manifest_path)
        scaled = out / "truth_scaled"
        for entry in manifest["samples"]:
            rel = entry["paths"]["full"]
            img = resize(load_png(Path(ds_dir) / rel), resolution, resolution)
            save_png(img, scaled / rel)
            factor = resolution / manifest["config"]["resolution"]
            entry["landmarks"] = {k: [v[0] * factor, v[1] * factor]
                                  for k, v in entry["landmarks"].items()}
        manifest_path = scaled / "manifest.json"
        with open(manifest_path, "w") as fh:
            json.dump(manifest, fh)
    report = MX.evaluate_dataset(pred_dir, manifest_path)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    from .plotting import plot_metric_bars
    if report.per_sample:
        plot_metric_bars(report, out / "ssim.png", "ssim")
    _write_run_manifest(out, "evaluate", None,
                        {"pred": str(pred_dir), "dataset": str(ds_dir)},
                        [out / "report.json", out / "report.csv"])
    agg = report.aggregate
    click.echo(f"count={agg['count']} ssim={agg['ssim']} psnr={agg['psnr_db']} "
               f"perceptual={agg['perceptual']} errors={len(report.errors)}")


@main.command("train-avatar")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--stage1-steps", default=500, show_default=True)
@click.option("--stage2-steps", default=100, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--seed", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def train_avatar_cmd(dataset_dir, stage1_steps, stage2_steps, lr, seed, out,
                     config_path, force):
    """Two-stage avatar training on a simulated dataset.

    Plumbing note: the driving expression input is the ground-truth full-face
    image; the neutral target is the DP render.
    """
    cfg = load_run_config(config_path, {"seed": seed})
    out = _start_run(out, force)
    ds_dir = _require(dataset_dir, "dataset directory")
    manifest = DS.load_manifest(_require(Path(ds_dir) / "manifest.json",
                                         "dataset manifest"))
    av_cfg = AV.AvatarConfig(**cfg.avatar)
    i_s, i_t, i_e, neutral, poses = [], [], [], [], []
    for entry in manifest["samples"]:
        full = load_png(Path(ds_dir) / entry["paths"]["full"])
        dp = load_png(Path(ds_dir) / entry["paths"]["dp"])
        i_s.append(to_tensor(resize(dp, av_cfg.image_resolution,
                                    av_cfg.image_resolution))[0])
        i_e.append(to_tensor(resize(full, av_cfg.image_resolution,
                                    av_cfg.image_resolution))[0])
        i_t.append(to_tensor(resize(full, av_cfg.render_resolution,
                                    av_cfg.render_resolution))[0])
        neutral.append(to_tensor(resize(dp, av_cfg.render_resolution,
                                        av_cfg.render_resolution))[0])
        poses.append(MM.default_pose(av_cfg.render_resolution))
    batch = AV.AvatarBatch(i_s=torch.stack(i_s), i_t=torch.stack(i_t),
                           i_e=torch.stack(i_e), neutral=torch.stack(neutral),
                           poses=poses)
    train_cfg = AV.AvatarTrainConfig(avatar=av_cfg, learning_rate=lr,
                                     stage1_steps=stage1_steps,
                                     stage2_steps=stage2_steps, seed=cfg.seed)
    ckpt = out / "avatar.rav"
    _, history = AV.train_avatar(batch, train_cfg, checkpoint_path=ckpt)
    save_history_csv(out / "history.csv", history)
    from .plotting import plot_loss_curves
    plot_loss_curves(history, out / "loss.png")
    _write_run_manifest(out, "train-avatar", cfg.seed,
                        {"stage1_steps": stage1_steps, "stage2_steps": stage2_steps},
                        [ckpt, out / "history.csv", out / "loss.png"])
    click.echo(f"trained avatar ({stage1_steps}+{stage2_steps} steps) -> {ckpt}")


@main.command("drive-avatar")
@click.option("--dataset", "dataset_dir", required=True, type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--index", default=0, show_default=True, help="sample to drive")
@click.option("--frames", default=5, show_default=True)
@click.option("--max-yaw", default=45.0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def drive_avatar_cmd(dataset_dir, checkpoint, index, frames, max_yaw, out,
                     config_path, force):
    """Render a turntable of the one-shot avatar for one identity."""
    cfg = load_run_config(config_path, {})
    out = _start_run(out, force)
    ds_dir = _require(dataset_dir, "dataset directory")
    ckpt = _require(checkpoint, "avatar checkpoint")
    manifest = DS.load_manifest(_require(Path(ds_dir) / "manifest.json",
                                         "dataset manifest"))
    if not 0 <= index < len(manifest["samples"]):
        raise ContractViolation(f"sample index {index} out of range")
    av_cfg = AV.AvatarConfig(**cfg.avatar)
    model = AV.AvatarModel(av_cfg)
    load_checkpoint(ckpt, model.modules())
    entry = manifest["samples"][index]
    dp = load_png(Path(ds_dir) / entry["paths"]["dp"])
    full = load_png(Path(ds_dir) / entry["paths"]["full"])
    i_s = to_tensor(resize(dp, av_cfg.image_resolution, av_cfg.image_resolution))[0]
    i_e = to_tensor(resize(full, av_cfg.image_resolution, av_cfg.image_resolution))[0]
    yaws = np.linspace(-max_yaw, max_yaw, frames)
    poses = [MM.default_pose(av_cfg.render_resolution, yaw=float(y)) for y in yaws]
    paths = AV.export_turntable(model, i_s, i_e, poses, out / "frames")
    _write_run_manifest(out, "drive-avatar", cfg.seed,
                        {"index": index, "frames": frames,
                         "checkpoint": str(ckpt)}, paths)
    click.echo(f"rendered {len(paths)} frames -> {out / 'frames'}")


@main.command("bench")
@click.option("--checkpoint", default=None, type=click.Path(),
              help="restoration checkpoint (omit with --fresh)")
@click.option("--fresh", is_flag=True, help="bench an untrained generator")
@click.option("--resolution", default=128, show_default=True)
@click.option("--warmup", default=None, type=int)
@click.option("--iters", default=None, type=int)
@click.option("--out", required=True, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
@click.option("--force", is_flag=True)
@_guarded
def bench_cmd(checkpoint, fresh, resolution, warmup, iters, out, config_path, force):
    """Time single-image restoration inference (wall clock, after warmup)."""
    cfg = load_run_config(config_path, {})
    if warmup is not None:
        cfg.bench.warmup_iters = warmup
    if iters is not None:
        cfg.bench.timed_iters = iters
    cfg.bench.resolution = resolution
    cfg.bench.validate()
    out = _start_run(out, force)
    gen_cfg, _ = _restore_models(resolution, cfg)
    gen = R2.RestorationGenerator(gen_cfg)
    if not fresh:
        if checkpoint is None:
            raise MissingArtifact("no checkpoint given (or pass --fresh)")
        load_checkpoint(_require(checkpoint, "restoration checkpoint"),
                        {"generator": gen})
    torch.manual_seed(0)
    x = torch.rand(1, 3, resolution, resolution)
    z = torch.rand(1, 3, resolution, resolution)

    def op():
        with torch.no_grad():
            gen(x, z)

    report = run_bench("restore-inference", op,
                       warmup_iters=cfg.bench.warmup_iters,
                       timed_iters=cfg.bench.timed_iters,
                       environment={"device": cfg.device,
                                    "resolution": resolution,
                                    "batch": cfg.bench.batch_size})
    report.to_json(out / "bench.json")
    _write_run_manifest(out, "bench", None,
                        {"resolution": resolution,
                         "checkpoint": checkpoint, "fresh": fresh},
                        [out / "bench.json"])
    click.echo(f"mean={report.mean_s * 1e3:.2f}ms median={report.median_s * 1e3:.2f}ms "
               f"p95={report.p95_s * 1e3:.2f}ms cv={report.cv:.3f}")


@main.command("plot")
@click.option("--history", "history_path", default=None, type=click.Path())
@click.option("--report", "report_path", default=None, type=click.Path())
@click.option("--pred", default=None, type=click.Path(),
              help="prediction dir for a sample grid")
@click.option("--dataset", "dataset_dir", default=None, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--force", is_flag=True)
@_guarded
def plot_cmd(history_path, report_path, pred, dataset_dir, out, force):
    """Emit loss curves, metric bars, and/or sample grids as PNG."""
    out = _start_run(out, force)
    outputs = []
    from .plotting import plot_loss_curves, plot_metric_bars, plot_sample_grid
    if history_path:
        rows = load_history_csv(_require(history_path, "history csv"))
        plot_loss_curves(rows, out / "loss.png")
        outputs.append(out / "loss.png")
    if report_path:
        with open(_require(report_path, "metric report")) as fh:
            data = json.load(fh)
        plot_metric_bars(data["per_sample"], out / "ssim.png", "ssim")
        outputs.append(out / "ssim.png")
    if pred and dataset_dir:
        manifest = DS.load_manifest(_require(Path(dataset_dir) / "manifest.json",
                                             "dataset manifest"))
        rows = []
        for entry in manifest["samples"][:4]:
            rel = entry["paths"]["full"]
            pred_path = Path(pred) / Path(rel).name
            if not pred_path.exists():
                continue
            truth = load_png(Path(dataset_dir) / rel)
            dp = load_png(Path(dataset_dir) / entry["paths"]["dp"])
            rows.append([("input DP", dp), ("restored", load_png(pred_path)),
                         ("truth", truth)])
        plot_sample_grid(rows, out / "samples.png")
        outputs.append(out / "samples.png")
    if not outputs:
        raise ContractViolation("nothing to plot: pass --history, --report, "
                                "or --pred with --dataset")
    _write_run_manifest(out, "plot", None,
                        {"history": history_path, "report": report_path},
                        outputs)
    click.echo(f"wrote {len(outputs)} plot(s) -> {out}")


if __name__ == "__main__":
    main()
