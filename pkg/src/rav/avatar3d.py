"""One-shot tri-plane head avatar.

Three image-conditioned branches (global identity, appearance detail,
expression) each emit a tri-plane; the planes are summed, sampled with
bilinear interpolation, decoded to density/color by a small field decoder,
and composited with emission-absorption quadrature along stratified camera
rays. A residual-on-bicubic super-resolution head upscales the low-resolution
render. Training runs in two stages: branches + decoder at low resolution,
then the super-resolution head alone with the rest frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .morphable import CameraPose, camera_basis
from .perceptual import PerceptualProxy
from .restore2d import LossWeights, MultiscaleDiscriminator
from .trainutil import save_checkpoint, to_image, to_tensor

_PLANE_AXES = ((0, 1), (0, 2), (1, 2))  # XY, XZ, YZ in-plane coordinates


@dataclass
class TriPlane:
    """Three R x R x C feature grids over an axis-aligned cube.

    planes: tensor of shape (3, C, R, R); plane p interpolates over the two
    axes in `_PLANE_AXES[p]`. bounds: cube side length in canonical units.
    """

    planes: torch.Tensor
    bounds: float = 2.0

    def __post_init__(self):
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ContractViolation("tri-plane tensor must be (3, C, R, R)")
        if self.planes.shape[-1] != self.planes.shape[-2]:
            raise ContractViolation("tri-plane grids must be square")
        if not torch.isfinite(self.planes.detach()).all():
            raise ContractViolation("tri-plane features must be finite")
        if self.bounds <= 0:
            raise ContractViolation("bounds must be positive")

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[1]


def combine(t_g: TriPlane, t_d: TriPlane, t_e: TriPlane) -> TriPlane:
    """Elementwise sum of the three branch tri-planes."""
    if t_g.planes.shape != t_d.planes.shape or t_g.planes.shape != t_e.planes.shape:
        raise ContractViolation("tri-planes to combine must share shape")
    return TriPlane(t_g.planes + t_d.planes + t_e.planes, t_g.bounds)


def sample_triplane(tri: TriPlane, points: torch.Tensor) -> torch.Tensor:
    """Features for N x 3 points: per-plane bilinear interpolation, summed.

    Coordinates are taken in the cube [-bounds/2, bounds/2]^3 and edge-clamped
    outside it.
    """
    if points.ndim != 2 or points.shape[1] != 3:
        raise ContractViolation("points must be N x 3")
    if not torch.isfinite(points).all():
        raise ContractViolation("points must be finite")
    r = tri.resolution
    half = tri.bounds / 2.0
    out = None
    for p, (ax_u, ax_v) in enumerate(_PLANE_AXES):
        plane = tri.planes[p]  # C x R x R, indexed [v, u]
        u = (points[:, ax_u] / half * 0.5 + 0.5) * (r - 1)
        v = (points[:, ax_v] / half * 0.5 + 0.5) * (r - 1)
        u = torch.clamp(u, 0.0, float(r - 1))
        v = torch.clamp(v, 0.0, float(r - 1))
        u0 = torch.clamp(u.floor().long(), 0, r - 2)
        v0 = torch.clamp(v.floor().long(), 0, r - 2)
        fu = (u - u0).unsqueeze(0)
        fv = (v - v0).unsqueeze(0)
        f00 = plane[:, v0, u0]
        f01 = plane[:, v0, u0 + 1]
        f10 = plane[:, v0 + 1, u0]
        f11 = plane[:, v0 + 1, u0 + 1]
        feat = (f00 * (1 - fu) * (1 - fv) + f01 * fu * (1 - fv)
                + f10 * (1 - fu) * fv + f11 * fu * fv)
        out = feat if out is None else out + feat
    return out.T  # N x C


class FieldDecoder(torch.nn.Module):
    """Two-layer perceptron: features -> (density via softplus, color via
    logistic)."""

    def __init__(self, channels: int, hidden: int = 32):
        super().__init__()
        self.l1 = torch.nn.Linear(channels, hidden)
        self.l2 = torch.nn.Linear(hidden, 4)

    def forward(self, feats: torch.Tensor):
        h = torch.tanh(self.l1(feats))
        out = self.l2(h)
        sigma = F.softplus(out[:, 0])
        color = torch.sigmoid(out[:, 1:])
        return sigma, color


# ---------------------------------------------------------------------------
# ray casting and compositing

def ray_cube_intersect(origins, dirs, side: float):
    """Slab test against [-side/2, side/2]^3; returns (t0, t1, hit mask)."""
    half = side / 2.0
    inv = 1.0 / torch.where(dirs.abs() < 1e-12,
                            torch.full_like(dirs, 1e-12), dirs)
    ta = (-half - origins) * inv
    tb = (half - origins) * inv
    t0 = torch.minimum(ta, tb).amax(dim=-1)
    t1 = torch.maximum(ta, tb).amin(dim=-1)
    t0 = torch.clamp(t0, min=0.0)
    hit = t1 > t0
    return t0, t1, hit


def camera_rays(pose: CameraPose, resolution: int, dtype=torch.float32):
    """Per-pixel ray origins and unit directions for the orbit camera."""
    center, right, down, forward = camera_basis(pose)
    ys, xs = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    cx, cy = pose.principal
    dx = (xs + 0.5 - cx) / pose.focal
    dy = (ys + 0.5 - cy) / pose.focal
    dirs = (dx[..., None] * right + dy[..., None] * down + forward)
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(center, dirs.shape).copy()
    return (torch.as_tensor(origins.reshape(-1, 3), dtype=dtype),
            torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype))


def composite(sigmas, colors, deltas, background: float = 1.0):
    """Emission-absorption quadrature along each ray.

    sigmas: N x S, colors: N x S x 3, deltas: N x S. Returns (pixel colors
    N x 3, final transmittance N).
    """
    tau = sigmas * deltas
    trans = torch.exp(-torch.cumsum(
        torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=1), dim=1))
    alpha = 1.0 - torch.exp(-tau)
    weights = trans * alpha
    pix = (weights.unsqueeze(-1) * colors).sum(dim=1)
    t_final = trans[:, -1] * torch.exp(-tau[:, -1])
    pix = pix + (1.0 - weights.sum(dim=1, keepdim=True)) * background
    return pix, t_final


def render_field(field_fn, pose: CameraPose, resolution: int, n_samples: int,
                 bounds: float = 2.0, background: float = 1.0,
                 jitter: float = 0.5, dtype=torch.float32):
    """Render an arbitrary field_fn(points N x 3) -> (sigma N, color N x 3).

    Sample positions are stratified midpoints (fixed jitter for determinism);
    deltas are distances between consecutive samples, the last delta running
    to the cube exit point. Returns (image tensor 3 x H x W, transmittance
    map H x W).
    """
    origins, dirs = camera_rays(pose, resolution, dtype=dtype)
    t0, t1, hit = ray_cube_intersect(origins, dirs, bounds)
    n = origins.shape[0]
    span = torch.where(hit, t1 - t0, torch.zeros_like(t0))
    i = torch.arange(n_samples, dtype=dtype)
    ts = t0[:, None] + (i[None, :] + jitter) / n_samples * span[:, None]
    deltas = torch.diff(ts, dim=1)
    last = (t1[:, None] - ts[:, -1:])
    deltas = torch.cat([deltas, last.clamp(min=0.0)], dim=1)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    sigma, color = field_fn(pts.reshape(-1, 3))
    sigma = sigma.reshape(n, n_samples) * hit[:, None].to(dtype)
    color = color.reshape(n, n_samples, 3)
    pix, t_final = composite(sigma, color, deltas, background)
    img = pix.T.reshape(3, resolution, resolution)
    return img, t_final.reshape(resolution, resolution)


def volume_render(tri: TriPlane, decoder: FieldDecoder, pose: CameraPose,
                  resolution: int, n_samples: int = 16,
                  background: float = 1.0):
    """Low-resolution radiance render of a decoded tri-plane (operator R)."""

    def field_fn(points):
        return decoder(sample_triplane(tri, points))

    img, _ = render_field(field_fn, pose, resolution, n_samples,
                          bounds=tri.bounds, background=background,
                          dtype=tri.planes.dtype)
    return img


# ---------------------------------------------------------------------------
# branches and super-resolution

@dataclass(frozen=True)
class AvatarConfig:
    plane_resolution: int = 32
    channels: int = 8
    hidden: int = 32
    render_resolution: int = 32
    n_samples: int = 16
    sr_factor: int = 2
    bounds: float = 2.0
    background: float = 1.0
    image_resolution: int = 32   # branch input size
    base_channels: int = 16
    attention_heads: int = 2


class _SelfAttention(torch.nn.Module):
    def __init__(self, channels, heads):
        super().__init__()
        self.heads = heads
        self.qkv = torch.nn.Conv2d(channels, 3 * channels, 1)
        self.out = torch.nn.Conv2d(channels, channels, 1)
        torch.nn.init.zeros_(self.out.weight)
        torch.nn.init.zeros_(self.out.bias)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(x).reshape(b, 3, self.heads, c // self.heads, h * w).unbind(1)
        logits = torch.einsum("bhcq,bhck->bhqk", q * (c // self.heads) ** -0.5, k)
        att = torch.softmax(logits, dim=-1)
        o = torch.einsum("bhqk,bhck->bhcq", att, v).reshape(b, c, h, w)
        return x + self.out(o)


class TriPlaneBranch(torch.nn.Module):
    """Image (+ optional pose scalars) -> tri-plane, with a zero-initialized
    decoding head so an untrained branch emits the all-zero tri-plane."""

    def __init__(self, cfg: AvatarConfig, pose_conditioned: bool = False,
                 attention: bool = False):
        super().__init__()
        self.cfg = cfg
        self.pose_conditioned = pose_conditioned
        c = cfg.base_channels
        in_ch = 3 + (3 if pose_conditioned else 0)
        self.stem = torch.nn.Conv2d(in_ch, c, 3, padding=1)
        self.down1 = torch.nn.Conv2d(c, 2 * c, 4, stride=2, padding=1)
        self.down2 = torch.nn.Conv2d(2 * c, 2 * c, 4, stride=2, padding=1)
        self.attn = _SelfAttention(2 * c, cfg.attention_heads) if attention \
            else torch.nn.Identity()
        self.up1 = torch.nn.Conv2d(2 * c, 2 * c, 3, padding=1)
        self.up2 = torch.nn.Conv2d(2 * c, c, 3, padding=1)
        self.head = torch.nn.Conv2d(c, 3 * cfg.channels, 3, padding=1)
        torch.nn.init.zeros_(self.head.weight)
        torch.nn.init.zeros_(self.head.bias)

    def forward(self, img: torch.Tensor, pose: CameraPose | None = None) -> TriPlane:
        if img.ndim == 3:
            img = img[None]
        x = img
        if self.pose_conditioned:
            if pose is None:
                raise ContractViolation("pose-conditioned branch needs a pose")
            vals = torch.tensor([pose.yaw / 90.0, pose.pitch / 90.0,
                                 pose.distance / 5.0], dtype=img.dtype)
            x = torch.cat([x, vals.view(1, 3, 1, 1).expand(
                x.shape[0], 3, x.shape[2], x.shape[3])], dim=1)
        h = F.leaky_relu(self.stem(x), 0.2)
        h = F.leaky_relu(self.down1(h), 0.2)
        h = F.leaky_relu(self.down2(h), 0.2)
        h = self.attn(h)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = F.leaky_relu(self.up1(h), 0.2)
        h = F.interpolate(h, size=(self.cfg.plane_resolution,) * 2, mode="nearest")
        h = F.leaky_relu(self.up2(h), 0.2)
        planes = self.head(h)[0].reshape(3, self.cfg.channels,
                                         self.cfg.plane_resolution,
                                         self.cfg.plane_resolution)
        return TriPlane(planes, self.cfg.bounds)


class SuperResolver(torch.nn.Module):
    """Residual-on-bicubic upsampler: zero-initialized head reproduces plain
    (clamped) bicubic upsampling exactly."""

    def __init__(self, factor: int = 2, channels: int = 16):
        super().__init__()
        if factor not in (2, 4):
            raise ContractViolation("sr factor must be 2 or 4")
        self.factor = factor
        self.c1 = torch.nn.Conv2d(3, channels, 3, padding=1)
        self.c2 = torch.nn.Conv2d(channels, 3, 3, padding=1)
        torch.nn.init.zeros_(self.c2.weight)
        torch.nn.init.zeros_(self.c2.bias)

    def forward(self, low):
        if low.ndim == 3:
            low = low[None]
        up = F.interpolate(low, scale_factor=self.factor, mode="bicubic",
                           align_corners=False)
        res = self.c2(F.leaky_relu(self.c1(up), 0.2))
        return torch.clamp(up + res, 0.0, 1.0)


def super_resolve(sr: SuperResolver, low_res: torch.Tensor) -> torch.Tensor:
    return sr(low_res)


class AvatarModel:
    """Bundle of the three branches, field decoder, and SR head."""

    def __init__(self, cfg: AvatarConfig):
        self.cfg = cfg
        self.global_branch = TriPlaneBranch(cfg, pose_conditioned=True, attention=True)
        self.detail_branch = TriPlaneBranch(cfg)
        self.expression_branch = TriPlaneBranch(cfg)
        self.decoder = FieldDecoder(cfg.channels, cfg.hidden)
        self.sr = SuperResolver(cfg.sr_factor)

    def modules(self):
        return {"global_branch": self.global_branch,
                "detail_branch": self.detail_branch,
                "expression_branch": self.expression_branch,
                "decoder": self.decoder, "sr": self.sr}

    def to(self, dtype):
        for m in self.modules().values():
            m.to(dtype)
        return self

    def stage1_parameters(self):
        params = []
        for name in ("global_branch", "detail_branch", "expression_branch", "decoder"):
            params += list(self.modules()[name].parameters())
        return params

    def triplanes(self, i_s, i_e, pose, zero_detail=False, zero_expression=False):
        t_g = self.global_branch(i_s, pose)
        t_d = self.detail_branch(i_s)
        t_e = self.expression_branch(i_e)
        if zero_detail:
            t_d = TriPlane(torch.zeros_like(t_d.planes), t_d.bounds)
        if zero_expression:
            t_e = TriPlane(torch.zeros_like(t_e.planes), t_e.bounds)
        return t_g, t_d, t_e

    def render_low(self, tri: TriPlane, pose: CameraPose):
        return volume_render(tri, self.decoder, pose,
                             self.cfg.render_resolution, self.cfg.n_samples,
                             self.cfg.background)


def global_branch(model: AvatarModel, i_s, pose) -> TriPlane:
    return model.global_branch(i_s, pose)


def detail_branch(model: AvatarModel, i_s) -> TriPlane:
    return model.detail_branch(i_s)


def expression_branch(model: AvatarModel, i_e) -> TriPlane:
    return model.expression_branch(i_e)


# ---------------------------------------------------------------------------
# batches and losses

@dataclass
class AvatarBatch:
    """One training sample group (kept small: desk-scale overfit sets)."""

    i_s: torch.Tensor       # source DP images, B x 3 x H x W
    i_t: torch.Tensor       # driving/target images
    i_e: torch.Tensor       # frontal expression renders
    neutral: torch.Tensor   # neutral-expression render of the source identity
    poses: list             # CameraPose per sample

    def __post_init__(self):
        b = self.i_s.shape[0]
        if not (self.i_t.shape[0] == self.i_e.shape[0]
                == self.neutral.shape[0] == len(self.poses) == b):
            raise ContractViolation("inconsistent avatar batch size")
        for t in (self.i_s, self.i_t, self.i_e, self.neutral):
            if t.min() < 0 or t.max() > 1:
                raise ContractViolation("avatar batch images must lie in [0,1]")


def stage1_loss(model: AvatarModel, batch: AvatarBatch, weights: LossWeights,
                perceptual: PerceptualProxy, indices=None) -> dict:
    """L_Stage1 = w_g * [L1 + perc](R(T_g), neutral) +
    w_combined * [L1 + perc](R(T_combined), I_t)."""
    idx = range(batch.i_s.shape[0]) if indices is None else indices
    l_g_terms, l_c_terms = [], []
    for i in idx:
        t_g, t_d, t_e = model.triplanes(batch.i_s[i], batch.i_e[i], batch.poses[i])
        r_g = model.render_low(t_g, batch.poses[i])[None]
        r_c = model.render_low(combine(t_g, t_d, t_e), batch.poses[i])[None]
        neu, tgt = batch.neutral[i][None], batch.i_t[i][None]
        l_g_terms.append((r_g - neu).abs().mean() + perceptual(r_g, neu))
        l_c_terms.append((r_c - tgt).abs().mean() + perceptual(r_c, tgt))
    l_g = torch.stack(l_g_terms).mean()
    l_c = torch.stack(l_c_terms).mean()
    total = weights.stage1_g * l_g + weights.stage1_combined * l_c
    return {"L_G": l_g, "L_Combined": l_c, "total": total}


def stage2_loss(model: AvatarModel, batch: AvatarBatch, weights: LossWeights,
                perceptual: PerceptualProxy,
                discriminator: MultiscaleDiscriminator | None = None,
                eye_windows=None, indices=None) -> dict:
    """Super-resolution fine-tuning loss; the low-res render is detached so
    gradients reach only SR parameters."""
    idx = range(batch.i_s.shape[0]) if indices is None else indices
    l1s, percs, gans, eyes = [], [], [], []
    zero = torch.zeros(())
    for i in idx:
        t_g, t_d, t_e = model.triplanes(batch.i_s[i], batch.i_e[i], batch.poses[i])
        low = model.render_low(combine(t_g, t_d, t_e), batch.poses[i])
        i_o = model.sr(low.detach()[None])
        i_t = batch.i_t[i][None]
        if i_t.shape[-1] != i_o.shape[-1]:
            i_t = F.interpolate(i_t, size=i_o.shape[-2:], mode="bilinear",
                                align_corners=False)
        l1s.append((i_o - i_t).abs().mean())
        percs.append(perceptual(i_o, i_t))
        if discriminator is not None:
            gans.append(torch.stack(
                [F.softplus(-m).mean() for m in discriminator(i_o)]).mean())
        if eye_windows is not None:
            sy, sx = eye_windows[i]
            eo, et = i_o[..., sy, sx], i_t[..., sy, sx]
            eyes.append((eo - et).abs().mean() + perceptual(eo, et))
    l1 = torch.stack(l1s).mean()
    perc = torch.stack(percs).mean()
    gan = torch.stack(gans).mean() if gans else zero
    eye = torch.stack(eyes).mean() if eyes else zero
    total = (weights.stage2_l1 * l1 + weights.stage2_lpips * perc
             + weights.stage2_gan * gan + weights.stage2_eye * eye)
    return {"l1": l1, "lpips": perc, "gan": gan, "eye": eye, "total": total}


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class AvatarTrainConfig:
    avatar: AvatarConfig = AvatarConfig()
    weights: LossWeights = LossWeights()
    learning_rate: float = 1e-4
    stage1_steps: int = 3000
    stage2_steps: int = 200
    batch_size: int = 2
    seed: int = 0
    perceptual_seed: int = 0
    use_gan_stage2: bool = False


def train_avatar(batch: AvatarBatch, config: AvatarTrainConfig,
                 checkpoint_path=None, progress=None):
    """Two-stage schedule: stage 1 fits branches + decoder at low resolution;
    stage 2 freezes them and fits the SR head. Deterministic per seed."""
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = AvatarModel(config.avatar)
    perceptual = PerceptualProxy(seed=config.perceptual_seed)
    disc = None
    if config.use_gan_stage2:
        from .restore2d import DiscriminatorConfig
        disc = MultiscaleDiscriminator(DiscriminatorConfig(n_scales=2, channels=8))
    n = batch.i_s.shape[0]
    history = []

    opt1 = torch.optim.Adam(model.stage1_parameters(), lr=config.learning_rate)
    for step in range(config.stage1_steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        losses = stage1_loss(model, batch, config.weights, perceptual, indices=idx)
        opt1.zero_grad()
        losses["total"].backward()
        opt1.step()
        history.append((step, "stage1_total", losses["total"].item()))
        history.append((step, "L_Combined", losses["L_Combined"].item()))
        if progress and (step + 1) % progress == 0:
            print(f"s1 {step + 1}: total={losses['total'].item():.4f} "
                  f"L_C={losses['L_Combined'].item():.4f}", flush=True)

    opt2 = torch.optim.Adam(model.sr.parameters(), lr=config.learning_rate)
    for step in range(config.stage2_steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        losses = stage2_loss(model, batch, config.weights, perceptual,
                             discriminator=disc, indices=idx)
        opt2.zero_grad()
        losses["total"].backward()
        opt2.step()
        history.append((config.stage1_steps + step, "stage2_total",
                        losses["total"].item()))
        if progress and (step + 1) % progress == 0:
            print(f"s2 {step + 1}: total={losses['total'].item():.4f}", flush=True)

    if checkpoint_path:
        save_checkpoint(checkpoint_path, model.modules())
    return model, history


# ---------------------------------------------------------------------------
# inference

def drive_avatar(model: AvatarModel, i_s: torch.Tensor, i_e: torch.Tensor,
                 pose: CameraPose, zero_detail=False, zero_expression=False):
    """End-to-end: branches -> combine -> volume render -> super-resolve."""
    with torch.no_grad():
        t_g, t_d, t_e = model.triplanes(i_s, i_e, pose, zero_detail, zero_expression)
        low = model.render_low(combine(t_g, t_d, t_e), pose)
        return model.sr(low[None])[0]


def export_turntable(model: AvatarModel, i_s, i_e, poses, out_dir):
    """Render the avatar at a sequence of poses to numbered PNGs."""
    from pathlib import Path
    from .imageops import save_png
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, pose in enumerate(poses):
        img = drive_avatar(model, i_s, i_e, pose)
        path = out_dir / f"frame_{i:04d}.png"
        save_png(to_image(img[None]), path)
        paths.append(path)
    return paths
