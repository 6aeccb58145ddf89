"""Reference-guided 2D full-face restoration GAN.

Generator: multi-scale input/reference encoders, per-scale cross-attention
fusion (queries from the composite input, keys/values from the reference),
residual processing and a skip-fused decoder emitting a bounded residual on
the composite input. Discriminator: PatchGAN instances over a pyramid of
average-pooled scales. Loss system: adversarial + L1 + perceptual with
configurable weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .landmarks import eye_band_window, paste_crops
from .perceptual import PerceptualProxy
from .trainutil import save_checkpoint, to_image, to_tensor

_LOGIT_EPS = 1e-4
_KV_MAX_TOKENS = 16  # keys/values pooled to at most 16x16 per scale


def _orthogonal_convs(module: torch.nn.Module) -> None:
    """Orthogonal init for conv weights, skipping deliberately zeroed ones."""
    for m in module.modules():
        if isinstance(m, torch.nn.Conv2d) and m.weight.abs().sum() > 0:
            torch.nn.init.orthogonal_(m.weight)


@dataclass(frozen=True)
class LossWeights:
    """All loss-combination coefficients (restoration and avatar stages)."""

    adv: float = 0.1
    l1: float = 1.0
    lpips: float = 0.5
    stage1_g: float = 1.0
    stage1_combined: float = 1.0
    stage2_l1: float = 1.0
    stage2_lpips: float = 0.5
    stage2_gan: float = 0.05
    stage2_eye: float = 1.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ContractViolation(f"loss weight {name} must be finite and >= 0")


@dataclass
class RestorationBatch:
    x: torch.Tensor  # composite input (DP with pasted crops)
    z: torch.Tensor  # reference DP
    y: torch.Tensor  # ground truth full face

    def __post_init__(self):
        if not (self.x.shape == self.z.shape == self.y.shape):
            raise ContractViolation("x, z, y must share shape")
        if self.x.shape[0] < 1:
            raise ContractViolation("batch must be non-empty")


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    n_scales: int = 3                 # scales H, H/2, H/4, ...
    channels: tuple = (16, 24, 32)    # per scale
    heads: tuple = (2, 2, 2)
    res_blocks: tuple = (1, 1, 1)
    use_cross_attention: bool = True

    def __post_init__(self):
        if len(self.channels) != self.n_scales or len(self.heads) != self.n_scales:
            raise ContractViolation("channels/heads must list one entry per scale")
        for c, h in zip(self.channels, self.heads):
            if c % h != 0:
                raise ContractViolation("channels must be divisible by heads")

    @property
    def scales(self):
        return tuple(self.resolution // 2 ** s for s in range(self.n_scales))


class CrossAttention(torch.nn.Module):
    """Multi-head scaled dot-product attention from input-feature queries to
    (pooled) reference-feature keys/values."""

    def __init__(self, channels, heads):
        super().__init__()
        self.heads = heads
        self.q = torch.nn.Conv2d(channels, channels, 1)
        self.k = torch.nn.Conv2d(channels, channels, 1)
        self.v = torch.nn.Conv2d(channels, channels, 1)
        self.out = torch.nn.Conv2d(channels, channels, 1)
        torch.nn.init.zeros_(self.out.weight)
        torch.nn.init.zeros_(self.out.bias)

    def attention_weights(self, f_in, f_ref):
        """B x heads x Nq x Nk softmax weights (sum to 1 over Nk)."""
        _, w = self._attend(f_in, f_ref)
        return w

    def _attend(self, f_in, f_ref):
        b, c, h, w = f_in.shape
        if max(f_ref.shape[-2:]) > _KV_MAX_TOKENS:
            stride = math.ceil(max(f_ref.shape[-2:]) / _KV_MAX_TOKENS)
            f_ref = F.avg_pool2d(f_ref, stride)
        q = self.q(f_in).reshape(b, self.heads, c // self.heads, h * w)
        k = self.k(f_ref).reshape(b, self.heads, c // self.heads, -1)
        v = self.v(f_ref).reshape(b, self.heads, c // self.heads, -1)
        scale = (c // self.heads) ** -0.5
        logits = torch.einsum("bhcq,bhck->bhqk", q * scale, k)
        weights = torch.softmax(logits, dim=-1)
        attended = torch.einsum("bhqk,bhck->bhcq", weights, v)
        return attended.reshape(b, c, h, w), weights

    def forward(self, f_in, f_ref):
        attended, _ = self._attend(f_in, f_ref)
        return f_in + self.out(attended)


class _ResBlock(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c1 = torch.nn.Conv2d(c, c, 3, padding=1)
        self.c2 = torch.nn.Conv2d(c, c, 3, padding=1)
        torch.nn.init.zeros_(self.c2.weight)
        torch.nn.init.zeros_(self.c2.bias)

    def forward(self, x):
        return x + self.c2(F.leaky_relu(self.c1(x), 0.2))


class _Encoder(torch.nn.Module):
    """Conv downsampling stack emitting one feature map per scale."""

    def __init__(self, cfg: GeneratorConfig, in_channels=3):
        super().__init__()
        self.stem = torch.nn.Conv2d(in_channels, cfg.channels[0], 3, padding=1)
        downs = []
        for s in range(1, cfg.n_scales):
            downs.append(torch.nn.Conv2d(cfg.channels[s - 1], cfg.channels[s],
                                         4, stride=2, padding=1))
        self.downs = torch.nn.ModuleList(downs)

    def forward(self, x):
        feats = [F.leaky_relu(self.stem(x), 0.2)]
        for down in self.downs:
            feats.append(F.leaky_relu(down(feats[-1]), 0.2))
        return feats


class RestorationGenerator(torch.nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.enc_input = _Encoder(cfg)
        self.enc_reference = _Encoder(cfg)
        if cfg.use_cross_attention:
            self.fusion = torch.nn.ModuleList(
                [CrossAttention(c, h) for c, h in zip(cfg.channels, cfg.heads)])
        else:
            # ablation: plain concatenation + 1x1 merge instead of attention
            self.fusion = torch.nn.ModuleList(
                [torch.nn.Conv2d(2 * c, c, 1) for c in cfg.channels])
        self.blocks = torch.nn.ModuleList([
            torch.nn.Sequential(*[_ResBlock(c) for _ in range(n)])
            for c, n in zip(cfg.channels, cfg.res_blocks)])
        ups = []
        for s in range(cfg.n_scales - 1, 0, -1):
            ups.append(torch.nn.Conv2d(cfg.channels[s], cfg.channels[s - 1], 3, padding=1))
        self.ups = torch.nn.ModuleList(ups)
        self.final = torch.nn.Conv2d(cfg.channels[0], 3, 3, padding=1)
        torch.nn.init.zeros_(self.final.weight)
        torch.nn.init.zeros_(self.final.bias)
        _orthogonal_convs(self)

    def fuse(self, s, f_in, f_ref):
        if self.cfg.use_cross_attention:
            return self.fusion[s](f_in, f_ref)
        return f_in + self.fusion[s](torch.cat([f_in, f_ref], dim=1))

    def forward(self, x, z):
        if x.shape != z.shape:
            raise ContractViolation("input and reference shapes differ")
        fi = self.enc_input(x)
        fr = self.enc_reference(z)
        fused = [self.blocks[s](self.fuse(s, fi[s], fr[s]))
                 for s in range(self.cfg.n_scales)]
        h = fused[-1]
        for i, up in enumerate(self.ups):
            s = self.cfg.n_scales - 2 - i
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = F.leaky_relu(up(h), 0.2) + fused[s]
        residual = self.final(h)
        # bounded output: logistic applied to logit(x) + residual, so a zero
        # residual reproduces the composite input
        base = torch.logit(torch.clamp(x, _LOGIT_EPS, 1 - _LOGIT_EPS))
        return torch.sigmoid(base + residual)


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_scales: int = 3
    channels: int = 16

    @staticmethod
    def logit_map_size(n: int) -> int:
        """Spatial size of the patch-logit map for an n x n input at one scale
        (two stride-2 k=4 p=1 convs then a same-size 3x3)."""
        return (n // 2) // 2


class PatchDiscriminator(torch.nn.Module):
    def __init__(self, channels, in_channels=3):
        super().__init__()
        c = channels
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(in_channels, c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(2 * c, 1, 3, padding=1),
        )
        _orthogonal_convs(self)

    def forward(self, x):
        return self.net(x)


class MultiscaleDiscriminator(torch.nn.Module):
    """One PatchGAN per scale; scale s sees the input average-pooled by 2^s."""

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        self.cfg = cfg
        self.discs = torch.nn.ModuleList(
            [PatchDiscriminator(cfg.channels) for _ in range(cfg.n_scales)])

    def forward(self, img):
        maps = []
        x = img
        for s, disc in enumerate(self.discs):
            if s > 0:
                x = F.avg_pool2d(x, 2)
            maps.append(disc(x))
        return maps


# ---------------------------------------------------------------------------
# losses

def generator_loss(g_out, y, d_logit_maps, weights: LossWeights,
                   perceptual: PerceptualProxy, saturating: bool = False) -> dict:
    """L_G = adv + L1 + perceptual with the declared weights.

    The default adversarial term is the non-saturating surrogate
    -E[log D(G)]; `saturating=True` selects the literal E[log(1 - D(G))].
    """
    if saturating:
        adv = torch.stack([(-F.softplus(m)).mean() for m in d_logit_maps]).mean()
    else:
        adv = torch.stack([F.softplus(-m).mean() for m in d_logit_maps]).mean()
    l1 = (g_out - y).abs().mean()
    lpips = perceptual(g_out, y)
    total = weights.adv * adv + weights.l1 * l1 + weights.lpips * lpips
    return {"adv": adv, "l1": l1, "lpips": lpips, "total": total}


def discriminator_loss(discriminator: MultiscaleDiscriminator, y, g_out) -> dict:
    """-E[log D(y)] - E[log(1 - D(G))], averaged over scales; numerically
    stable logit formulation."""
    real_maps = discriminator(y)
    fake_maps = discriminator(g_out)
    per_scale = [F.softplus(-r).mean() + F.softplus(f).mean()
                 for r, f in zip(real_maps, fake_maps)]
    total = torch.stack(per_scale).mean()
    return {"per_scale": per_scale, "total": total}


# ---------------------------------------------------------------------------
# training

@dataclass(frozen=True)
class RestoreTrainConfig:
    generator: GeneratorConfig = GeneratorConfig()
    discriminator: DiscriminatorConfig = DiscriminatorConfig()
    weights: LossWeights = LossWeights()
    learning_rate: float = 1e-4
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    p_swap: float = 0.5          # probability the reference is another identity's DP
    use_reference: bool = True   # ablation: zeroed reference when False
    saturating_adv: bool = False
    perceptual_seed: int = 0


def train_restoration(dataset: RestorationBatch, config: RestoreTrainConfig,
                      checkpoint_path=None, progress=None):
    """Alternating G/D optimization over the in-memory dataset.

    dataset.z holds each sample's own DP; with probability p_swap a step draws
    the reference from a different sample instead. Returns (generator,
    discriminator, history) with two history rows per step.
    """
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    gen = RestorationGenerator(config.generator)
    disc = MultiscaleDiscriminator(config.discriminator)
    perceptual = PerceptualProxy(seed=config.perceptual_seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate)
    n = dataset.x.shape[0]
    history = []
    for step in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        x, y = dataset.x[idx], dataset.y[idx]
        ref_idx = idx.copy()
        swap = rng.random(len(idx)) < config.p_swap
        ref_idx[swap] = rng.integers(0, n, size=int(swap.sum()))
        z = dataset.z[ref_idx]
        if not config.use_reference:
            z = torch.zeros_like(z)

        g_out = gen(x, z)
        g_losses = generator_loss(g_out, y, disc(g_out), config.weights,
                                  perceptual, config.saturating_adv)
        opt_g.zero_grad()
        g_losses["total"].backward()
        opt_g.step()

        d_losses = discriminator_loss(disc, y, g_out.detach())
        opt_d.zero_grad()
        d_losses["total"].backward()
        opt_d.step()

        history.append((step, "g_total", float(g_losses["total"].detach())))
        history.append((step, "d_total", float(d_losses["total"].detach())))
        if progress and (step + 1) % progress == 0:
            print(f"step {step + 1}: g={float(g_losses['total']):.4f} "
                  f"l1={float(g_losses['l1']):.4f} d={float(d_losses['total']):.4f}")
    if checkpoint_path:
        save_checkpoint(checkpoint_path, {"generator": gen, "discriminator": disc})
    return gen, disc, history


# ---------------------------------------------------------------------------
# inference

def restore(gen: RestorationGenerator, eye_left: np.ndarray, eye_right: np.ndarray,
            lower: np.ndarray, dp: np.ndarray, lm, feather_px: int = 4) -> np.ndarray:
    """Full pipeline: composite x via paste_crops, reference z = dp, G(x, z)."""
    x = paste_crops(dp, eye_left, eye_right, lower, lm, feather_px=feather_px)
    with torch.no_grad():
        out = gen(to_tensor(x), to_tensor(dp))
    return to_image(out)


def crop_eye_region(img: np.ndarray, lm) -> np.ndarray:
    """Landmark-defined band covering both eyes plus margin."""
    H, W = img.shape[:2]
    win = eye_band_window(lm, H, W)
    sy, sx = win.slices
    return img[sy, sx].copy()
