"""Frontalization of tilted eye and lower-face crops.

Three model slots (CG_LE, CG_RE, CG_Face), each a pair of generators with
cycle consistency plus per-domain discriminators (least-squares adversarial
objective). Generators are residual encoder-decoders with an optional global
spatial-mixing layer (needed to represent large in-plane rotations) and an
identity-friendly initialization mode where zeroed final layers make the
untrained generator the identity map.

Also provides the gaze-error metric: iris location by dark-blob centroid,
offsets mapped linearly to angles, error = angle between 3D gaze vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractViolation
from .trainutil import save_checkpoint, load_checkpoint

SLOTS = ("CG_LE", "CG_RE", "CG_Face")

DEFAULT_CALIBRATION_DEG = 30.0  # gaze angle at full normalized iris offset


class IrisNotFound(RuntimeError):
    """No dark blob detectable inside the eye bounding box."""


@dataclass(frozen=True)
class AlignConfig:
    resolution: int = 32
    channels: int = 16
    n_residual_blocks: int = 2
    spatial_mix: bool = True
    identity_init: bool = True
    lambda_adv: float = 1.0
    lambda_cyc: float = 10.0
    lambda_identity: float = 0.0
    lambda_pair: float = 0.0  # paired L1 pinning term for held-in pairs
    learning_rate: float = 1e-4   # training default per the usual Adam setup
    batch_size: int = 8
    seed: int = 0


class _ResBlock(torch.nn.Module):
    def __init__(self, c, zero_init):
        super().__init__()
        self.c1 = torch.nn.Conv2d(c, c, 3, padding=1)
        self.c2 = torch.nn.Conv2d(c, c, 3, padding=1)
        if zero_init:
            torch.nn.init.zeros_(self.c2.weight)
            torch.nn.init.zeros_(self.c2.bias)

    def forward(self, x):
        return x + self.c2(F.leaky_relu(self.c1(x), 0.2))


class SpatialMix(torch.nn.Module):
    """Residual per-channel linear mixing over flattened spatial positions.

    Gives the generator a global receptive field so it can represent in-plane
    rotations; zero-initialized so it starts as the identity.
    """

    def __init__(self, resolution):
        super().__init__()
        n = resolution * resolution
        self.mix = torch.nn.Linear(n, n, bias=False)
        torch.nn.init.zeros_(self.mix.weight)

    def forward(self, x):
        b, c, h, w = x.shape
        flat = x.reshape(b, c, h * w)
        return x + self.mix(flat).reshape(b, c, h, w)


class AlignGenerator(torch.nn.Module):
    def __init__(self, cfg: AlignConfig, in_channels: int = 1):
        super().__init__()
        c = cfg.channels
        self.inp = torch.nn.Conv2d(in_channels, c, 3, padding=1)
        self.mix = SpatialMix(cfg.resolution) if cfg.spatial_mix else torch.nn.Identity()
        self.blocks = torch.nn.ModuleList(
            [_ResBlock(c, zero_init=cfg.identity_init) for _ in range(cfg.n_residual_blocks)])
        self.out = torch.nn.Conv2d(c, in_channels, 3, padding=1)
        if cfg.identity_init:
            torch.nn.init.zeros_(self.out.weight)
            torch.nn.init.zeros_(self.out.bias)

    def forward(self, x):
        h = F.leaky_relu(self.inp(x), 0.2)
        h = self.mix(h)
        for blk in self.blocks:
            h = blk(h)
        return torch.clamp(x + self.out(h), 0.0, 1.0)


class AlignDiscriminator(torch.nn.Module):
    def __init__(self, cfg: AlignConfig, in_channels: int = 1):
        super().__init__()
        c = cfg.channels
        self.net = torch.nn.Sequential(
            torch.nn.Conv2d(in_channels, c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            torch.nn.LeakyReLU(0.2),
            torch.nn.Conv2d(2 * c, 1, 3, padding=1),
        )

    def forward(self, x):
        return self.net(x)


class AlignmentSlot:
    """One frontalization model: generators A<->B and per-domain discriminators."""

    def __init__(self, cfg: AlignConfig, in_channels: int = 1):
        self.cfg = cfg
        self.g_ab = AlignGenerator(cfg, in_channels)
        self.g_ba = AlignGenerator(cfg, in_channels)
        self.d_a = AlignDiscriminator(cfg, in_channels)
        self.d_b = AlignDiscriminator(cfg, in_channels)

    def modules(self):
        return {"g_ab": self.g_ab, "g_ba": self.g_ba, "d_a": self.d_a, "d_b": self.d_b}

    def to(self, dtype):
        for m in self.modules().values():
            m.to(dtype)
        return self


class AlignmentModelSet:
    def __init__(self, cfg: AlignConfig, lower_face_resolution: int | None = None):
        self.cfg = cfg
        self.slots = {}
        for name in SLOTS:
            slot_cfg = cfg
            if name == "CG_Face" and lower_face_resolution:
                slot_cfg = replace(cfg, resolution=lower_face_resolution)
            self.slots[name] = AlignmentSlot(slot_cfg)

    def save(self, path):
        mods = {}
        for name, slot in self.slots.items():
            for k, m in slot.modules().items():
                mods[f"{name}.{k}"] = m
        save_checkpoint(path, mods)

    def load(self, path):
        mods = {}
        for name, slot in self.slots.items():
            for k, m in slot.modules().items():
                mods[f"{name}.{k}"] = m
        load_checkpoint(path, mods)


def align(slot: AlignmentSlot, tilted: torch.Tensor) -> torch.Tensor:
    """Frontalize a batch (B x C x H x W in [0, 1]); deterministic at inference."""
    if tilted.shape[-1] != slot.cfg.resolution or tilted.shape[-2] != slot.cfg.resolution:
        raise ContractViolation(
            f"crop shape {tuple(tilted.shape[-2:])} does not match training "
            f"resolution {slot.cfg.resolution}")
    with torch.no_grad():
        return slot.g_ab(tilted)


def cycle_losses(slot: AlignmentSlot, batch_a: torch.Tensor, batch_b: torch.Tensor,
                 lambda_adv=None, lambda_cyc=None, lambda_identity=None,
                 lambda_pair=None) -> dict:
    """Generator-side loss record (tensors; differentiable).

    adv terms use the least-squares form; cyc is the bidirectional L1
    round-trip; total is the declared linear combination. When lambda_pair is
    nonzero, batch_a and batch_b are treated as index-aligned pairs and a
    direct L1 pinning term is added (used for overfit runs on held-in pairs).
    """
    cfg = slot.cfg
    l_adv = cfg.lambda_adv if lambda_adv is None else lambda_adv
    l_cyc = cfg.lambda_cyc if lambda_cyc is None else lambda_cyc
    l_id = cfg.lambda_identity if lambda_identity is None else lambda_identity
    l_pair = cfg.lambda_pair if lambda_pair is None else lambda_pair
    fake_b = slot.g_ab(batch_a)
    fake_a = slot.g_ba(batch_b)
    adv_a = ((slot.d_b(fake_b) - 1.0) ** 2).mean()
    adv_b = ((slot.d_a(fake_a) - 1.0) ** 2).mean()
    cyc = (slot.g_ba(fake_b) - batch_a).abs().mean() + (slot.g_ab(fake_a) - batch_b).abs().mean()
    if l_id != 0.0:
        identity = (slot.g_ab(batch_b) - batch_b).abs().mean() + \
                   (slot.g_ba(batch_a) - batch_a).abs().mean()
    else:
        identity = torch.zeros((), dtype=batch_a.dtype)
    if l_pair != 0.0:
        pair = (fake_b - batch_b).abs().mean() + (fake_a - batch_a).abs().mean()
    else:
        pair = torch.zeros((), dtype=batch_a.dtype)
    total = l_adv * (adv_a + adv_b) + l_cyc * cyc + l_id * identity + l_pair * pair
    return {"adv_A": adv_a, "adv_B": adv_b, "cyc": cyc, "identity": identity,
            "pair": pair, "total": total}


def discriminator_losses(slot: AlignmentSlot, batch_a, batch_b) -> dict:
    fake_b = slot.g_ab(batch_a).detach()
    fake_a = slot.g_ba(batch_b).detach()
    d_a = ((slot.d_a(batch_a) - 1.0) ** 2).mean() + (slot.d_a(fake_a) ** 2).mean()
    d_b = ((slot.d_b(batch_b) - 1.0) ** 2).mean() + (slot.d_b(fake_b) ** 2).mean()
    return {"d_A": d_a, "d_B": d_b, "total": d_a + d_b}


def train_alignment(slot: AlignmentSlot, dataset: dict, steps: int,
                    config: AlignConfig | None = None, checkpoint_path=None,
                    checkpoint_every: int = 0, paired: bool = False):
    """Alternating generator/discriminator Adam steps; deterministic per seed.

    dataset: {"A": N x C x H x W tensor, "B": ...}. With paired=True both
    domains are sampled with the same indices (required when lambda_pair is
    active). Returns loss history rows (step, term, value).
    """
    cfg = config or slot.cfg
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen_params = list(slot.g_ab.parameters()) + list(slot.g_ba.parameters())
    dis_params = list(slot.d_a.parameters()) + list(slot.d_b.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=cfg.learning_rate)
    opt_d = torch.optim.Adam(dis_params, lr=cfg.learning_rate)
    history = []
    a_all, b_all = dataset["A"], dataset["B"]
    for step in range(steps):
        ia = rng.integers(0, a_all.shape[0], size=min(cfg.batch_size, a_all.shape[0]))
        ib = ia if paired else rng.integers(0, b_all.shape[0],
                                            size=min(cfg.batch_size, b_all.shape[0]))
        batch_a, batch_b = a_all[ia], b_all[ib]

        losses = cycle_losses(slot, batch_a, batch_b)
        opt_g.zero_grad()
        losses["total"].backward()
        opt_g.step()

        d_losses = discriminator_losses(slot, batch_a, batch_b)
        opt_d.zero_grad()
        d_losses["total"].backward()
        opt_d.step()

        history.append((step, "g_total", losses["total"].item()))
        history.append((step, "cyc", losses["cyc"].item()))
        history.append((step, "d_total", d_losses["total"].item()))
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, slot.modules())
    if checkpoint_path:
        save_checkpoint(checkpoint_path, slot.modules())
    return history


def train_autoencoder_alignment(slot: AlignmentSlot, dataset: dict, steps: int,
                                config: AlignConfig | None = None):
    """Ablation variant: g_ab trained with L1 against paired frontal targets."""
    cfg = config or slot.cfg
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(slot.g_ab.parameters(), lr=cfg.learning_rate)
    history = []
    a_all, b_all = dataset["A"], dataset["B"]
    for step in range(steps):
        idx = rng.integers(0, a_all.shape[0], size=min(cfg.batch_size, a_all.shape[0]))
        loss = (slot.g_ab(a_all[idx]) - b_all[idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append((step, "ae_l1", loss.item()))
    return history


# ---------------------------------------------------------------------------
# gaze estimation

def estimate_gaze(eye_img: np.ndarray, bbox=None,
                  calibration_deg: float = DEFAULT_CALIBRATION_DEG):
    """(yaw, pitch) degrees from the dark-blob iris centroid offset.

    bbox = (x0, y0, x1, y1) eye-landmark bounding box; defaults to the full
    image. The offset from the box center is normalized by the half-width /
    half-height and scaled by the calibration constant.
    """
    img = np.asarray(eye_img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    h, w = img.shape
    x0, y0, x1, y1 = bbox if bbox is not None else (0, 0, w, h)
    roi = img[int(y0):int(y1), int(x0):int(x1)]
    vmin, vmax = roi.min(), roi.max()
    if vmax - vmin < 0.05:
        raise IrisNotFound("image has no contrast; iris not detectable")
    thresh = vmin + 0.25 * (vmax - vmin)
    weight = np.maximum(thresh - roi, 0.0)
    if weight.sum() <= 0:
        raise IrisNotFound("no dark blob below threshold")
    ys, xs = np.mgrid[0:roi.shape[0], 0:roi.shape[1]]
    cy = (ys * weight).sum() / weight.sum()
    cx = (xs * weight).sum() / weight.sum()
    ctr_y, ctr_x = (roi.shape[0] - 1) / 2.0, (roi.shape[1] - 1) / 2.0
    dx = (cx - ctr_x) / max(roi.shape[1] / 2.0, 1e-9)
    dy = (cy - ctr_y) / max(roi.shape[0] / 2.0, 1e-9)
    return calibration_deg * dx, -calibration_deg * dy


def _gaze_vector(yaw_deg, pitch_deg):
    y, p = math.radians(yaw_deg), math.radians(pitch_deg)
    return np.array([math.sin(y) * math.cos(p), math.sin(p), math.cos(y) * math.cos(p)])


def gaze_error(aligned: np.ndarray, truth, bbox=None,
               calibration_deg: float = DEFAULT_CALIBRATION_DEG) -> float:
    """Angular difference (degrees) between gaze directions.

    `truth` is either a reference eye image (gaze estimated the same way) or
    an explicit (yaw, pitch) tuple in degrees.
    """
    g1 = estimate_gaze(aligned, bbox, calibration_deg)
    if isinstance(truth, np.ndarray) and truth.ndim >= 2:
        g2 = estimate_gaze(truth, bbox, calibration_deg)
    else:
        g2 = tuple(truth)
    v1, v2 = _gaze_vector(*g1), _gaze_vector(*g2)
    cos = float(np.clip(v1 @ v2, -1.0, 1.0))
    return math.degrees(math.acos(cos))


# ---------------------------------------------------------------------------
# parametric toy eye renderer (shared by tests and the toy training domain)

def render_synthetic_eye(resolution: int, gaze_yaw: float, gaze_pitch: float,
                         calibration_deg: float = DEFAULT_CALIBRATION_DEG,
                         brow: bool = True) -> np.ndarray:
    """Frontal eye: bright sclera ellipse, dark iris disk at the gaze offset,
    and a horizontal brow bar that makes the orientation unambiguous."""
    n = resolution
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    cy = cx = (n - 1) / 2.0
    img = np.full((n, n), 0.55)
    sclera = (((xs - cx) / (0.42 * n)) ** 2 + ((ys - cy) / (0.26 * n)) ** 2) <= 1.0
    img[sclera] = 0.95
    ix = cx + (gaze_yaw / calibration_deg) * (n / 2.0)
    iy = cy - (gaze_pitch / calibration_deg) * (n / 2.0)
    iris = ((xs - ix) ** 2 + (ys - iy) ** 2) <= (0.12 * n) ** 2
    img[iris & sclera] = 0.08
    if brow:
        # kept above the dark-blob threshold so it never pollutes iris detection
        bar = (np.abs(ys - 0.12 * n) < 0.05 * n) & (np.abs(xs - cx) < 0.38 * n)
        img[bar] = 0.40
    return img


def make_toy_rotation_dataset(n: int, resolution: int, seed: int,
                              max_gaze: float = 6.0) -> dict:
    """Paired toy domain: B = frontal synthetic eyes, A = 90 deg rotations.

    Returns {"A", "B", "gaze"}; A[i] is the rotated version of B[i], so the
    pairing can supervise the autoencoder variant and ground-truth checks
    while CycleGAN training uses the two sets unpaired. max_gaze is capped so
    the iris disk stays fully inside the sclera ellipse; a clipped disk
    biases the blob-centroid gaze estimate.
    """
    if max_gaze > 8.0:
        raise ContractViolation("max_gaze above 8 deg clips the iris disk")
    rng = np.random.default_rng(seed)
    frontal, tilted, gazes = [], [], []
    for _ in range(n):
        gy = rng.uniform(-max_gaze, max_gaze)
        gp = rng.uniform(-max_gaze, max_gaze)
        img = render_synthetic_eye(resolution, gy, gp)
        frontal.append(img)
        tilted.append(np.rot90(img).copy())
        gazes.append((gy, gp))
    to_t = lambda lst: torch.from_numpy(np.stack(lst)[:, None]).float()
    return {"A": to_t(tilted), "B": to_t(frontal), "gaze": gazes}
