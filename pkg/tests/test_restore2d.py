import numpy as np
import pytest
import torch

from rav import restore2d as R
from rav.landmarks import LandmarkSet, eye_band_window
from rav.perceptual import PerceptualProxy
from rav.trainutil import params_hash


def small_cfg(res=16, attention=True):
    return R.GeneratorConfig(resolution=res, n_scales=2, channels=(8, 8),
                             heads=(2, 2), res_blocks=(1, 1),
                             use_cross_attention=attention)


@pytest.fixture(scope="module")
def gen16():
    torch.manual_seed(0)
    return R.RestorationGenerator(small_cfg())


def test_output_shape_and_range(gen16):
    torch.manual_seed(1)
    x = torch.rand(2, 3, 16, 16)
    z = torch.rand(2, 3, 16, 16)
    with torch.no_grad():
        out = gen16(x, z)
    assert out.shape == x.shape
    assert out.min() >= 0 and out.max() <= 1


def test_identity_at_init(gen16):
    # zero-init residual head: output reproduces the composite input
    torch.manual_seed(2)
    x = torch.rand(1, 3, 16, 16) * 0.8 + 0.1
    z = torch.rand(1, 3, 16, 16)
    with torch.no_grad():
        out = gen16(x, z)
    assert (out - x).abs().max() < 1e-6


def test_shape_mismatch_raises(gen16):
    with pytest.raises(Exception):
        gen16(torch.rand(1, 3, 16, 16), torch.rand(1, 3, 8, 8))


def test_attention_single_token():
    torch.manual_seed(3)
    attn = R.CrossAttention(8, 2)
    f_in = torch.rand(1, 8, 4, 4)
    f_ref = torch.rand(1, 8, 1, 1)
    w = attn.attention_weights(f_in, f_ref)
    assert w.shape == (1, 2, 16, 1)
    assert torch.allclose(w, torch.ones_like(w))


def test_attention_softmax_oracle():
    # 4-key toy case checked against an explicit numpy softmax
    torch.manual_seed(4)
    attn = R.CrossAttention(4, 1).double()
    f_in = torch.rand(1, 4, 2, 2, dtype=torch.float64)
    f_ref = torch.rand(1, 4, 2, 2, dtype=torch.float64)
    w = attn.attention_weights(f_in, f_ref).detach().numpy()[0, 0]
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)
    with torch.no_grad():
        q = attn.q(f_in).reshape(4, 4).T.numpy()   # tokens x channels
        k = attn.k(f_ref).reshape(4, 4).T.numpy()
    logits = (q / np.sqrt(4)) @ k.T
    expect = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    assert np.allclose(w, expect, atol=1e-6)


def test_discriminator_scales_and_margin():
    torch.manual_seed(5)
    cfg = R.DiscriminatorConfig(n_scales=3, channels=8)
    disc = R.MultiscaleDiscriminator(cfg)
    with torch.no_grad():
        maps = disc(torch.rand(1, 3, 64, 64))
    assert len(maps) == 3
    for s, m in enumerate(maps):
        n = 64 // 2 ** s
        expect = R.DiscriminatorConfig.logit_map_size(n)
        assert m.shape[-2:] == (expect, expect)


def test_discriminator_shift_equivariance():
    # moving a delta probe by one patch stride (4 px) shifts the logit map by 1
    torch.manual_seed(6)
    disc = R.PatchDiscriminator(8)
    a = torch.zeros(1, 3, 32, 32)
    b = torch.zeros(1, 3, 32, 32)
    a[0, :, 12, 12] = 1.0
    b[0, :, 16, 16] = 1.0
    with torch.no_grad():
        # subtract the zero-input response so the padding-induced frame cancels
        bg = disc(torch.zeros(1, 3, 32, 32))[0, 0]
        ma, mb = disc(a)[0, 0] - bg, disc(b)[0, 0] - bg
    assert torch.allclose(mb[2:7, 2:7], ma[1:6, 1:6], atol=1e-5)


@pytest.fixture(scope="module")
def proxy():
    return PerceptualProxy(seed=0)


def test_generator_loss_zero_terms_and_linearity(proxy):
    torch.manual_seed(7)
    y = torch.rand(2, 3, 16, 16)
    maps = [torch.randn(2, 1, 4, 4)]
    w = R.LossWeights(adv=1.0, l1=1.0, lpips=1.0)
    rec = R.generator_loss(y, y, maps, w, proxy)
    assert float(rec["l1"]) == 0.0
    assert float(rec["lpips"]) == pytest.approx(0.0, abs=1e-10)
    g_out = torch.rand(2, 3, 16, 16)
    rec = R.generator_loss(g_out, y, maps, w, proxy)
    total = float(rec["adv"]) + float(rec["l1"]) + float(rec["lpips"])
    assert float(rec["total"]) == pytest.approx(total, rel=1e-6)
    # weighted combination recomputed
    w2 = R.LossWeights(adv=0.1, l1=1.0, lpips=0.5)
    rec2 = R.generator_loss(g_out, y, maps, w2, proxy)
    expect = 0.1 * float(rec["adv"]) + float(rec["l1"]) + 0.5 * float(rec["lpips"])
    assert float(rec2["total"]) == pytest.approx(expect, rel=1e-6)


def test_discriminator_loss_logit_zero_closed_form():
    torch.manual_seed(8)
    disc = R.MultiscaleDiscriminator(R.DiscriminatorConfig(n_scales=2, channels=4))
    for p in disc.parameters():
        torch.nn.init.zeros_(p)
    y = torch.rand(1, 3, 32, 32)
    rec = R.discriminator_loss(disc, y, torch.rand(1, 3, 32, 32))
    for term in rec["per_scale"]:
        assert float(term) == pytest.approx(2 * np.log(2), rel=1e-6)
    assert float(rec["total"]) == pytest.approx(2 * np.log(2), rel=1e-6)


def test_discriminator_loss_perfect_saturation():
    class Stub:
        def __call__(self, img):
            logit = 30.0 if float(img.mean()) > 0.5 else -30.0
            return [torch.full((img.shape[0], 1, 4, 4), logit)]

    rec = R.discriminator_loss(Stub(), torch.ones(1, 3, 16, 16),
                               torch.zeros(1, 3, 16, 16))
    assert float(rec["total"]) <= 1e-3


def _fd_check(loss_fn, param, idx, eps=1e-5):
    loss = loss_fn()
    grad = torch.autograd.grad(loss, param)[0][idx].item()
    with torch.no_grad():
        orig = param[idx].item()
        param[idx] = orig + eps
        hi = loss_fn().item()
        param[idx] = orig - eps
        lo = loss_fn().item()
        param[idx] = orig
    fd = (hi - lo) / (2 * eps)
    assert abs(grad - fd) <= 1e-3 * max(abs(fd), 1e-6), (grad, fd)


def test_generator_loss_gradient_fd(proxy):
    torch.manual_seed(9)
    gen = R.RestorationGenerator(small_cfg()).double()
    disc = R.MultiscaleDiscriminator(
        R.DiscriminatorConfig(n_scales=2, channels=4)).double()
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    z = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    w = R.LossWeights()

    def loss_fn():
        out = gen(x, z)
        return R.generator_loss(out, y, disc(out), w, proxy)["total"]

    _fd_check(loss_fn, gen.enc_input.stem.weight, (0, 0, 1, 1))


def test_discriminator_loss_gradient_fd():
    torch.manual_seed(10)
    disc = R.MultiscaleDiscriminator(
        R.DiscriminatorConfig(n_scales=2, channels=4)).double()
    y = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    g_out = torch.rand(1, 3, 16, 16, dtype=torch.float64)

    def loss_fn():
        return R.discriminator_loss(disc, y, g_out)["total"]

    _fd_check(loss_fn, disc.discs[0].net[0].weight, (0, 0, 1, 1))


def _tiny_dataset(n=4, res=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return R.RestorationBatch(x=torch.rand(n, 3, res, res, generator=g),
                              z=torch.rand(n, 3, res, res, generator=g),
                              y=torch.rand(n, 3, res, res, generator=g))


def _tiny_config(steps, **kw):
    return R.RestoreTrainConfig(
        generator=small_cfg(), discriminator=R.DiscriminatorConfig(n_scales=2, channels=4),
        steps=steps, batch_size=2, seed=3, **kw)


def test_train_zero_steps_unchanged():
    gen, disc, history = train_result = R.train_restoration(_tiny_dataset(), _tiny_config(0))
    assert history == []
    torch.manual_seed(3)
    ref = R.RestorationGenerator(small_cfg())
    assert params_hash({"g": gen}) == params_hash({"g": ref})


def test_train_history_and_determinism():
    _, _, h1 = R.train_restoration(_tiny_dataset(), _tiny_config(3))
    _, _, h2 = R.train_restoration(_tiny_dataset(), _tiny_config(3))
    assert len(h1) == 6
    assert h1 == h2


def test_train_ablations_run():
    for kw in ({"use_reference": False}, {"saturating_adv": True},
               {"weights": R.LossWeights(lpips=0.0)}):
        R.train_restoration(_tiny_dataset(), _tiny_config(2, **kw))
    cfg = R.RestoreTrainConfig(generator=small_cfg(attention=False),
                               discriminator=R.DiscriminatorConfig(n_scales=2, channels=4),
                               steps=2, batch_size=2, seed=3)
    gen, _, _ = R.train_restoration(_tiny_dataset(), cfg)
    assert not gen.cfg.use_cross_attention


def test_batch_invariants():
    with pytest.raises(Exception):
        R.RestorationBatch(x=torch.rand(1, 3, 8, 8), z=torch.rand(1, 3, 8, 8),
                           y=torch.rand(1, 3, 16, 16))


@pytest.fixture
def lm64():
    return LandmarkSet(points={
        "left_eye_outer": (12.0, 24.0), "left_eye_inner": (26.0, 24.0),
        "right_eye_inner": (38.0, 24.0), "right_eye_outer": (52.0, 24.0),
        "left_iris": (19.0, 24.0), "right_iris": (45.0, 24.0),
        "nose_tip": (32.0, 36.0), "mouth_left": (24.0, 48.0),
        "mouth_right": (40.0, 48.0), "chin": (32.0, 58.0)})


def test_restore_pipeline(lm64):
    torch.manual_seed(11)
    gen = R.RestorationGenerator(
        R.GeneratorConfig(resolution=64, n_scales=2, channels=(8, 8),
                          heads=(2, 2), res_blocks=(1, 1)))
    rng = np.random.default_rng(0)
    dp = rng.uniform(0, 1, (64, 64, 3))
    eye = rng.uniform(0, 1, (16, 16))
    lower = rng.uniform(0, 1, (20, 32))
    out1 = R.restore(gen, eye, eye, lower, dp, lm64)
    out2 = R.restore(gen, eye, eye, lower, dp, lm64)
    assert out1.shape == dp.shape
    assert out1.min() >= 0 and out1.max() <= 1
    assert np.array_equal(out1, out2)


def test_crop_eye_region_matches_window(lm64):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (64, 64, 3))
    crop = R.crop_eye_region(img, lm64)
    win = eye_band_window(lm64, 64, 64)
    sy, sx = win.slices
    assert np.array_equal(crop, img[sy, sx])
