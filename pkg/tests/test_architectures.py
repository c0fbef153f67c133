import math

import numpy as np
import pytest
import torch

from modmed import losses as L
from modmed.architectures import (
    AutoEncoder,
    BaseModel,
    DiffusionModel,
    NoiseSchedule,
    SegmentationModel,
    combine_stages,
    ddim_sample,
    ddim_timesteps,
    ddpm_forward_noising,
    ddpm_loss,
    ddpm_sample,
    ensemble_generate,
    h_model_loss,
    pyramid_loss,
    scale_to,
)
from modmed.codec import EncoderSpec

from conftest import randomize_


def tiny(backbone="conv", rank=2, **kw):
    kw.setdefault("channels", 4)
    kw.setdefault("num_down", 1)
    kw.setdefault("num_middle", 1)
    kw.setdefault("num_final", 0)
    kw.setdefault("window", 4)
    kw.setdefault("d_state", 4)
    kw.setdefault("head_dim", 4)
    return EncoderSpec(backbone=backbone, rank=rank, **kw)


def linear_schedule_oracle(T=1000, b0=1e-4, b1=0.02):
    """Closed-form cumulative product of (1 - variance) in plain numpy."""
    var = np.linspace(b0, b1, T)
    ab = np.cumprod(1 - var)
    return np.sqrt(ab), np.sqrt(1 - ab)


# ---------------------------------------------------------------- schedule


def test_schedule_invariants():
    s = NoiseSchedule.linear()
    assert s.T == 1000
    assert (s.alpha ** 2 + s.beta ** 2 - 1).abs().max() <= 1e-6
    assert torch.all(torch.diff(s.alpha) <= 0)
    assert abs(float(s.alpha[0]) - 1) <= 1e-3
    assert abs(float(s.alpha[-1])) <= 1e-2
    a, b = linear_schedule_oracle()
    np.testing.assert_allclose(s.alpha.numpy(), a, rtol=1e-12)
    np.testing.assert_allclose(s.beta.numpy(), b, rtol=1e-12)
    with pytest.raises(ValueError, match="non-increasing"):
        NoiseSchedule(torch.tensor([0.5, 0.9]), torch.tensor([0.8, 0.4]))


def test_forward_noising():
    s = NoiseSchedule.linear()
    x, eps = torch.randn(2, 1, 4, 4), torch.randn(2, 1, 4, 4)
    torch.testing.assert_close(ddpm_forward_noising(x, 0, eps, s), x * float(s.alpha[0]) + float(s.beta[0]) * eps)
    assert float(s.beta[0]) < 0.011
    zero = NoiseSchedule(torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))
    assert torch.equal(ddpm_forward_noising(x, 1, eps, zero), eps)
    ts = torch.tensor([0, 999])
    out = ddpm_forward_noising(x, ts, eps, s)
    torch.testing.assert_close(out[1], float(s.alpha[999]) * x[1] + float(s.beta[999]) * eps[1])
    with pytest.raises(ValueError, match="out of range"):
        ddpm_forward_noising(x, 1000, eps, s)


def test_forward_noising_monte_carlo_variance():
    s = NoiseSchedule.linear()
    g = torch.Generator().manual_seed(0)
    for t in (10, 300, 999):
        eps = torch.randn(10_000, generator=g, dtype=torch.float64)
        xt = ddpm_forward_noising(torch.zeros(10_000, dtype=torch.float64), t, eps, s)
        assert abs(float(xt.var()) / float(s.beta[t]) ** 2 - 1) <= 0.05


# ---------------------------------------------------------------- scale_to / pyramid


def test_scale_to_examples():
    x = torch.randn(1, 2, 4, 4)
    assert scale_to(x, (4, 4)) is x
    c = torch.full((1, 1, 3, 5), 2.5)
    torch.testing.assert_close(scale_to(c, (7, 9)), torch.full((1, 1, 7, 9), 2.5))
    labels = torch.tensor([[[1, 2], [3, 4]]])
    assert scale_to(labels, (4, 4)).tolist() == [[[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]]
    assert scale_to(labels, (4, 4)).dtype == labels.dtype
    assert scale_to(torch.rand(1, 1, 2, 2, 2), (4, 4, 4)).shape == (1, 1, 4, 4, 4)


def test_pyramid_single_stage_equals_base_loss():
    target = torch.rand(2, 1, 4, 4)
    pred = torch.rand(2, 1, 4, 4)
    assert torch.equal(pyramid_loss(target, [pred], L.mse_loss), L.mse_loss(pred, target))
    with pytest.raises(ValueError, match="at least one"):
        pyramid_loss(target, [], L.mse_loss)


def test_pyramid_two_stage_hand_computed():
    target = torch.arange(16.0).view(1, 1, 4, 4)
    coarse = torch.tensor([[[[1.0, 2.0], [9.0, 11.0]]]])
    fine = torch.ones(1, 1, 4, 4)
    # bilinear halving without corner alignment averages each 2x2 block
    down = [[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4], [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]]
    coarse_mse = sum((coarse[0, 0, i, j].item() - down[i][j]) ** 2 for i in range(2) for j in range(2)) / 4
    fine_mse = sum((1.0 - v) ** 2 for v in range(16)) / 16
    expected = (coarse_mse + fine_mse) / 2
    assert pyramid_loss(target, [coarse, fine], L.mse_loss).item() == pytest.approx(expected, rel=1e-6)


def test_h_model_loss_zero_weight_exact():
    target = torch.randint(0, 2, (2, 8, 8))
    out = torch.randn(2, 2, 8, 8)
    preds = [torch.randn(2, 2, 4, 4), torch.randn(2, 2, 8, 8)]
    base = L.segmentation_loss
    assert torch.equal(h_model_loss(out, target, preds, base, weight=0.0), base(out, target))


def test_combine_stages_stacks_copies():
    f = torch.randn(1, 3, 4, 4)
    zero = torch.zeros(3)
    assert torch.equal(combine_stages([f, f, f], [zero] * 3), torch.cat([f, f, f], 1))
    with pytest.raises(ValueError, match="position encodings"):
        combine_stages([f], [zero, zero])


# ---------------------------------------------------------------- base model


def test_base_without_context_is_plain_codec():
    m = BaseModel(tiny(), 2).eval()
    x = torch.randn(2, 1, 8, 8)
    assert torch.equal(m(x), m.decoder(m.encoder(x)))
    with pytest.raises(ValueError, match="without time"):
        m(x, t=torch.tensor([1, 2]))


def test_time_context_changes_output():
    m = BaseModel(tiny(), 1, time_embedding=True).eval()
    randomize_(m, 0.2)
    x = torch.randn(2, 1, 8, 8)
    assert not torch.allclose(m(x, t=torch.tensor([0, 0])), m(x, t=torch.tensor([500, 500])))
    assert m.ctx_dim == 16


def test_condition_paths():
    m = BaseModel(tiny(), 1, cond_channels=1).eval()
    randomize_(m, 0.2)
    x = torch.randn(1, 1, 8, 8)
    c = torch.randn(1, 1, 8, 8)
    assert not torch.allclose(m(x), m(x, cond=c))
    with pytest.raises(ValueError, match="condition"):
        BaseModel(tiny(), 1)(x, cond=c)


@pytest.mark.parametrize("backbone", ["conv", "swin", "mamba"])
def test_hierarchical_output_shape_matches(backbone):
    x = torch.randn(2, 1, 16, 16)
    plain = BaseModel(tiny(backbone), 3)
    h = BaseModel(tiny(backbone), 3, hierarchical=True)
    out = h.run(x)
    assert out.output.shape == plain(x).shape == (2, 3, 16, 16)
    assert len(out.pyramid.predictions) == h.num_stages == 2
    assert [p.shape[2] for p in out.pyramid.predictions] == [8, 16] if backbone == "conv" else [2, 4]


def test_hierarchical_single_stage_degenerates():
    m = BaseModel(tiny(num_down=0), 2, hierarchical=True).eval()
    x = torch.randn(1, 1, 8, 8)
    out = m.run(x)
    f = out.pyramid.features[0]
    p = m.position_encodings[0].view(1, -1, 1, 1)
    assert torch.equal(out.output, m.combine(f + p))


def test_stage_count_mismatch():
    m = BaseModel(tiny(), 2, hierarchical=True)
    del m.stage_blocks[0]
    with pytest.raises(ValueError, match="prediction heads"):
        m(torch.randn(1, 1, 8, 8))


def _fd_check(loss_fn, param, eps=1e-6, tol=1e-3):
    loss = loss_fn()
    (grad,) = torch.autograd.grad(loss, param)
    worst = 0.0
    with torch.no_grad():
        for i in range(param.numel()):
            orig = param.view(-1)[i].item()
            param.view(-1)[i] = orig + eps
            up = loss_fn().item()
            param.view(-1)[i] = orig - eps
            down = loss_fn().item()
            param.view(-1)[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - grad.view(-1)[i].item()) / max(abs(fd), 1e-8))
    assert worst <= tol


def test_position_encoding_gradients_finite_differences():
    torch.manual_seed(3)
    base = BaseModel(tiny(channels=2), 2, hierarchical=True).double()
    model = SegmentationModel(base, pyramid_weight=0.7)
    batch = {"image": torch.rand(1, 1, 4, 4, dtype=torch.float64), "target": torch.randint(0, 2, (1, 4, 4))}
    for p in base.position_encodings:
        _fd_check(lambda: model.loss(batch), p)


def test_pyramid_weight_gradient_finite_differences():
    torch.manual_seed(4)
    base = BaseModel(tiny(channels=2), 1, hierarchical=True).double()
    x = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    with torch.no_grad():
        out = base.run(x)
    lam = torch.tensor([0.5], dtype=torch.float64, requires_grad=True)
    fn = lambda: h_model_loss(out.output, x, out.pyramid.predictions, L.mse_loss, lam[0])
    _fd_check(fn, lam)
    # d loss / d lambda is the pyramid term itself
    (g,) = torch.autograd.grad(fn(), lam)
    assert g.item() == pytest.approx(pyramid_loss(x, out.pyramid.predictions, L.mse_loss).item(), rel=1e-12)


def test_segmentation_zero_pyramid_weight_exact():
    base = BaseModel(tiny(), 2, hierarchical=True)
    model = SegmentationModel(base, pyramid_weight=0.0)
    batch = {"image": torch.rand(2, 1, 8, 8), "target": torch.randint(0, 2, (2, 8, 8))}
    out = base.run(batch["image"])
    torch.manual_seed(0)
    assert torch.equal(model._hierarchical(out, batch["target"], model.base_loss),
                       L.segmentation_loss(out.output, batch["target"]))


def test_segmentation_loss_and_metrics():
    model = SegmentationModel(BaseModel(tiny(), 3))
    batch = {"image": torch.rand(2, 1, 8, 8), "target": torch.randint(0, 3, (2, 8, 8))}
    assert model.loss(batch).item() > 0
    pred = model.predict(batch)
    assert pred.shape == (2, 8, 8)
    m = model.metrics(batch["target"], batch)
    assert m == {"dice": 1.0, "miou": 1.0}


def test_vae_latent_sampling():
    base = BaseModel(tiny(), 1, variational=True)
    ae = AutoEncoder(base)
    x = torch.rand(2, 1, 8, 8)
    base.eval()
    assert torch.equal(base(x), base(x))
    out = base.run(x, sample_latent=True)
    assert out.latent.mean.shape == out.latent.logvar.shape
    assert not torch.equal(out.output, base(x))
    base.train()
    loss = ae.loss({"image": x})
    loss.backward()
    assert base.latent_stats.weight.grad is not None
    assert torch.isfinite(loss)


def test_autoencoder_targets():
    ae = AutoEncoder(BaseModel(tiny(), 1), recon="l1")
    x = torch.rand(1, 1, 8, 8)
    assert AutoEncoder._target({"image": x, "target": torch.zeros(1, 8, 8, dtype=torch.long)}) is x
    y = torch.rand(1, 1, 8, 8)
    assert AutoEncoder._target({"image": x, "target": y}) is y
    assert ae.loss({"image": x, "target": y}).item() >= 0
    with pytest.raises(ValueError, match="mse"):
        AutoEncoder(BaseModel(tiny(), 1), recon="huber")


# ---------------------------------------------------------------- diffusion


class OracleEps(torch.nn.Module):
    """Exact noise predictor for a dataset holding the single image ``x0``."""

    def __init__(self, x0, schedule):
        super().__init__()
        self.x0 = x0
        self.alpha = torch.as_tensor(linear_schedule_oracle(schedule.T)[0])
        self.beta = torch.as_tensor(linear_schedule_oracle(schedule.T)[1])

    def forward(self, x_t, cond=None, t=None, label=None):
        a = self.alpha[t].view(-1, 1, 1, 1).to(x_t)
        b = self.beta[t].view(-1, 1, 1, 1).to(x_t)
        return (x_t - a * self.x0) / b


def test_ddpm_loss_oracle_and_zero_models():
    s = NoiseSchedule.linear()
    x = torch.rand(4, 1, 8, 8, dtype=torch.float64)
    oracle = OracleEps(x, s)

    class Truth(torch.nn.Module):
        def forward(self, x_t, cond=None, t=None, label=None):
            a = oracle.alpha[t].view(-1, 1, 1, 1)
            b = oracle.beta[t].view(-1, 1, 1, 1)
            return (x_t - a * x) / b

    g = torch.Generator().manual_seed(0)
    assert ddpm_loss(Truth(), x, s, g).item() <= 1e-12
    big = torch.rand(8, 1, 40, 40, dtype=torch.float64)
    zero = lambda x_t, **kw: torch.zeros_like(x_t)
    assert abs(ddpm_loss(zero, big, s, g).item() - 1) <= 0.05


def test_ddpm_loss_requires_time_embedding():
    with pytest.raises(ValueError, match="time embedding"):
        ddpm_loss(BaseModel(tiny(), 1), torch.rand(1, 1, 8, 8), NoiseSchedule.linear())


def test_ddpm_gradients_reach_every_parameter():
    model = DiffusionModel(BaseModel(tiny(), 1, time_embedding=True))
    model.loss({"image": torch.rand(2, 1, 8, 8)}, torch.Generator().manual_seed(1)).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


@pytest.mark.parametrize("sampler", ["ddim", "ddpm"])
def test_oracle_sampling_recovers_single_image(sampler):
    s = NoiseSchedule.linear()
    x0 = torch.rand(1, 1, 8, 8, dtype=torch.float64)
    oracle = OracleEps(x0, s)
    g = torch.Generator().manual_seed(0)
    if sampler == "ddim":
        out = ddim_sample(oracle, x0.shape, s, 50, 0.0, generator=g, dtype=torch.float64)
    else:
        out = ddpm_sample(oracle, x0.shape, s, generator=g, dtype=torch.float64)
    assert out.shape == x0.shape
    assert float(((out - x0) ** 2).mean()) <= 1e-2


def test_ddim_eta_zero_is_deterministic():
    model = BaseModel(tiny(), 1, time_embedding=True).eval()
    s = NoiseSchedule.linear(T=50)
    a = ddim_sample(model, (1, 1, 8, 8), s, 10, generator=torch.Generator().manual_seed(5))
    b = ddim_sample(model, (1, 1, 8, 8), s, 10, generator=torch.Generator().manual_seed(5))
    assert torch.equal(a, b)


def test_ddim_full_steps_eta_one_matches_ancestral():
    s = NoiseSchedule.linear(T=40, beta_start=1e-3, beta_end=0.2)
    w = torch.randn(1, dtype=torch.float64)
    model = lambda x_t, t=None, **kw: torch.tanh(w * x_t + 0.01 * t.view(-1, 1, 1, 1))
    a = ddim_sample(model, (2, 1, 4, 4), s, 40, 1.0, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    b = ddpm_sample(model, (2, 1, 4, 4), s, generator=torch.Generator().manual_seed(7), dtype=torch.float64)
    torch.testing.assert_close(a, b, atol=1e-9, rtol=1e-9)


def test_timesteps_and_errors():
    assert ddim_timesteps(1000, 1000) == list(range(999, -1, -1))
    steps = ddim_timesteps(1000, 50)
    assert steps[0] == 999 and steps[-1] == 0 and len(steps) == 50
    with pytest.raises(ValueError):
        ddim_timesteps(10, 11)
    with pytest.raises(ValueError, match="eta"):
        ddim_sample(lambda x, **k: x, (1, 1), NoiseSchedule.linear(T=5), 5, eta=2.0)
    bad = lambda x_t, **kw: torch.full_like(x_t, float("nan"))
    with pytest.raises(FloatingPointError, match="step"):
        ddim_sample(bad, (1, 1, 2, 2), NoiseSchedule.linear(T=5), 5)


def test_ensemble():
    single = lambda generator=None: torch.randn(1000, generator=generator, dtype=torch.float64)
    g = torch.Generator().manual_seed(0)
    assert ensemble_generate(single, 1, generator=torch.Generator().manual_seed(3)).equal(
        single(generator=torch.Generator().manual_seed(3)))
    fixed = torch.randn(4, 4)
    assert torch.equal(ensemble_generate(lambda generator=None: fixed, 5), fixed)
    var1 = ensemble_generate(single, 1, generator=g).var()
    var5 = ensemble_generate(single, 5, generator=g).var()
    assert var5 <= var1
    assert abs(float(var5) - 0.2) <= 0.05
    with pytest.raises(ValueError):
        ensemble_generate(single, 0)


def test_diffusion_model_sampling_ensemble_variance():
    base = BaseModel(tiny(), 1, time_embedding=True).eval()
    randomize_(base, 0.1)
    model = DiffusionModel(base, NoiseSchedule.linear(T=20), sample_steps=5, eta=1.0)
    g = torch.Generator().manual_seed(0)
    singles = torch.stack([model.sample((1, 1, 8, 8), generator=g, k=1) for _ in range(12)])
    ens = torch.stack([model.sample((1, 1, 8, 8), generator=g, k=4) for _ in range(12)])
    assert ens.var(0).mean() <= singles.var(0).mean()
    det = DiffusionModel(base, NoiseSchedule.linear(T=20), sample_steps=5)
    noise = torch.randn(1, 1, 8, 8)
    torch.testing.assert_close(det.sample((1, 1, 8, 8), noise=noise, k=3), det.sample((1, 1, 8, 8), noise=noise, k=1))


def test_diffusion_model_rejects_hierarchical_and_timeless():
    with pytest.raises(ValueError, match="diffusion"):
        DiffusionModel(BaseModel(tiny(), 1, time_embedding=True, hierarchical=True))
    with pytest.raises(ValueError, match="time embedding"):
        DiffusionModel(BaseModel(tiny(), 1))
