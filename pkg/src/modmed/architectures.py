"""Task architectures built on a shared encoder-decoder.

``BaseModel`` computes ``D(E(x + Ce(c), T(t)) + Cd(c), T(t))``. Task models
add a loss: segmentation (CE + Dice), auto-encoding (MSE/L1, optionally
variational) and denoising diffusion. Any base model can be made
hierarchical: every decoder stage gets a prediction head, the per-stage
features are rescaled to the finest stage, offset by a learnable per-scale
encoding, concatenated and decoded, and a pyramid loss supervises each stage.
"""
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as L
from .blocks import conv_nd, make_block
from .codec import Decoder, Encoder, EncoderSpec, PatchDecode, crop, pad_to_multiple
from .context import ImageConditionEncoder, LabelEmbedding, TimeEmbedding

__all__ = [
    "NoiseSchedule",
    "PyramidOutput",
    "VariationalLatent",
    "ModelOutput",
    "BaseModel",
    "SegmentationModel",
    "AutoEncoder",
    "DiffusionModel",
    "scale_to",
    "combine_stages",
    "pyramid_loss",
    "h_model_loss",
    "ddpm_forward_noising",
    "ddpm_loss",
    "ddpm_sample",
    "ddim_sample",
    "ensemble_generate",
]


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseSchedule:
    """Per-step signal and noise scales with ``alpha[t]**2 + beta[t]**2 == 1``."""

    alpha: torch.Tensor
    beta: torch.Tensor

    def __post_init__(self):
        self.alpha = torch.as_tensor(self.alpha, dtype=torch.float64)
        self.beta = torch.as_tensor(self.beta, dtype=torch.float64)
        if self.alpha.shape != self.beta.shape or self.alpha.ndim != 1:
            raise ValueError("alpha and beta must be 1-d tensors of equal length")
        if (torch.diff(self.alpha) > 0).any():
            raise ValueError("alpha must be non-increasing in t")

    @property
    def T(self) -> int:
        return self.alpha.numel()

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        """Linear per-step variance schedule mapped to cumulative ``(alpha, beta)``."""
        variances = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        alpha_bar = torch.cumprod(1.0 - variances, dim=0)
        return cls(alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())

    def alpha_bar(self, t: int) -> float:
        """``alpha[t]**2``, with ``alpha_bar(-1) == 1``."""
        return 1.0 if t < 0 else float(self.alpha[t]) ** 2


def ddpm_forward_noising(x: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``x_t = alpha_t * x + beta_t * eps``; ``t`` is an int or a ``(B,)`` tensor."""
    t = torch.as_tensor(t, dtype=torch.long)
    if ((t < 0) | (t >= schedule.T)).any():
        raise ValueError(f"time step out of range [0, {schedule.T})")
    if eps.shape != x.shape:
        raise ValueError("eps must have the same shape as x")
    shape = (-1,) + (1,) * (x.ndim - 1) if t.ndim else ()
    a = schedule.alpha[t].to(x).reshape(shape)
    b = schedule.beta[t].to(x).reshape(shape)
    return a * x + b * eps


# ---------------------------------------------------------------------------
# hierarchical pieces


@dataclass
class PyramidOutput:
    """Multi-resolution outputs of a hierarchical model, coarse to fine."""

    features: List[torch.Tensor]
    predictions: List[torch.Tensor]
    position_encodings: List[torch.Tensor]
    weight: float = 1.0
    pads: Tuple[Tuple[int, int], ...] = ()


@dataclass
class VariationalLatent:
    mean: torch.Tensor
    logvar: torch.Tensor


@dataclass
class ModelOutput:
    output: torch.Tensor
    latent: Optional[VariationalLatent] = None
    pyramid: Optional[PyramidOutput] = None


def scale_to(x: torch.Tensor, target_dims: Sequence[int], mode: str = "linear") -> torch.Tensor:
    """Resize the spatial axes of ``x`` to ``target_dims``.

    ``x`` is ``(B, C, *dims)``; integer label maps ``(B, *dims)`` are accepted
    and always use nearest interpolation. ``mode`` is ``"linear"``
    (bilinear/trilinear) or ``"nearest"``. Same-size inputs are returned as is.
    """
    target_dims = tuple(int(d) for d in target_dims)
    labels = not x.dtype.is_floating_point
    spatial = tuple(x.shape[1:]) if labels else tuple(x.shape[2:])
    if len(spatial) != len(target_dims):
        raise ValueError(f"rank mismatch: {spatial} vs {target_dims}")
    if spatial == target_dims:
        return x
    if labels:
        out = F.interpolate(x.unsqueeze(1).float(), size=target_dims, mode="nearest")
        return out.squeeze(1).to(x.dtype)
    if mode == "nearest":
        return F.interpolate(x, size=target_dims, mode="nearest")
    if mode != "linear":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    interp = "bilinear" if len(target_dims) == 2 else "trilinear"
    return F.interpolate(x, size=target_dims, mode=interp, align_corners=False)


def combine_stages(features: Sequence[torch.Tensor], position_encodings: Sequence[torch.Tensor]) -> torch.Tensor:
    """Rescale every stage to the finest one, add its encoding, concatenate channels."""
    if len(features) != len(position_encodings):
        raise ValueError(f"{len(features)} stage features but {len(position_encodings)} position encodings")
    if not features:
        raise ValueError("no stage features to combine")
    finest = features[-1].shape[2:]
    rank = len(finest)
    parts = [scale_to(f, finest) + p.view(1, -1, *(1,) * rank) for f, p in zip(features, position_encodings)]
    return torch.cat(parts, dim=1)


def pyramid_loss(target: torch.Tensor, predictions: Sequence[torch.Tensor], base_loss: Callable) -> torch.Tensor:
    """Mean over stages of ``base_loss(prediction_i, target scaled to prediction_i)``.

    Integer label targets are rescaled with nearest interpolation, intensity
    targets bilinearly/trilinearly.
    """
    if not predictions:
        raise ValueError("pyramid loss needs at least one prediction")
    total = 0.0
    for p in predictions:
        total = total + base_loss(p, scale_to(target, p.shape[2:]))
    return total / len(predictions)


def h_model_loss(output, target, predictions, base_loss: Callable, weight: float = 1.0) -> torch.Tensor:
    """``base_loss(output, target) + weight * pyramid_loss(target, predictions)``."""
    return base_loss(output, target) + weight * pyramid_loss(target, predictions, base_loss)


# ---------------------------------------------------------------------------
# base model


class BaseModel(nn.Module):
    """Encoder-decoder with optional time/label context and image conditions.

    Args:
        spec: encoder description; the decoder mirrors it.
        out_channels: channels of the produced map.
        time_embedding: accept diffusion time steps ``t``.
        num_classes: accept integer class labels (0 disables).
        cond_channels: accept a condition image with this many channels (0 disables).
        ctx_dim: context width; defaults to 4x the base channel width.
        share_condition: decoder-side condition encoder reuses the encoder-side map.
        hierarchical: add per-stage heads and the combination layer.
        variational: sample the latent from a learned diagonal Gaussian.
    """

    def __init__(
        self,
        spec: EncoderSpec,
        out_channels: int,
        time_embedding: bool = False,
        num_classes: int = 0,
        cond_channels: int = 0,
        ctx_dim: Optional[int] = None,
        share_condition: bool = False,
        hierarchical: bool = False,
        variational: bool = False,
    ):
        super().__init__()
        self.spec = spec
        self.out_channels = out_channels
        self.hierarchical = hierarchical
        self.variational = variational
        has_ctx = time_embedding or num_classes > 0
        self.ctx_dim = (ctx_dim or 4 * spec.channels) if has_ctx else None
        self.time_embed = TimeEmbedding(self.ctx_dim) if time_embedding else None
        self.label_embed = LabelEmbedding(num_classes, self.ctx_dim) if num_classes > 0 else None

        self.encoder = Encoder(spec, self.ctx_dim)
        self.decoder = Decoder(spec, out_channels, self.ctx_dim, with_head=not hierarchical)

        sched = spec.channel_schedule
        flat = spec.dense_latent is not None
        latent_width = spec.dense_latent if flat else sched[-1]
        if cond_channels:
            self.cond_encoder = ImageConditionEncoder(cond_channels, spec.in_channels, spec.rank, "encoder")
            self.cond_decoder = ImageConditionEncoder(
                cond_channels, latent_width, spec.rank, "decoder", flat=flat,
                shared=self.cond_encoder if share_condition else None,
            )
        else:
            self.cond_encoder = self.cond_decoder = None

        if variational:
            self.latent_stats = (nn.Linear(latent_width, 2 * latent_width) if flat
                                 else conv_nd(spec.rank)(latent_width, 2 * latent_width, 1))

        if hierarchical:
            c0 = sched[0]
            stage_channels = self.decoder.stage_channels
            opts = spec.block_options(self.ctx_dim)
            self.stage_blocks = nn.ModuleList(
                make_block(spec.backbone, c, c, spec.rank, **opts) for c in stage_channels
            )
            self.stage_proj = nn.ModuleList(conv_nd(spec.rank)(c, c0, 1) for c in stage_channels)
            self.stage_decode = nn.ModuleList(
                PatchDecode(c0, out_channels, spec.patch_size, spec.rank) for _ in stage_channels
            )
            self.position_encodings = nn.ParameterList(
                nn.Parameter(torch.randn(c0) * 0.02) for _ in stage_channels
            )
            self.combine = PatchDecode(len(stage_channels) * c0, out_channels, spec.patch_size, spec.rank)

    @property
    def num_stages(self) -> int:
        return self.spec.num_down + 1

    def context(self, t=None, label=None, batch: Optional[int] = None) -> Optional[torch.Tensor]:
        ctx = None
        if t is not None:
            if self.time_embed is None:
                raise ValueError("time step supplied to a model built without time embedding")
            t = torch.as_tensor(t)
            if t.ndim == 0 and batch is not None:
                t = t.expand(batch)
            ctx = self.time_embed(t)
        if label is not None:
            if self.label_embed is None:
                raise ValueError("class label supplied to a model built without label embedding")
            label = torch.as_tensor(label)
            if label.ndim == 0 and batch is not None:
                label = label.expand(batch)
            emb = self.label_embed(label)
            ctx = emb if ctx is None else ctx + emb
        return ctx

    def run(self, x, cond=None, t=None, label=None, sample_latent: Optional[bool] = None,
            generator=None) -> ModelOutput:
        if cond is not None and self.cond_encoder is None:
            raise ValueError("condition image supplied to a model built without condition encoders")
        ctx = self.context(t, label, batch=x.shape[0])
        if cond is not None:
            x = x + self.cond_encoder(cond, x)
        bundle = self.encoder(x, ctx)
        latent = None
        if self.variational:
            mean, logvar = self.latent_stats(bundle.z).chunk(2, dim=1)
            logvar = logvar.clamp(-30.0, 20.0)
            latent = VariationalLatent(mean, logvar)
            if sample_latent is None:
                sample_latent = self.training
            if sample_latent:
                eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype, device=mean.device)
                bundle.z = mean + (0.5 * logvar).exp() * eps
            else:
                bundle.z = mean
        if cond is not None:
            bundle.z = bundle.z + self.cond_decoder(cond, bundle.z)
        if not self.hierarchical:
            return ModelOutput(self.decoder(bundle, ctx), latent)
        stages = self.decoder.decode_stages(bundle, ctx)
        if len(stages) != len(self.stage_blocks):
            raise ValueError(f"{len(stages)} decoder stages but {len(self.stage_blocks)} prediction heads")
        features = [proj(block(s, ctx)) for s, block, proj in zip(stages, self.stage_blocks, self.stage_proj)]
        encodings = list(self.position_encodings)
        out = crop(self.combine(combine_stages(features, encodings)), bundle.pads)
        predictions = [dec(f) for f, dec in zip(features, self.stage_decode)]
        return ModelOutput(out, latent, PyramidOutput(features, predictions, encodings, pads=bundle.pads))

    def forward(self, x, cond=None, t=None, label=None):
        return self.run(x, cond, t, label).output


def _pad_target(target: torch.Tensor, pads) -> torch.Tensor:
    if not any(lo or hi for lo, hi in pads):
        return target
    flat = []
    for lo, hi in reversed(pads):
        flat += [lo, hi]
    return F.pad(target, flat)


class TaskModel(nn.Module):
    """Base model plus a training loss. Batches are dicts with an ``image`` key."""

    task = "base"

    def __init__(self, base: BaseModel, pyramid_weight: float = 1.0):
        super().__init__()
        if pyramid_weight < 0:
            raise ValueError("pyramid weight must be >= 0")
        self.base = base
        self.pyramid_weight = pyramid_weight

    @staticmethod
    def _inputs(batch):
        return dict(cond=batch.get("condition"), label=batch.get("label"))

    def forward(self, x, cond=None, t=None, label=None):
        return self.base(x, cond, t, label)

    def _hierarchical(self, out: ModelOutput, target, base_loss):
        loss = base_loss(out.output, target)
        if out.pyramid is not None:
            padded = _pad_target(target, out.pyramid.pads)
            out.pyramid.weight = self.pyramid_weight
            loss = loss + self.pyramid_weight * pyramid_loss(padded, out.pyramid.predictions, base_loss)
        return loss


class SegmentationModel(TaskModel):
    task = "segmentation"

    def __init__(self, base: BaseModel, ce_weight: float = 1.0, dice_weight: float = 1.0, pyramid_weight: float = 1.0):
        super().__init__(base, pyramid_weight)
        self.num_classes = base.out_channels
        self.ce_weight = ce_weight
        self.dice_weight = dice_weight

    def base_loss(self, logits, target):
        return L.segmentation_loss(logits, target, self.ce_weight, self.dice_weight)

    def loss(self, batch, generator=None):
        out = self.base.run(batch["image"], **self._inputs(batch))
        return self._hierarchical(out, batch["target"], self.base_loss)

    @torch.no_grad()
    def predict(self, batch, generator=None):
        return self.base(batch["image"], **self._inputs(batch)).argmax(1)

    def metrics(self, pred, batch):
        target = batch["target"]
        dice = [L.dice_score(p, t, self.num_classes) for p, t in zip(pred, target)]
        iou = [L.miou(p, t, self.num_classes) for p, t in zip(pred, target)]
        return {"dice": float(np.mean(dice)), "miou": float(np.mean(iou))}


class AutoEncoder(TaskModel):
    """Reconstruction model; a float ``batch["target"]`` supervises instead of the input.

    Integer label maps under ``target`` are ignored.
    """

    task = "reconstruction"

    def __init__(self, base: BaseModel, recon: str = "mse", kl_weight: float = 1e-4, pyramid_weight: float = 1.0):
        super().__init__(base, pyramid_weight)
        if recon not in ("mse", "l1"):
            raise ValueError(f"reconstruction loss must be 'mse' or 'l1', got {recon!r}")
        self.recon = recon
        self.kl_weight = kl_weight

    @staticmethod
    def _target(batch):
        target = batch.get("target")
        return target if target is not None and target.dtype.is_floating_point else batch["image"]

    def base_loss(self, pred, target):
        return L.mse_loss(pred, target) if self.recon == "mse" else L.l1_loss(pred, target)

    def loss(self, batch, generator=None):
        out = self.base.run(batch["image"], **self._inputs(batch), generator=generator)
        target = self._target(batch)
        loss = self._hierarchical(out, target, self.base_loss)
        if out.latent is not None:
            loss = loss + self.kl_weight * L.kl_loss(out.latent.mean, out.latent.logvar)
        return loss

    @torch.no_grad()
    def predict(self, batch, generator=None):
        return self.base(batch["image"], **self._inputs(batch))

    def metrics(self, pred, batch):
        target = self._target(batch)
        return {"psnr": L.psnr(pred, target), "ssim": L.ssim(pred, target)}


# ---------------------------------------------------------------------------
# diffusion


def _eps_call(model, x_t, t, cond, label):
    steps = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
    eps = model(x_t, cond=cond, t=steps, label=label)
    if not torch.isfinite(eps).all():
        raise FloatingPointError(f"non-finite noise prediction at diffusion step {int(t)}")
    return eps


def ddpm_loss(model, x, schedule: NoiseSchedule, generator=None, cond=None, label=None) -> torch.Tensor:
    """MSE between true and predicted noise at a uniformly sampled step per sample."""
    if isinstance(model, BaseModel) and model.time_embed is None:
        raise ValueError("diffusion noise predictor must be built with a time embedding")
    t = torch.randint(0, schedule.T, (x.shape[0],), generator=generator)
    eps = torch.randn(x.shape, generator=generator, dtype=x.dtype, device=x.device)
    x_t = ddpm_forward_noising(x, t, eps, schedule)
    return L.mse_loss(model(x_t, cond=cond, t=t, label=label), eps)


def _initial_noise(shape, noise, generator, dtype):
    if noise is not None:
        if tuple(noise.shape) != tuple(shape):
            raise ValueError("initial noise shape does not match requested shape")
        return noise.clone()
    return torch.randn(tuple(shape), generator=generator, dtype=dtype)


@torch.no_grad()
def ddpm_sample(model, shape, schedule: NoiseSchedule, cond=None, label=None, generator=None,
                noise=None, dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling through every step ``T-1 .. 0``."""
    x = _initial_noise(shape, noise, generator, dtype)
    for t in range(schedule.T - 1, -1, -1):
        eps = _eps_call(model, x, t, cond, label)
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t - 1)
        step_var = 1.0 - ab / ab_prev
        x0 = (x - float(schedule.beta[t]) * eps) / float(schedule.alpha[t])
        mean = (math.sqrt(ab_prev) * step_var / (1.0 - ab)) * x0 \
            + (math.sqrt(1.0 - step_var) * (1.0 - ab_prev) / (1.0 - ab)) * x
        var = step_var * (1.0 - ab_prev) / (1.0 - ab)
        if var > 0:
            mean = mean + math.sqrt(var) * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        x = mean
    return x


def ddim_timesteps(T: int, num_steps: int) -> List[int]:
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must lie in [1, {T}], got {num_steps}")
    steps = np.unique(np.round(np.linspace(0, T - 1, num_steps)).astype(int))
    return [int(s) for s in steps[::-1]]


@torch.no_grad()
def ddim_sample(model, shape, schedule: NoiseSchedule, num_steps: int = 50, eta: float = 0.0, cond=None,
                label=None, generator=None, noise=None, dtype=torch.float32) -> torch.Tensor:
    """Implicit sampling over a subset of steps; ``eta=0`` is deterministic given the initial noise."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    x = _initial_noise(shape, noise, generator, dtype)
    steps = ddim_timesteps(schedule.T, num_steps)
    for i, t in enumerate(steps):
        prev = steps[i + 1] if i + 1 < len(steps) else -1
        eps = _eps_call(model, x, t, cond, label)
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(prev)
        x0 = (x - float(schedule.beta[t]) * eps) / float(schedule.alpha[t])
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab)) * math.sqrt(1.0 - ab / ab_prev)
        direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
        x = math.sqrt(ab_prev) * x0 + direction * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
    return x


def _stable_mean(samples: Sequence[torch.Tensor]) -> torch.Tensor:
    stacked = torch.stack(list(samples), 0)
    return stacked[0] + (stacked - stacked[0]).sum(0) / stacked.shape[0]


def ensemble_generate(sampler: Callable[..., torch.Tensor], k: int, generator=None, **kwargs) -> torch.Tensor:
    """Pixel-wise mean of ``k`` samples drawn with ``sampler(generator=..., **kwargs)``."""
    if k < 1:
        raise ValueError("ensemble size must be >= 1")
    return _stable_mean([sampler(generator=generator, **kwargs) for _ in range(k)])


class DiffusionModel(TaskModel):
    """Noise-prediction diffusion model; ``batch["condition"]`` optionally conditions it."""

    task = "generation"

    def __init__(self, base: BaseModel, schedule: Optional[NoiseSchedule] = None, sampler: str = "ddim",
                 sample_steps: int = 50, eta: float = 0.0, ensemble: int = 1):
        super().__init__(base, 0.0)
        if base.hierarchical:
            raise ValueError("hierarchical vertical fusion is not supported for diffusion models")
        if base.time_embed is None:
            raise ValueError("diffusion noise predictor must be built with a time embedding")
        if sampler not in ("ddim", "ddpm"):
            raise ValueError(f"sampler must be 'ddim' or 'ddpm', got {sampler!r}")
        self.schedule = schedule or NoiseSchedule.linear()
        self.sampler = sampler
        self.sample_steps = sample_steps
        self.eta = eta
        self.ensemble = ensemble

    def loss(self, batch, generator=None):
        return ddpm_loss(self.base, batch["image"], self.schedule, generator, **self._inputs(batch))

    @torch.no_grad()
    def sample(self, shape, cond=None, label=None, generator=None, noise=None, k: Optional[int] = None):
        dtype = next(self.parameters()).dtype
        if self.sampler == "ddpm":
            fn = lambda **kw: ddpm_sample(self.base, shape, self.schedule, cond, label, dtype=dtype, noise=noise, **kw)
        else:
            fn = lambda **kw: ddim_sample(self.base, shape, self.schedule, self.sample_steps, self.eta, cond,
                                          label, dtype=dtype, noise=noise, **kw)
        return ensemble_generate(fn, k or self.ensemble, generator=generator)

    @torch.no_grad()
    def predict(self, batch, generator=None):
        image = batch["image"]
        return self.sample(tuple(image.shape), batch.get("condition"), batch.get("label"), generator)

    def metrics(self, pred, batch):
        target = AutoEncoder._target(batch)
        return {"psnr": L.psnr(pred, target), "ssim": L.ssim(pred, target)}
