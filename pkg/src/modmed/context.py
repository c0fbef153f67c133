"""Condition encoders: diffusion time steps, class labels and condition images."""
from typing import Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import conv_nd

__all__ = [
    "sinusoidal_embed",
    "one_hot_embed",
    "TimeEmbedding",
    "LabelEmbedding",
    "ImageConditionEncoder",
]


def sinusoidal_embed(step: Union[int, Sequence[int], torch.Tensor], dim: int, base: float = 10000.0) -> torch.Tensor:
    """Transformer-style position embedding of integer steps.

    Layout is ``[sin(s * f_0), ..., sin(s * f_{h-1}), cos(s * f_0), ..., cos(s * f_{h-1})]``
    with ``f_i = base ** (-2 i / dim)`` and ``h = dim / 2``. A scalar step
    returns a ``(dim,)`` vector; a batch of steps returns ``(B, dim)``.
    """
    if dim < 2 or dim % 2:
        raise ValueError(f"embedding dim must be even and >= 2, got {dim}")
    steps = torch.as_tensor(step)
    if (steps < 0).any():
        raise ValueError("steps must be non-negative")
    scalar = steps.ndim == 0
    steps = steps.reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = base ** (-2.0 * torch.arange(half, dtype=torch.float64) / dim)
    angles = steps[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(torch.get_default_dtype())
    return emb[0] if scalar else emb


def one_hot_embed(label: Union[int, Sequence[int], torch.Tensor], num_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(label, dtype=torch.long)
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if ((labels < 0) | (labels >= num_classes)).any():
        raise ValueError(f"label out of range [0, {num_classes})")
    return F.one_hot(labels, num_classes).to(torch.get_default_dtype())


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a two-layer MLP to ``ctx_dim``."""

    def __init__(self, ctx_dim: int):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.mlp = nn.Sequential(nn.Linear(ctx_dim, ctx_dim), nn.SiLU(), nn.Linear(ctx_dim, ctx_dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        emb = sinusoidal_embed(t.detach().cpu(), self.ctx_dim).to(self.mlp[0].weight)
        return self.mlp(emb.reshape(-1, self.ctx_dim))


class LabelEmbedding(nn.Module):
    def __init__(self, num_classes: int, ctx_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.proj = nn.Linear(num_classes, ctx_dim)

    def forward(self, label: torch.Tensor) -> torch.Tensor:
        return self.proj(one_hot_embed(label.cpu(), self.num_classes).to(self.proj.weight).reshape(-1, self.num_classes))


class ImageConditionEncoder(nn.Module):
    """Map a condition image to an additive term.

    ``which="encoder"`` yields a term shaped like the model input (a 3x3
    convolution). ``which="decoder"`` yields a term shaped like the latent:
    the condition is area-resized to the latent grid and mapped with a 1x1
    convolution, or pooled and mapped linearly when the latent is a flat vector.
    ``shared`` reuses an encoder-side module as the first stage of a
    decoder-side one.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rank: int = 2,
        which: str = "encoder",
        flat: bool = False,
        shared: Optional["ImageConditionEncoder"] = None,
    ):
        super().__init__()
        if which not in ("encoder", "decoder"):
            raise ValueError(f"which must be 'encoder' or 'decoder', got {which!r}")
        self.which = which
        self.rank = rank
        self.flat = flat
        self.out_channels = out_channels
        if which == "encoder":
            self.map = conv_nd(rank)(in_channels, out_channels, 3, padding=1)
            self.shared = None
        else:
            self.shared = shared
            mid = shared.out_channels if shared is not None else in_channels
            self.map = nn.Linear(mid, out_channels) if flat else conv_nd(rank)(mid, out_channels, 1)

    def forward(self, c: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        if self.which == "encoder":
            term = self.map(c)
        else:
            if self.shared is not None:
                c = self.shared.map(c)
            if self.flat:
                term = self.map(c.flatten(2).mean(-1))
            else:
                term = self.map(F.adaptive_avg_pool3d(c, target.shape[2:]) if self.rank == 3
                                else F.adaptive_avg_pool2d(c, target.shape[2:]))
        if term.shape != target.shape:
            raise ValueError(f"condition term shape {tuple(term.shape)} does not match target {tuple(target.shape)}")
        return term
