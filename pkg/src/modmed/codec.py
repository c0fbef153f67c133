"""Encoders and decoders assembled from building blocks.

Encoder: patch encoding, ``num_down`` stages of (blocks, down-sampling), middle
blocks and an optional dense bottleneck. Decoder: the mirror image, with
optional U-shaped skip fusion, optional final blocks and a patch decoding
layer. Inputs are zero-padded to a multiple of ``patch_size * 2**num_down``
and outputs cropped back.
"""
import math
from dataclasses import dataclass, field, fields
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import BLOCK_KINDS, ConvBlock, conv_nd, conv_transpose_nd, make_block

__all__ = [
    "EncoderSpec",
    "LatentBundle",
    "PatchEncode",
    "PatchDecode",
    "DownSample",
    "UpSample",
    "Stage",
    "Encoder",
    "Decoder",
    "is_conv_family",
]

CONV_FAMILY = ("conv", "res_conv", "conv+msa")


def is_conv_family(backbone: str) -> bool:
    return backbone in CONV_FAMILY


@dataclass
class EncoderSpec:
    """Declarative description of an encoder (and its mirrored decoder)."""

    backbone: str = "conv"
    rank: int = 2
    in_channels: int = 1
    channels: int = 32
    channel_schedule: Optional[List[int]] = None
    num_down: Optional[int] = None
    blocks_per_stage: int = 1
    num_middle: int = 2
    num_final: int = 1
    patch_size: Optional[int] = None
    u_shaped: bool = True
    dense_latent: Optional[int] = None
    input_dims: Optional[List[int]] = None
    window: int = 8
    head_dim: int = 16
    mlp_ratio: float = 4.0
    drop_path: Optional[float] = None
    d_state: int = 16
    expand: int = 2
    max_attention_tokens: Optional[int] = 16384

    def __post_init__(self):
        if self.backbone not in BLOCK_KINDS:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BLOCK_KINDS}")
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.num_down is None:
            self.num_down = 2 if self.rank == 2 else 3
        if self.patch_size is None:
            self.patch_size = 1 if is_conv_family(self.backbone) else (4 if self.rank == 2 else 2)
        if self.drop_path is None:
            self.drop_path = 0.0 if self.backbone in ("conv", "res_conv") else 0.1
        if self.channel_schedule is None:
            self.channel_schedule = [self.channels * 2 ** i for i in range(self.num_down + 1)]
        self.channel_schedule = [int(c) for c in self.channel_schedule]
        if len(self.channel_schedule) != self.num_down + 1:
            raise ValueError(
                f"channel_schedule has {len(self.channel_schedule)} entries; num_down={self.num_down} "
                f"requires {self.num_down + 1}"
            )
        if self.u_shaped and self.dense_latent is not None:
            raise ValueError("a U-shaped encoder keeps spatial skips and cannot use a dense latent")
        if self.dense_latent is not None:
            if self.input_dims is None or len(self.input_dims) != self.rank:
                raise ValueError("dense_latent requires input_dims with one entry per spatial axis")
        for name in ("num_down", "blocks_per_stage", "num_middle", "num_final", "patch_size"):
            if getattr(self, name) < (1 if name == "patch_size" else 0):
                raise ValueError(f"{name} must be non-negative (patch_size >= 1)")

    @property
    def reduction(self) -> int:
        return self.patch_size * 2 ** self.num_down

    def latent_grid(self, dims: Sequence[int]) -> Tuple[int, ...]:
        return tuple(-(-d // self.reduction) for d in dims)

    def block_options(self, ctx_dim: Optional[int] = None) -> dict:
        return dict(
            ctx_dim=ctx_dim,
            window=self.window,
            head_dim=self.head_dim,
            mlp_ratio=self.mlp_ratio,
            drop_path=self.drop_path,
            d_state=self.d_state,
            expand=self.expand,
            max_tokens=self.max_attention_tokens,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LatentBundle:
    """Encoder output: latent ``z`` plus skips ordered fine-to-coarse (coarsest last)."""

    z: torch.Tensor
    skips: List[torch.Tensor] = field(default_factory=list)
    pads: Tuple[Tuple[int, int], ...] = ()
    grid: Tuple[int, ...] = ()


class ChannelLayerNorm(nn.LayerNorm):
    def forward(self, x):
        return super().forward(x.movedim(1, -1)).movedim(-1, 1)


class PatchEncode(nn.Module):
    """Pixels to patch embeddings: a strided conv (kernel = stride = patch).

    Conv backbones with patch 1 use a 3x3 ConvBlock instead.
    """

    def __init__(self, in_channels: int, out_channels: int, patch_size: int, rank: int = 2, backbone: str = "conv"):
        super().__init__()
        self.rank = rank
        self.patch_size = patch_size
        if is_conv_family(backbone):
            k = patch_size if patch_size > 1 else 3
            self.proj = ConvBlock(in_channels, out_channels, rank, kernel_size=k, stride=patch_size,
                                  padding=0 if patch_size > 1 else 1)
            self.norm = nn.Identity()
        else:
            self.proj = conv_nd(rank)(in_channels, out_channels, patch_size, patch_size)
            self.norm = ChannelLayerNorm(out_channels)

    def forward(self, x):
        if x.ndim != self.rank + 2:
            raise ValueError(f"rank mismatch: expected {self.rank}D image, got shape {tuple(x.shape)}")
        x, _ = pad_to_multiple(x, self.patch_size)
        return self.norm(self.proj(x))


class PatchDecode(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, patch_size: int, rank: int = 2):
        super().__init__()
        if patch_size > 1:
            self.proj = conv_transpose_nd(rank)(in_channels, out_channels, patch_size, patch_size)
        else:
            self.proj = conv_nd(rank)(in_channels, out_channels, 1)

    def forward(self, x):
        return self.proj(x)


class DownSample(nn.Module):
    """Halve every spatial axis and map ``in_channels -> out_channels``.

    Conv backbones use a stride-2 ConvBlock; sequence backbones use patch
    merging (concatenate each ``2**rank`` neighbourhood, layer norm, linear).
    """

    def __init__(self, in_channels: int, out_channels: int, rank: int = 2, backbone: str = "conv"):
        super().__init__()
        self.rank = rank
        self.in_channels = in_channels
        self.merging = not is_conv_family(backbone)
        if self.merging:
            merged = 2 ** rank * in_channels
            self.norm = nn.LayerNorm(merged)
            self.reduction = nn.Linear(merged, out_channels, bias=False)
        else:
            self.conv = ConvBlock(in_channels, out_channels, rank, kernel_size=2, stride=2, padding=0)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"channel mismatch: expected {self.in_channels}, got {x.shape[1]}")
        if min(x.shape[2:]) < 2:
            raise ValueError(f"cannot down-sample spatial dims {tuple(x.shape[2:])}")
        x, _ = pad_to_multiple(x, 2)
        if not self.merging:
            return self.conv(x)
        B, C, *dims = x.shape
        view = [B, C]
        for d in dims:
            view += [d // 2, 2]
        perm = [0] + [2 + 2 * i for i in range(self.rank)] + [3 + 2 * i for i in range(self.rank)] + [1]
        h = x.reshape(view).permute(*perm).reshape(B, *(d // 2 for d in dims), -1)
        return self.reduction(self.norm(h)).movedim(-1, 1)


class UpSample(nn.Module):
    """Double every spatial axis: transposed conv, or patch expansion for sequence backbones."""

    def __init__(self, in_channels: int, out_channels: int, rank: int = 2, backbone: str = "conv"):
        super().__init__()
        self.rank = rank
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.expanding = not is_conv_family(backbone)
        if self.expanding:
            self.expand = nn.Linear(in_channels, 2 ** rank * out_channels, bias=False)
            self.norm = nn.LayerNorm(out_channels)
        else:
            self.conv = conv_transpose_nd(rank)(in_channels, out_channels, 2, 2)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"channel mismatch: expected {self.in_channels}, got {x.shape[1]}")
        if not self.expanding:
            return self.conv(x)
        B, C, *dims = x.shape
        h = self.expand(x.movedim(1, -1)).reshape(B, *dims, *(2,) * self.rank, self.out_channels)
        perm = [0]
        for i in range(self.rank):
            perm += [1 + i, 1 + self.rank + i]
        perm.append(1 + 2 * self.rank)
        h = h.permute(*perm).reshape(B, *(2 * d for d in dims), self.out_channels)
        return self.norm(h).movedim(-1, 1)


class Stage(nn.Module):
    """A run of building blocks at one resolution; swin blocks alternate shift 0 / window // 2."""

    def __init__(self, backbone: str, channels: int, depth: int, rank: int, options: dict):
        super().__init__()
        blocks = []
        for i in range(depth):
            opts = dict(options)
            opts["shift"] = (opts.get("window", 4) // 2) if i % 2 else 0
            blocks.append(make_block(backbone, channels, channels, rank, **opts))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, t=None):
        for b in self.blocks:
            x = b(x, t)
        return x


def pad_to_multiple(x: torch.Tensor, multiple: int):
    """Symmetric zero padding of each spatial axis up to a multiple; returns ``(x, pads)``."""
    pads = []
    for d in x.shape[2:]:
        extra = -(-d // multiple) * multiple - d
        pads.append((extra // 2, extra - extra // 2))
    pads = tuple(pads)
    if any(lo or hi for lo, hi in pads):
        flat = []
        for lo, hi in reversed(pads):
            flat += [lo, hi]
        x = F.pad(x, flat)
    return x, pads


def crop(x: torch.Tensor, pads) -> torch.Tensor:
    if not any(lo or hi for lo, hi in pads):
        return x
    index = (slice(None), slice(None)) + tuple(slice(lo, x.shape[2 + i] - hi) for i, (lo, hi) in enumerate(pads))
    return x[index]


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec, ctx_dim: Optional[int] = None):
        super().__init__()
        self.spec = spec
        sched = spec.channel_schedule
        opts = spec.block_options(ctx_dim)
        self.patch = PatchEncode(spec.in_channels, sched[0], spec.patch_size, spec.rank, spec.backbone)
        self.down_stages = nn.ModuleList(
            Stage(spec.backbone, sched[i], spec.blocks_per_stage, spec.rank, opts) for i in range(spec.num_down)
        )
        self.downs = nn.ModuleList(
            DownSample(sched[i], sched[i + 1], spec.rank, spec.backbone) for i in range(spec.num_down)
        )
        self.middle = Stage(spec.backbone, sched[-1], spec.num_middle, spec.rank, opts)
        if spec.dense_latent is not None:
            grid = spec.latent_grid(spec.input_dims)
            self.dense = nn.Linear(sched[-1] * math.prod(grid), spec.dense_latent)
        else:
            self.dense = None

    @property
    def out_channels(self) -> int:
        return self.spec.channel_schedule[-1]

    def forward(self, x: torch.Tensor, t: Optional[torch.Tensor] = None) -> LatentBundle:
        spec = self.spec
        if x.ndim != spec.rank + 2:
            raise ValueError(f"expected a {spec.rank}D batch (B, C, *dims), got shape {tuple(x.shape)}")
        if x.shape[1] != spec.in_channels:
            raise ValueError(f"encoder expects {spec.in_channels} input channels, got {x.shape[1]}")
        if min(x.shape[2:]) < spec.reduction:
            raise ValueError(
                f"input dims {tuple(x.shape[2:])} too small for patch {spec.patch_size} "
                f"and {spec.num_down} down-sampling stages (need >= {spec.reduction})"
            )
        if self.dense is not None and tuple(x.shape[2:]) != tuple(spec.input_dims):
            raise ValueError(f"dense latent was built for input dims {tuple(spec.input_dims)}")
        x, pads = pad_to_multiple(x, spec.reduction)
        h = self.patch(x)
        skips = []
        for stage, down in zip(self.down_stages, self.downs):
            h = stage(h, t)
            if spec.u_shaped:
                skips.append(h)
            h = down(h)
        h = self.middle(h, t)
        grid = tuple(h.shape[2:])
        z = self.dense(h.flatten(1)) if self.dense is not None else h
        return LatentBundle(z, skips, pads, grid)


class Decoder(nn.Module):
    """Mirror of :class:`Encoder`.

    With ``with_head=False`` the final blocks and patch decoding are omitted
    and only per-stage features are produced (used by hierarchical models).
    """

    def __init__(self, spec: EncoderSpec, out_channels: int, ctx_dim: Optional[int] = None, with_head: bool = True):
        super().__init__()
        self.spec = spec
        self.with_head = with_head
        sched = spec.channel_schedule
        opts = spec.block_options(ctx_dim)
        rank = spec.rank
        if spec.dense_latent is not None:
            self.grid = spec.latent_grid(spec.input_dims)
            self.dense = nn.Linear(spec.dense_latent, sched[-1] * math.prod(self.grid))
        else:
            self.dense = None
        levels = list(range(spec.num_down - 1, -1, -1))
        self.ups = nn.ModuleList(UpSample(sched[i + 1], sched[i], rank, spec.backbone) for i in levels)
        if spec.u_shaped:
            if is_conv_family(spec.backbone):
                fuse = [ConvBlock(2 * sched[i], sched[i], rank, ctx_dim=ctx_dim) for i in levels]
            else:
                fuse = [conv_nd(rank)(2 * sched[i], sched[i], 1) for i in levels]
            self.fuse = nn.ModuleList(fuse)
        else:
            self.fuse = None
        self.up_stages = nn.ModuleList(
            Stage(spec.backbone, sched[i], spec.blocks_per_stage, rank, opts) for i in levels
        )
        if with_head:
            self.final = Stage(spec.backbone, sched[0], spec.num_final, rank, opts)
            self.patch = PatchDecode(sched[0], out_channels, spec.patch_size, rank)

    @property
    def stage_channels(self) -> List[int]:
        """Channel width of each collected stage, coarse to fine."""
        return list(reversed(self.spec.channel_schedule))

    def _fuse(self, i, h, skip, t):
        if skip.shape[2:] != h.shape[2:]:
            raise ValueError(f"skip dims {tuple(skip.shape[2:])} do not match decoder dims {tuple(h.shape[2:])}")
        h = torch.cat([h, skip], dim=1)
        f = self.fuse[i]
        return f(h, t) if isinstance(f, ConvBlock) else f(h)

    def decode_stages(self, bundle: LatentBundle, t: Optional[torch.Tensor] = None) -> List[torch.Tensor]:
        spec = self.spec
        z = bundle.z
        if self.dense is not None:
            z = self.dense(z).view(z.shape[0], spec.channel_schedule[-1], *self.grid)
        skips = list(bundle.skips)
        if spec.u_shaped and len(skips) != spec.num_down:
            raise ValueError(f"expected {spec.num_down} skips, got {len(skips)}")
        if not spec.u_shaped and skips:
            raise ValueError("skips supplied to a decoder that is not U-shaped")
        h = z
        stages = [h]
        for i, (up, stage) in enumerate(zip(self.ups, self.up_stages)):
            h = up(h)
            if spec.u_shaped:
                h = self._fuse(i, h, skips.pop(), t)
            h = stage(h, t)
            stages.append(h)
        return stages

    def forward(self, bundle: LatentBundle, t: Optional[torch.Tensor] = None, collect_stages: bool = False):
        if not self.with_head:
            raise RuntimeError("decoder was built without a head; use decode_stages")
        stages = self.decode_stages(bundle, t)
        out = crop(self.patch(self.final(stages[-1], t)), bundle.pads)
        return (out, stages) if collect_stages else out
