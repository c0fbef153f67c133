"""Building blocks shared by every encoder and decoder.

All blocks consume and produce channel-first grids ``(B, C, *spatial)`` with
two or three spatial axes, and accept an optional context vector ``t`` of
shape ``(B, ctx_dim)``. Sequence blocks move channels last internally.
"""
import math
from collections import namedtuple
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = [
    "ConvBlock",
    "ResBlock",
    "SwinBlock",
    "ViTBlock",
    "MambaBlock",
    "ComposedBlock",
    "WindowAttention",
    "MemoryGateError",
    "window_partition",
    "window_reverse",
    "shifted_window_mask",
    "relative_position_index",
    "cross_scan",
    "cross_merge",
    "ssm_scan",
    "discretize",
    "selective_scan",
    "make_block",
    "group_count",
    "BLOCK_KINDS",
]

BLOCK_KINDS = ("conv", "res_conv", "vit", "swin", "mamba", "res_swin", "res_mamba", "conv+msa")


class MemoryGateError(RuntimeError):
    """Raised when a global attention layer would exceed its configured token budget."""


def conv_nd(rank: int):
    try:
        return {2: nn.Conv2d, 3: nn.Conv3d}[rank]
    except KeyError:
        raise ValueError(f"spatial rank must be 2 or 3, got {rank}") from None


def conv_transpose_nd(rank: int):
    try:
        return {2: nn.ConvTranspose2d, 3: nn.ConvTranspose3d}[rank]
    except KeyError:
        raise ValueError(f"spatial rank must be 2 or 3, got {rank}") from None


def group_count(channels: int, max_groups: int = 8) -> int:
    """Largest divisor of ``channels`` not exceeding ``max_groups``."""
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def drop_path(x: torch.Tensor, p: float, training: bool, generator=None) -> torch.Tensor:
    if p == 0.0 or not training:
        return x
    keep = 1.0 - p
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = torch.empty(shape, dtype=x.dtype, device=x.device).bernoulli_(keep, generator=generator)
    return x * mask / keep


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop-path probability must lie in [0, 1), got {p}")
        self.p = p
        self.generator = None

    def forward(self, x):
        return drop_path(x, self.p, self.training, self.generator)

    def extra_repr(self):
        return f"p={self.p}"


class GateBias(nn.Module):
    """Context modulation ``out * Gate(t) + Bias(t)``.

    Starts close to the identity (gate bias one, bias-map bias zero, small
    random weights). Exactly-zero weights would make the identity exact but
    would also cut the gradient to everything upstream of ``t``.
    """

    def __init__(self, ctx_dim: int, channels: int):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.gate = nn.Linear(ctx_dim, channels)
        self.bias = nn.Linear(ctx_dim, channels)
        nn.init.normal_(self.gate.weight, std=0.02)
        nn.init.ones_(self.gate.bias)
        nn.init.normal_(self.bias.weight, std=0.02)
        nn.init.zeros_(self.bias.bias)

    def forward(self, x, t):
        shape = t.shape[:1] + (-1,) + (1,) * (x.ndim - 2)
        return x * self.gate(t).view(shape) + self.bias(t).view(shape)


def _check_context(module: Optional[nn.Module], t: Optional[torch.Tensor], ctx_dim: Optional[int]):
    if t is None:
        return False
    if module is None:
        raise ValueError("context vector supplied to a block built without context support")
    if t.ndim != 2 or t.shape[1] != ctx_dim:
        raise ValueError(f"context width mismatch: expected (B, {ctx_dim}), got {tuple(t.shape)}")
    return True


def _apply_context(module, x, t, ctx_dim):
    if _check_context(module, t, ctx_dim):
        return module(x, t)
    return x


def _check_channels(x: torch.Tensor, channels: int, rank: int):
    if x.ndim != rank + 2:
        raise ValueError(f"expected a ({rank}D) grid with {rank + 2} dims, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ValueError(f"channel mismatch: block expects {channels}, got {x.shape[1]}")


class ConvBlock(nn.Module):
    """Convolution, group norm and ReLU, with optional gate-bias context."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rank: int = 2,
        kernel_size: int = 3,
        stride: int = 1,
        padding: Optional[int] = None,
        activation: bool = True,
        ctx_dim: Optional[int] = None,
    ):
        super().__init__()
        if padding is None:
            padding = kernel_size // 2
        self.rank = rank
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.ctx_dim = ctx_dim
        self.conv = conv_nd(rank)(in_channels, out_channels, kernel_size, stride, padding)
        self.norm = nn.GroupNorm(group_count(out_channels), out_channels)
        self.act = nn.ReLU() if activation else nn.Identity()
        self.context = GateBias(ctx_dim, out_channels) if ctx_dim else None

    def forward(self, x, t=None):
        _check_channels(x, self.in_channels, self.rank)
        out = self.act(self.norm(self.conv(x)))
        return _apply_context(self.context, out, t, self.ctx_dim)


class ResBlock(nn.Module):
    """Residual wrapper ``ReLU(x + F2(F1(x) + Proj(t)))`` around any block kind.

    The second inner block is built without activation.
    """

    def __init__(self, inner: str, channels: int, rank: int = 2, ctx_dim: Optional[int] = None, **block_kwargs):
        super().__init__()
        if inner not in ("conv", "swin", "mamba", "vit"):
            raise ValueError(f"unsupported residual inner block {inner!r}")
        self.inner = inner
        self.channels = channels
        self.rank = rank
        self.ctx_dim = ctx_dim
        self.f1 = make_block(inner, channels, channels, rank, **block_kwargs)
        second = dict(block_kwargs)
        if inner == "conv":
            second["activation"] = False
        elif inner == "swin":
            # keep the shifted/non-shifted alternation inside the pair
            w = second.get("window", 8)
            second["shift"] = 0 if second.get("shift", 0) else w // 2
        self.f2 = make_block(inner, channels, channels, rank, **second)
        self.proj = nn.Linear(ctx_dim, channels) if ctx_dim else None

    def forward(self, x, t=None):
        _check_channels(x, self.channels, self.rank)
        h = self.f1(x)
        if _check_context(self.proj, t, self.ctx_dim):
            h = h + self.proj(t).view(t.shape[0], -1, *(1,) * self.rank)
        return F.relu(x + self.f2(h))


# ---------------------------------------------------------------------------
# windowed attention


WindowLayout = namedtuple("WindowLayout", "dims padded pads window shift")


def _as_tuple(v, rank) -> Tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * rank
    v = tuple(int(i) for i in v)
    if len(v) != rank:
        raise ValueError(f"expected {rank} values, got {v}")
    return v


def window_partition(x: torch.Tensor, window, shift=0):
    """Split a channel-last grid ``(B, *dims, C)`` into windows.

    Each axis is zero-padded symmetrically to a multiple of its window, then
    cyclically shifted by ``-shift``. Returns ``(windows, layout)`` where
    ``windows`` has shape ``(B * num_windows, prod(window), C)``.
    """
    B, *dims, C = x.shape
    rank = len(dims)
    window = _as_tuple(window, rank)
    shift = _as_tuple(shift, rank)
    for d, w, s in zip(dims, window, shift):
        if w < 1:
            raise ValueError(f"window size must be positive, got {window}")
        if w > d:
            raise ValueError(f"window {window} larger than input {tuple(dims)}")
        if not 0 <= s < w:
            raise ValueError(f"shift must satisfy 0 <= shift < window, got shift {shift} window {window}")
    padded = tuple(-(-d // w) * w for d, w in zip(dims, window))
    pads = tuple(((p - d) // 2, p - d - (p - d) // 2) for d, p in zip(dims, padded))
    if any(sum(p) for p in pads):
        flat = [0, 0]
        for lo, hi in reversed(pads):
            flat += [lo, hi]
        x = F.pad(x, flat)
    if any(shift):
        x = torch.roll(x, shifts=[-s for s in shift], dims=list(range(1, rank + 1)))
    counts = [p // w for p, w in zip(padded, window)]
    view = [B]
    for n, w in zip(counts, window):
        view += [n, w]
    x = x.reshape(*view, C)
    perm = [0] + [1 + 2 * i for i in range(rank)] + [2 + 2 * i for i in range(rank)] + [2 * rank + 1]
    windows = x.permute(*perm).reshape(-1, math.prod(window), C)
    return windows, WindowLayout(tuple(dims), padded, pads, window, shift)


def window_reverse(windows: torch.Tensor, layout: WindowLayout) -> torch.Tensor:
    """Inverse of :func:`window_partition`; returns ``(B, *dims, C)``."""
    rank = len(layout.dims)
    C = windows.shape[-1]
    counts = [p // w for p, w in zip(layout.padded, layout.window)]
    x = windows.reshape(-1, *counts, *layout.window, C)
    perm = [0]
    for i in range(rank):
        perm += [1 + i, 1 + rank + i]
    perm.append(2 * rank + 1)
    x = x.permute(*perm).reshape(-1, *layout.padded, C)
    if any(layout.shift):
        x = torch.roll(x, shifts=list(layout.shift), dims=list(range(1, rank + 1)))
    if any(sum(p) for p in layout.pads):
        x = x[(slice(None),) + tuple(slice(lo, lo + d) for (lo, _), d in zip(layout.pads, layout.dims))]
    return x


def shifted_window_mask(layout: WindowLayout, device=None) -> Optional[torch.Tensor]:
    """Additive ``(num_windows, N, N)`` mask for padded and/or shifted windows.

    A query may attend to a key only when both come from the same contiguous
    region before the cyclic shift and the key is not padding. Padding queries
    keep attention to themselves so that no row is fully masked.
    """
    if not any(layout.shift) and not any(sum(p) for p in layout.pads):
        return None
    rank = len(layout.dims)
    valid = torch.zeros(layout.padded, dtype=torch.bool, device=device)
    valid[tuple(slice(lo, lo + d) for (lo, _), d in zip(layout.pads, layout.dims))] = True
    label = torch.zeros(layout.padded, dtype=torch.long, device=device)
    for axis, s in enumerate(layout.shift):
        if s:
            wrapped = (torch.arange(layout.padded[axis], device=device) < s).long() << axis
            label += wrapped.view([-1 if a == axis else 1 for a in range(rank)])
    stacked = torch.stack([valid.long(), label], dim=-1).unsqueeze(0)
    # route through the same shift/partition path as the data (no padding needed here)
    if any(layout.shift):
        stacked = torch.roll(stacked, shifts=[-s for s in layout.shift], dims=list(range(1, rank + 1)))
    counts = [p // w for p, w in zip(layout.padded, layout.window)]
    view = [1]
    for n, w in zip(counts, layout.window):
        view += [n, w]
    perm = [0] + [1 + 2 * i for i in range(rank)] + [2 + 2 * i for i in range(rank)] + [2 * rank + 1]
    win = stacked.reshape(*view, 2).permute(*perm).reshape(-1, math.prod(layout.window), 2)
    key_valid = win[..., 0].bool()
    lab = win[..., 1]
    allowed = (lab[:, :, None] == lab[:, None, :]) & key_valid[:, None, :]
    allowed |= torch.eye(allowed.shape[-1], dtype=torch.bool, device=device)
    mask = torch.zeros(allowed.shape, device=device)
    return mask.masked_fill(~allowed, float("-inf"))


def relative_position_index(window: Sequence[int], table_window: Optional[Sequence[int]] = None) -> torch.Tensor:
    """Index into a relative-position table of size ``prod(2 * table_window - 1)``.

    ``window`` may be smaller than ``table_window`` (clamped windows reuse the
    central part of the table).
    """
    window = tuple(window)
    table_window = tuple(table_window or window)
    coords = torch.stack(torch.meshgrid(*[torch.arange(w) for w in window], indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    idx = torch.zeros(rel.shape[:2], dtype=torch.long)
    for a, tw in enumerate(table_window):
        idx = idx * (2 * tw - 1) + rel[..., a] + (tw - 1)
    return idx


class WindowAttention(nn.Module):
    """Multi-head self-attention within windows, with optional relative position bias."""

    def __init__(self, dim: int, num_heads: int, window: Optional[Sequence[int]] = None, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"embedding dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.window = tuple(window) if window is not None else None
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        if self.window is not None:
            size = math.prod(2 * w - 1 for w in self.window)
            self.relative_position_bias_table = nn.Parameter(torch.zeros(size, num_heads))
            nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        else:
            self.register_parameter("relative_position_bias_table", None)
        self._index_cache = {}

    def _bias(self, window):
        key = tuple(window)
        if key not in self._index_cache:
            self._index_cache[key] = relative_position_index(key, self.window)
        idx = self._index_cache[key].to(self.relative_position_bias_table.device)
        n = idx.shape[0]
        return self.relative_position_bias_table[idx.view(-1)].view(n, n, -1).permute(2, 0, 1)

    def forward(self, windows: torch.Tensor, mask: Optional[torch.Tensor] = None, window=None):
        Bw, N, C = windows.shape
        qkv = self.qkv(windows).view(Bw, N, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn_mask = None
        if self.relative_position_bias_table is not None:
            attn_mask = self._bias(window if window is not None else self.window)  # (heads, N, N)
        if mask is not None:
            nW = mask.shape[0]
            m = mask.to(q.dtype).unsqueeze(1)  # (nW, 1, N, N)
            if attn_mask is not None:
                m = m + attn_mask
            q = q.view(Bw // nW, nW, self.num_heads, N, self.head_dim)
            k = k.view_as(q)
            v = v.view_as(q)
            attn_mask = m
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        out = out.reshape(Bw, self.num_heads, N, self.head_dim).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = max(1, int(dim * ratio))
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))


def _default_heads(dim: int, head_dim: int) -> int:
    return max(1, dim // head_dim)


class SwinBlock(nn.Module):
    """Shifted-window transformer block; ``global_attention`` turns it into a ViT block.

    Windows larger than the incoming grid are clamped to the grid (and the
    shift dropped on that axis).
    """

    def __init__(
        self,
        dim: int,
        rank: int = 2,
        num_heads: Optional[int] = None,
        window=8,
        shift=0,
        mlp_ratio: float = 4.0,
        drop_path: float = 0.1,
        ctx_dim: Optional[int] = None,
        global_attention: bool = False,
        head_dim: int = 16,
        max_tokens: Optional[int] = None,
    ):
        super().__init__()
        self.dim = dim
        self.rank = rank
        self.global_attention = global_attention
        self.window = None if global_attention else _as_tuple(window, rank)
        self.shift = (0,) * rank if global_attention else _as_tuple(shift, rank)
        if self.window is not None and any(not 0 <= s < w for s, w in zip(self.shift, self.window)):
            raise ValueError(f"shift {self.shift} incompatible with window {self.window}")
        self.max_tokens = max_tokens
        self.ctx_dim = ctx_dim
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads or _default_heads(dim, head_dim), self.window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)
        self.context = GateBias(ctx_dim, dim) if ctx_dim else None

    def _attend(self, h):
        dims = h.shape[1:-1]
        if self.global_attention:
            tokens = math.prod(dims)
            if self.max_tokens is not None and tokens > self.max_tokens:
                raise MemoryGateError(
                    f"global attention over {tokens} tokens exceeds max_attention_tokens={self.max_tokens}"
                )
            window, shift = tuple(dims), (0,) * self.rank
        else:
            window = tuple(min(w, d) for w, d in zip(self.window, dims))
            shift = tuple(s if d > w else 0 for s, w, d in zip(self.shift, self.window, dims))
        windows, layout = window_partition(h, window, shift)
        mask = shifted_window_mask(layout, device=h.device)
        out = self.attn(windows, mask, window if self.window is not None else None)
        return window_reverse(out, layout)

    def forward(self, x, t=None):
        _check_channels(x, self.dim, self.rank)
        h = x.movedim(1, -1)
        h = h + self.drop_path(self._attend(self.norm1(h)))
        h = h + self.drop_path(self.mlp(self.norm2(h)))
        return _apply_context(self.context, h.movedim(-1, 1), t, self.ctx_dim)


class ViTBlock(SwinBlock):
    def __init__(self, dim: int, rank: int = 2, **kwargs):
        kwargs.pop("window", None)
        kwargs.pop("shift", None)
        super().__init__(dim, rank, global_attention=True, **kwargs)


# ---------------------------------------------------------------------------
# selective state space


def _scan_orders(rank: int) -> List[Tuple[int, ...]]:
    # cyclic rolls of the axis order: each axis is innermost exactly once
    axes = list(range(rank))
    return [tuple(axes[-i:] + axes[:-i]) if i else tuple(axes) for i in range(rank)]


def cross_scan(x: torch.Tensor) -> torch.Tensor:
    """Flatten ``(B, C, *dims)`` into ``2 * rank`` sequences ``(B, K, C, L)``.

    The first ``rank`` sequences are axis-major traversals (each spatial axis
    innermost once); the remaining ones are their reversals.
    """
    rank = x.ndim - 2
    seqs = [x.permute(0, 1, *(2 + a for a in order)).flatten(2) for order in _scan_orders(rank)]
    seqs += [s.flip(-1) for s in seqs]
    return torch.stack(seqs, dim=1)


def cross_merge(seqs: torch.Tensor, dims: Sequence[int]) -> torch.Tensor:
    """Average the ``2 * rank`` scans ``(B, K, C, L)`` back onto a ``(B, C, *dims)`` grid."""
    dims = tuple(dims)
    rank = len(dims)
    B, K, C, L = seqs.shape
    if K != 2 * rank:
        raise ValueError(f"expected {2 * rank} sequences for a {rank}D grid, got {K}")
    if L != math.prod(dims):
        raise ValueError(f"sequence length {L} does not match grid {dims}")
    grids = []
    for k in range(K):
        order = _scan_orders(rank)[k % rank]
        s = seqs[:, k]
        if k >= rank:
            s = s.flip(-1)
        g = s.reshape(B, C, *(dims[a] for a in order))
        inverse = [0, 1] + [2 + order.index(a) for a in range(rank)]
        grids.append(g.permute(*inverse))
    stacked = torch.stack(grids, dim=0)
    # anchor-plus-deviation form: identical inputs merge back bit-exactly
    return stacked[0] + (stacked - stacked[0]).sum(0) / K


def _scan_(a: torch.Tensor, h: torch.Tensor, reverse: bool = False) -> torch.Tensor:
    """In place: turns ``h`` (holding ``b``) into ``h[t] = a[t] * h[t-1] + h[t]`` along dim 0.

    With ``reverse`` the recurrence runs backwards and reads ``a[t + 1]``, which
    is the adjoint of the forward scan.
    """
    L = h.shape[0]
    if reverse:
        for i in range(L - 2, -1, -1):
            h[i].addcmul_(a[i + 1], h[i + 1])
    else:
        for i in range(1, L):
            h[i].addcmul_(a[i], h[i - 1])
    return h


class _Recurrence(torch.autograd.Function):
    """First-order linear recurrence along dim 0 with a reverse-scan backward."""

    @staticmethod
    def forward(ctx, a, b):
        h = _scan_(a, b.clone())
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    def backward(ctx, grad_h):
        a, h = ctx.saved_tensors
        grad_b = _scan_(a, grad_h.clone(), reverse=True)
        h_prev = torch.cat([torch.zeros_like(h[:1]), h[:-1]], dim=0)
        return grad_b * h_prev, grad_b


def _expm1_ratio(z: torch.Tensor) -> torch.Tensor:
    """``(exp(z) - 1) / z`` with the removable singularity at 0 filled in."""
    small = z.abs() < 1e-6
    safe = torch.where(small, torch.ones_like(z), z)
    return torch.where(small, 1.0 + 0.5 * z, torch.expm1(safe) / safe)


def discretize(delta: torch.Tensor, A: torch.Tensor, B: torch.Tensor):
    """Zero-order hold: ``A_bar = exp(delta A)``, ``B_bar = (exp(delta A) - 1) / A * B``.

    Shapes: ``delta (b, L, d)``, ``A (d, N)`` or ``(b, d, N)``, ``B (b, L, N)``;
    both results are ``(b, L, d, N)``.
    """
    if A.ndim == 2:
        A = A.unsqueeze(0)
    dA = delta.unsqueeze(-1) * A.unsqueeze(1)
    return torch.exp(dA), (delta.unsqueeze(-1) * _expm1_ratio(dA)) * B.unsqueeze(2)


def selective_scan(x: torch.Tensor, a_bar: torch.Tensor, b_bar: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    """``h[t] = a_bar[t] * h[t-1] + b_bar[t] * x[t]``, ``y[t] = C[t] . h[t]`` with ``h[-1] = 0``.

    ``x (b, L, d)``, ``a_bar``/``b_bar (b, L, d, N)``, ``C (b, L, N)``.
    """
    if a_bar.shape != b_bar.shape or a_bar.shape[:3] != x.shape:
        raise ValueError("a_bar and b_bar must be (batch, L, d, N) matching x")
    bx = b_bar * x.unsqueeze(-1)
    h = _Recurrence.apply(a_bar.transpose(0, 1).contiguous(), bx.transpose(0, 1).contiguous())
    return torch.einsum("lbdn,bln->bld", h, C)


class _FusedScan(torch.autograd.Function):
    """Discretize, scan and read out in one op, time-major, for nonzero ``A``.

    Writing ``B_bar x = expm1(delta A) * s`` with ``s = x B / A`` avoids the
    small-argument branch of the ZOH ratio. Large intermediates are reused in
    place since allocation dominates on CPU.
    """

    @staticmethod
    def forward(ctx, u, delta, A, B, C):
        h = delta.unsqueeze(-1) * A
        a = torch.exp(h)
        s = (u.unsqueeze(-1) / A).mul_(B.unsqueeze(2))
        _scan_(a, h.expm1_().mul_(s))
        ctx.save_for_backward(u, delta, A, B, C, a, s, h)
        return torch.einsum("lbdn,lbn->lbd", h, C)

    @staticmethod
    def backward(ctx, gy):
        u, delta, A, B, C, a, s, h = ctx.saved_tensors
        g_bx = _scan_(a, gy.unsqueeze(-1) * C.unsqueeze(2), reverse=True)
        q = torch.expm1(delta.unsqueeze(-1) * A).mul_(g_bx).div_(A)  # dL/ds / A
        g_u = torch.einsum("lbdn,lbn->lbd", q, B)
        g_B = torch.einsum("lbdn,lbd->lbn", q, u)
        g_A = -(q.mul_(s)).sum(0)
        g_dA = s.clone()
        g_dA[1:] += h[:-1]
        g_dA.mul_(g_bx).mul_(a)
        g_A += torch.einsum("lbdn,lbd->bdn", g_dA, delta)
        g_C = torch.einsum("lbdn,lbd->lbn", h, gy)
        return g_u, torch.einsum("lbdn,bdn->lbd", g_dA, A), g_A, g_B, g_C


def ssm_scan(u, delta, A, B, C, D=None):
    """Selective scan with zero-order-hold discretization of a diagonal state matrix.

    Args:
        u: inputs ``(batch, L, d)``.
        delta: positive step sizes ``(batch, L, d)``.
        A: diagonal state matrix ``(d, N)`` or ``(batch, d, N)``.
        B, C: input/output maps ``(batch, L, N)``.
        D: optional skip ``(d,)`` or ``(batch, d)``.

    Returns ``y`` with ``y[t] = C[t] . h[t] (+ D * u[t])`` where
    ``h[t] = exp(delta A) h[t-1] + (exp(delta A) - 1) / A * B[t] u[t]``.
    """
    if u.ndim != 3 or delta.shape != u.shape:
        raise ValueError("u and delta must both have shape (batch, L, d)")
    if u.shape[1] < 1:
        raise ValueError("sequence length must be at least 1")
    for name, p in (("A", A), ("B", B), ("C", C), ("delta", delta)):
        if not torch.isfinite(p).all():
            raise ValueError(f"non-finite SSM parameter {name}")
    if A.ndim == 2:
        A = A.unsqueeze(0).expand(u.shape[0], *A.shape)
    if bool((A != 0).all()):
        tm = lambda z: z.transpose(0, 1).contiguous()  # noqa: E731
        y = _FusedScan.apply(tm(u), tm(delta), A.contiguous(), tm(B), tm(C)).transpose(0, 1)
    else:
        a_bar, b_bar = discretize(delta, A, B)
        y = selective_scan(u, a_bar, b_bar, C)
    if D is not None:
        y = y + u * (D if D.ndim == 1 else D.unsqueeze(1))
    return y


class MambaBlock(nn.Module):
    """Cross-scan selective state-space block.

    ``w = Proj(LN(x))``; ``z = Drop(Proj^-1(SSM(w) * MLP(w))) + x``;
    ``out = Drop(MLP(z)) + z``. The SSM path runs a depthwise convolution,
    ``2 * rank`` directional scans with per-direction parameters and a mean
    merge.
    """

    def __init__(
        self,
        dim: int,
        rank: int = 2,
        d_state: int = 16,
        expand: int = 2,
        dt_rank: Optional[int] = None,
        d_conv: int = 3,
        mlp_ratio: float = 4.0,
        drop_path: float = 0.1,
        ctx_dim: Optional[int] = None,
        dt_min: float = 1e-3,
        dt_max: float = 0.1,
    ):
        super().__init__()
        if d_state < 1:
            raise ValueError("d_state must be >= 1")
        self.dim = dim
        self.rank = rank
        self.d_state = d_state
        self.inner = inner = expand * dim
        self.dt_rank = dt_rank = dt_rank or math.ceil(dim / 16)
        self.directions = K = 2 * rank
        self.ctx_dim = ctx_dim

        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, inner)
        self.gate = nn.Sequential(nn.Linear(inner, inner), nn.SiLU())
        self.dwconv = conv_nd(rank)(inner, inner, d_conv, padding=d_conv // 2, groups=inner)

        self.x_proj_weight = nn.Parameter(torch.empty(K, dt_rank + 2 * d_state, inner))
        nn.init.uniform_(self.x_proj_weight, -inner ** -0.5, inner ** -0.5)
        self.dt_proj_weight = nn.Parameter(torch.empty(K, inner, dt_rank))
        nn.init.uniform_(self.dt_proj_weight, -dt_rank ** -0.5, dt_rank ** -0.5)
        dt = torch.exp(torch.rand(K, inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
        self.dt_proj_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))  # inverse softplus
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(K, inner, 1))
        self.Ds = nn.Parameter(torch.ones(K, inner))

        self.out_norm = nn.LayerNorm(inner)
        self.out_proj = nn.Linear(inner, dim)
        self.mlp = Mlp(dim, mlp_ratio)
        self.drop_path = DropPath(drop_path)
        self.context = GateBias(ctx_dim, dim) if ctx_dim else None

    def ssm(self, u: torch.Tensor) -> torch.Tensor:
        """Cross-scan, selective scan per direction, mean merge. ``u``: ``(B, inner, *dims)``."""
        Bsz, D, *dims = u.shape
        K, N, R = self.directions, self.d_state, self.dt_rank
        xs = cross_scan(u)  # (B, K, D, L)
        L = xs.shape[-1]
        x_dbl = torch.einsum("bkdl,kcd->bkcl", xs, self.x_proj_weight)
        dts, Bs, Cs = torch.split(x_dbl, [R, N, N], dim=2)
        dts = torch.einsum("bkrl,kdr->bkdl", dts, self.dt_proj_weight)
        delta = F.softplus(dts + self.dt_proj_bias[None, :, :, None])
        A = -torch.exp(self.A_log)  # (K, D, N)
        y = ssm_scan(
            xs.reshape(Bsz * K, D, L).transpose(1, 2),
            delta.reshape(Bsz * K, D, L).transpose(1, 2),
            A.unsqueeze(0).expand(Bsz, K, D, N).reshape(Bsz * K, D, N),
            Bs.reshape(Bsz * K, N, L).transpose(1, 2),
            Cs.reshape(Bsz * K, N, L).transpose(1, 2),
            self.Ds.unsqueeze(0).expand(Bsz, K, D).reshape(Bsz * K, D),
        )
        return cross_merge(y.transpose(1, 2).reshape(Bsz, K, D, L), dims)

    def forward(self, x, t=None):
        _check_channels(x, self.dim, self.rank)
        h = x.movedim(1, -1)
        w = self.in_proj(self.norm(h))
        u = F.silu(self.dwconv(w.movedim(-1, 1)))
        y = self.out_norm(self.ssm(u).movedim(1, -1))
        z = h + self.drop_path(self.out_proj(y * self.gate(w)))
        out = z + self.drop_path(self.mlp(z))
        return _apply_context(self.context, out.movedim(-1, 1), t, self.ctx_dim)


class ComposedBlock(nn.Module):
    """Blocks applied in sequence, each receiving the same context."""

    def __init__(self, *blocks: nn.Module):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, t=None):
        for b in self.blocks:
            x = b(x, t)
        return x


_CONV_KEYS = {"kernel_size", "stride", "padding", "activation"}
_SEQ_KEYS = {"drop_path", "mlp_ratio", "ctx_dim"}
_ATTN_KEYS = _SEQ_KEYS | {"num_heads", "head_dim", "max_tokens"}
_SWIN_KEYS = _ATTN_KEYS | {"window", "shift"}
_MAMBA_KEYS = _SEQ_KEYS | {"d_state", "expand", "dt_rank", "d_conv"}


def _pick(kwargs, keys):
    return {k: v for k, v in kwargs.items() if k in keys and v is not None}


def make_block(kind: str, in_channels: int, out_channels: int, rank: int = 2, **kwargs) -> nn.Module:
    """Build one building block of ``kind``.

    Unknown keyword arguments for a given kind are ignored so that a single
    option bag can configure every backbone.
    """
    if kind == "conv":
        return ConvBlock(in_channels, out_channels, rank, ctx_dim=kwargs.get("ctx_dim"), **_pick(kwargs, _CONV_KEYS))
    if in_channels != out_channels:
        raise ValueError(f"{kind} blocks preserve channel count; got {in_channels} -> {out_channels}")
    if kind == "swin":
        return SwinBlock(in_channels, rank, **_pick(kwargs, _SWIN_KEYS))
    if kind == "vit":
        return ViTBlock(in_channels, rank, **_pick(kwargs, _ATTN_KEYS))
    if kind == "mamba":
        return MambaBlock(in_channels, rank, **_pick(kwargs, _MAMBA_KEYS))
    if kind in ("res_conv", "res_swin", "res_mamba"):
        inner_kwargs = {k: v for k, v in kwargs.items() if k != "ctx_dim"}
        return ResBlock(kind[4:], in_channels, rank, ctx_dim=kwargs.get("ctx_dim"), **inner_kwargs)
    if kind == "conv+msa":
        return ComposedBlock(
            ConvBlock(in_channels, in_channels, rank, ctx_dim=kwargs.get("ctx_dim")),
            ViTBlock(in_channels, rank, **_pick(kwargs, _ATTN_KEYS)),
        )
    raise ValueError(f"unknown block kind {kind!r}; expected one of {BLOCK_KINDS}")
