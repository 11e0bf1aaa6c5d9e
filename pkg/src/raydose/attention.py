"""Attention across the slice axis of a contiguous axial window.

Each feature map in a (B, C, H, W) stack is one axial slice of the same
patient; attention treats every slice as a single token so slices with weak
local context (near the target boundary) can borrow from their neighbors.
"""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def slice_position_embedding(
    num_slices: int,
    channels: int,
    offset: int = 0,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> torch.Tensor:
    """Fixed sinusoidal embedding of absolute slice indices.

    Returns a (num_slices, channels) tensor, one vector per slice, every
    entry in [-1, 1].  The absolute index (offset + b) keeps the embedding
    consistent across windows of the same volume.
    """
    pos = torch.arange(offset, offset + num_slices, dtype=dtype, device=device)
    idx = torch.arange(channels, device=device)
    freq = torch.exp(-math.log(10000.0) * (2 * (idx // 2)).to(dtype) / max(channels, 1))
    angles = pos[:, None] * freq[None, :]
    return torch.where(idx % 2 == 0, angles.sin(), angles.cos())


def add_position_embedding(stack: torch.Tensor, slice_offset: int = 0) -> torch.Tensor:
    """Add the per-slice embedding, broadcast over the spatial dims."""
    emb = slice_position_embedding(
        stack.shape[0], stack.shape[1], slice_offset, stack.dtype, stack.device
    )
    return stack + emb[:, :, None, None]


def _slice_layer_norm(x: torch.Tensor) -> torch.Tensor:
    # Normalizes each slice over (C, H, W); no learnable affine so the block
    # stays resolution-independent.
    return F.layer_norm(x, x.shape[1:])


class SliceAttentionHead(nn.Module):
    """Single-head attention between slices, one token per slice.

    Queries and keys are channelwise projections of the spatially pooled
    stack (pool kernel ``pool``); values are projected at full resolution.
    The B x B attention matrix is row-stochastic and mixes whole slices.
    """

    def __init__(self, channels: int, pool: int = 4):
        super().__init__()
        if pool < 1:
            raise ValueError(f"pool must be >= 1, got {pool}")
        self.pool = pool
        self.q_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.k_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.v_proj = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, stack: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, c, h, w = stack.shape
        if h % self.pool or w % self.pool:
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by pool kernel {self.pool}"
            )
        pooled = F.avg_pool2d(stack, self.pool) if self.pool > 1 else stack
        q = self.q_proj(pooled).reshape(b, -1)  # (B, C*H*W/pool^2)
        k = self.k_proj(pooled).reshape(b, -1)
        v = self.v_proj(stack).reshape(b, -1)  # (B, C*H*W)
        logits = (q @ k.T) / math.sqrt(q.shape[1])
        attn = torch.softmax(logits, dim=1)  # (B, B), rows sum to 1
        out = (attn @ v).reshape(b, c, h, w)
        return out, attn


class MultiHeadSliceAttention(nn.Module):
    """Runs several slice-attention heads and projects the channel-wise
    concatenation of their outputs back to the input width.

    The per-head projections are fused into single convs with heads*C output
    channels (head h owns channel block [h*C, (h+1)*C)), which computes the
    same thing as independent heads with far fewer kernel launches.
    """

    def __init__(self, channels: int, heads: int = 4, pool: int = 4):
        super().__init__()
        if heads < 1:
            raise ValueError(f"heads must be >= 1, got {heads}")
        if pool < 1:
            raise ValueError(f"pool must be >= 1, got {pool}")
        self.channels = channels
        self.num_heads = heads
        self.pool = pool
        self.q_proj = nn.Conv2d(channels, heads * channels, 1, bias=False)
        self.k_proj = nn.Conv2d(channels, heads * channels, 1, bias=False)
        self.v_proj = nn.Conv2d(channels, heads * channels, 1, bias=False)
        self.out_proj = nn.Conv2d(heads * channels, channels, 1, bias=False)

    def forward(
        self, stack: torch.Tensor, attn_sink: Optional[list] = None
    ) -> torch.Tensor:
        b, c, h, w = stack.shape
        if h % self.pool or w % self.pool:
            raise ValueError(
                f"spatial dims {h}x{w} not divisible by pool kernel {self.pool}"
            )
        pooled = F.avg_pool2d(stack, self.pool) if self.pool > 1 else stack
        nh = self.num_heads
        q = self.q_proj(pooled).reshape(b, nh, -1)  # (B, H, C*h*w/pool^2)
        k = self.k_proj(pooled).reshape(b, nh, -1)
        v = self.v_proj(stack).reshape(b, nh, -1)  # (B, H, C*h*w)
        logits = torch.einsum("ihd,jhd->hij", q, k) / math.sqrt(q.shape[-1])
        attn = torch.softmax(logits, dim=2)  # (H, B, B), rows sum to 1
        if attn_sink is not None:
            attn_sink.extend(attn.unbind(0))
        out = torch.einsum("hij,jhd->ihd", attn, v)  # (B, H, C*h*w)
        return self.out_proj(out.reshape(b, nh * c, h, w))


class InterSliceBlock(nn.Module):
    """Slice-axis attention followed by two normalized channelwise
    feed-forward updates with residual connections.

    A fixed sinusoidal position embedding marks each slice's absolute
    location in the source volume; disable it to make the block equivariant
    to slice permutations.
    """

    def __init__(
        self,
        channels: int,
        heads: int = 4,
        pool: int = 4,
        position_embedding: bool = True,
    ):
        super().__init__()
        self.position_embedding = position_embedding
        self.attn = MultiHeadSliceAttention(channels, heads, pool)
        self.ff1 = nn.Conv2d(channels, channels, 1)
        self.ff2 = nn.Conv2d(channels, channels, 1)

    def forward(
        self,
        stack: torch.Tensor,
        slice_offset: int = 0,
        attn_sink: Optional[list] = None,
    ) -> torch.Tensor:
        inter = stack
        if self.position_embedding:
            inter = add_position_embedding(stack, slice_offset)
        mixed = self.attn(inter, attn_sink)
        temp = _slice_layer_norm(F.gelu(self.ff1(mixed)) + inter)
        return _slice_layer_norm(F.gelu(self.ff2(temp)) + temp)
