"""Structure encoder: anatomy window in, conditioning feature map out.

A residual trunk of four stages (stages 2-4 halve the resolution) with two
inter-slice attention blocks after every stage, followed by top-down
aggregation of the four pyramid levels back to full resolution.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import InterSliceBlock


def _num_groups(channels: int) -> int:
    for g in (8, 4, 2):
        if channels % g == 0:
            return g
    return 1


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_num_groups(channels), channels)


class ResidualUnit(nn.Module):
    """Two 3x3 convs with a skip connection; stride applies to the first
    conv (and a 1x1 projection on the skip when shape changes)."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        identity = x if self.skip is None else self.skip(x)
        return F.relu(h + identity)


class StructureEncoder(nn.Module):
    """Encodes a (B, 2+o, H, W) anatomy window into (B, C0, H, W) features.

    B contiguous axial slices travel together so the inter-slice blocks can
    exchange information along the slice axis; set ``inter_slice=False`` to
    process slices independently.
    """

    def __init__(
        self,
        in_channels: int = 6,
        widths: Sequence[int] = (32, 64, 128, 256),
        feature_channels: int = 64,
        heads: int = 4,
        pool: int = 4,
        inter_slice: bool = True,
        position_embedding: bool = True,
    ):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"expected 4 stage widths, got {len(widths)}")
        self.in_channels = in_channels
        self.feature_channels = feature_channels
        self.pool = pool
        self.inter_slice = inter_slice

        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], 3, padding=1),
            _norm(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = widths[0]
        for i, w in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages.append(
                nn.Sequential(ResidualUnit(prev, w, stride), ResidualUnit(w, w))
            )
            prev = w
        self.stages = nn.ModuleList(stages)

        if inter_slice:
            self.blocks = nn.ModuleList(
                nn.ModuleList(
                    InterSliceBlock(w, heads, pool, position_embedding)
                    for _ in range(2)
                )
                for w in widths
            )
        else:
            self.blocks = None

        # Top-down merge: deeper level is upsampled x2 (nearest + 3x3 conv),
        # matched to the shallower width by a 1x1 conv, then added.
        self.up_smooth = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i], 3, padding=1) for i in (1, 2, 3)
        )
        self.lateral = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i - 1], 1) for i in (1, 2, 3)
        )
        self.level_proj = nn.ModuleList(
            nn.Conv2d(w, feature_channels, 1) for w in widths
        )
        self.fuse = nn.Conv2d(4 * feature_channels, feature_channels, 3, padding=1)

    def forward(
        self,
        x: torch.Tensor,
        slice_offset: int = 0,
        attn_sink: Optional[dict] = None,
    ) -> torch.Tensor:
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {c}")
        if h % 8 or w % 8:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by 8")
        if self.inter_slice and ((h // 8) % self.pool or (w // 8) % self.pool):
            raise ValueError(
                f"deepest stage dims {h // 8}x{w // 8} not divisible by pool "
                f"kernel {self.pool}"
            )

        feats = []
        hid = self.stem(x)
        for i, stage in enumerate(self.stages):
            hid = stage(hid)
            if self.blocks is not None:
                for j, block in enumerate(self.blocks[i]):
                    sink = None
                    if attn_sink is not None:
                        sink = attn_sink.setdefault((i, j), [])
                    hid = block(hid, slice_offset, sink)
            feats.append(hid)

        merged = [None, None, None, feats[3]]
        for i in (3, 2, 1):
            up = F.interpolate(merged[i], scale_factor=2, mode="nearest")
            up = self.up_smooth[i - 1](up)
            merged[i - 1] = feats[i - 1] + self.lateral[i - 1](up)

        levels = []
        for i in range(4):
            lvl = self.level_proj[i](merged[i])
            if i > 0:
                lvl = F.interpolate(lvl, scale_factor=2**i, mode="nearest")
            levels.append(lvl)
        return self.fuse(torch.cat(levels, dim=1))
