"""Noise predictor: a four-level residual UNet conditioned on the structure
feature map and the current noise level.

The structure features are stepped down level by level with strided convs
and added elementwise to every residual block output at the matching
resolution; the noise level enters through a sinusoidal embedding of its
negative log, projected per block.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import _norm

GAMMA_EMBED_SCALE = 100.0


def gamma_embedding(
    gamma_t: float, dim: int, dtype: torch.dtype = torch.float32, device=None
) -> torch.Tensor:
    """Sinusoidal features of -log(gamma_t), spread across the range the
    cosine schedule produces.  Returns a (dim,) vector."""
    if not 0.0 < gamma_t <= 1.0:
        raise ValueError(f"gamma_t must lie in (0, 1], got {gamma_t}")
    t = -math.log(gamma_t) * GAMMA_EMBED_SCALE
    half = dim // 2
    freq = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype, device=device) / half
    )
    args = t * freq
    return torch.cat([args.sin(), args.cos()])


class ResidualBlock(nn.Module):
    """Norm-act-conv residual block with an additive noise-level bias after
    the first conv."""

    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, cout)
        self.norm2 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else None

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[None, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        identity = x if self.skip is None else self.skip(x)
        return h + identity


class NoisePredictor(nn.Module):
    """Predicts the per-step noise from (y_t, structure feature, gamma_t).

    With ``fuse_structure=False`` the structure pathway is dropped and the
    conditioning must be concatenated into the input channels instead (the
    plain-concatenation baseline).
    """

    def __init__(
        self,
        in_channels: int = 1,
        widths: Sequence[int] = (32, 64, 128, 256),
        structure_channels: int = 64,
        fuse_structure: bool = True,
        emb_dim: int = 128,
    ):
        super().__init__()
        if len(widths) != 4:
            raise ValueError(f"expected 4 level widths, got {len(widths)}")
        self.in_channels = in_channels
        self.widths = tuple(widths)
        self.fuse_structure = fuse_structure

        self.emb_dim = emb_dim
        self.emb_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        self.enc_blocks = nn.ModuleList(
            ResidualBlock(w, w, emb_dim) for w in widths
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
            for i in range(3)
        )
        self.mid_block = ResidualBlock(widths[3], widths[3], emb_dim)
        self.ups = nn.ModuleList(
            nn.Conv2d(widths[i + 1], widths[i], 3, padding=1) for i in range(3)
        )
        self.dec_blocks = nn.ModuleList(
            ResidualBlock(2 * widths[i], widths[i], emb_dim) for i in range(3)
        )
        self.out = nn.Sequential(
            _norm(widths[0]),
            nn.SiLU(),
            nn.Conv2d(widths[0], 1, 3, padding=1),
        )

        if fuse_structure:
            # One conv per level, chained: stride 1 into level 0, then a
            # strided conv for each halving.
            fusion = [nn.Conv2d(structure_channels, widths[0], 3, padding=1)]
            fusion += [
                nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1)
                for i in range(3)
            ]
            self.fusion_convs = nn.ModuleList(fusion)
        else:
            self.fusion_convs = None

    def structure_pyramid(self, x_e: torch.Tensor) -> list[torch.Tensor]:
        """Structure feature downsampled to each level's resolution; level l
        has spatial dims (H / 2^l, W / 2^l)."""
        if self.fusion_convs is None:
            raise RuntimeError("structure fusion is disabled for this predictor")
        maps = []
        h = x_e
        for conv in self.fusion_convs:
            h = conv(h)
            maps.append(h)
        return maps

    def forward(
        self,
        y_t: torch.Tensor,
        x_e: Optional[torch.Tensor],
        gamma_t: float,
    ) -> torch.Tensor:
        b, c, h, w = y_t.shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        if h % 8 or w % 8:
            raise ValueError(f"spatial dims {h}x{w} must be divisible by 8")
        if self.fuse_structure:
            if x_e is None:
                raise ValueError("structure feature required when fusion is enabled")
            if x_e.shape[0] != b or x_e.shape[-2:] != y_t.shape[-2:]:
                raise ValueError(
                    f"structure feature {tuple(x_e.shape)} does not match "
                    f"input {tuple(y_t.shape)}"
                )

        emb = self.emb_mlp(
            gamma_embedding(gamma_t, self.emb_dim, y_t.dtype, y_t.device)
        )
        fused = self.structure_pyramid(x_e) if self.fuse_structure else [None] * 4

        hid = self.stem(y_t)
        skips = []
        for lvl in range(4):
            hid = self.enc_blocks[lvl](hid, emb)
            if fused[lvl] is not None:
                hid = hid + fused[lvl]
            if lvl < 3:
                skips.append(hid)
                hid = self.downs[lvl](hid)
        hid = self.mid_block(hid, emb)
        if fused[3] is not None:
            hid = hid + fused[3]
        for lvl in (2, 1, 0):
            hid = self.ups[lvl](F.interpolate(hid, scale_factor=2, mode="nearest"))
            hid = torch.cat([hid, skips[lvl]], dim=1)
            hid = self.dec_blocks[lvl](hid, emb)
            if fused[lvl] is not None:
                hid = hid + fused[lvl]
        return self.out(hid)
