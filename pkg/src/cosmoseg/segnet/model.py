"""3D U-Net with a configurable number of downsampling stages.

Plain encoder-decoder: two conv-norm-act blocks per level, max-pool
downsampling, transposed-conv upsampling, skip concatenation.  Channels
double per stage up to a cap.  Optional deep supervision adds auxiliary
1x1x1 heads on the coarser decoder levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from ..errors import IncompatiblePatch


@dataclass
class UNet3DConfig:
    num_downsamplings: int = 5
    base_channels: int = 32
    max_channels: int = 320
    num_classes: int = 4
    norm: str = "instance"
    nonlin: str = "leakyrelu"
    deep_supervision: bool = False

    def __post_init__(self):
        if self.num_downsamplings < 1:
            raise ValueError("num_downsamplings must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")

    def channels(self) -> list[int]:
        return [
            min(self.base_channels * 2**i, self.max_channels)
            for i in range(self.num_downsamplings + 1)
        ]


def bottleneck_shape(cfg: UNet3DConfig, patch_size: tuple[int, int, int]) -> tuple[int, ...]:
    """Spatial extent at the deepest encoder level for a given patch."""
    validate_patch_size(cfg, patch_size)
    return tuple(p // 2**cfg.num_downsamplings for p in patch_size)


def validate_patch_size(cfg: UNet3DConfig, patch_size) -> None:
    div = 2**cfg.num_downsamplings
    if any(p % div != 0 or p < div for p in patch_size):
        raise IncompatiblePatch(
            f"patch {tuple(patch_size)} not divisible by 2^{cfg.num_downsamplings}"
        )


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm3d(channels, affine=True)
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    raise ValueError(f"unknown norm {kind!r}")


def _nonlin(kind: str) -> nn.Module:
    if kind == "leakyrelu":
        return nn.LeakyReLU(0.01, inplace=True)
    if kind == "relu":
        return nn.ReLU(inplace=True)
    raise ValueError(f"unknown nonlinearity {kind!r}")


class ConvBlock(nn.Module):
    """Two conv3x3x3 -> norm -> nonlinearity units."""

    def __init__(self, cin: int, cout: int, cfg: UNet3DConfig):
        super().__init__()
        layers = []
        for c_from, c_to in ((cin, cout), (cout, cout)):
            layers += [
                nn.Conv3d(c_from, c_to, kernel_size=3, padding=1),
                _norm(cfg.norm, c_to),
                _nonlin(cfg.nonlin),
            ]
        self.block = nn.Sequential(*layers)

    def forward(self, x):
        return self.block(x)


class UNet3D(nn.Module):
    def __init__(self, cfg: UNet3DConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.channels()
        self.encoders = nn.ModuleList()
        cin = 1
        for c in chs:
            self.encoders.append(ConvBlock(cin, c, cfg))
            cin = c
        self.pool = nn.MaxPool3d(2)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in range(cfg.num_downsamplings, 0, -1):
            self.upsamplers.append(
                nn.ConvTranspose3d(chs[i], chs[i - 1], kernel_size=2, stride=2)
            )
            self.decoders.append(ConvBlock(2 * chs[i - 1], chs[i - 1], cfg))
        self.head = nn.Conv3d(chs[0], cfg.num_classes, kernel_size=1)
        if cfg.deep_supervision:
            # one auxiliary head per decoder level except the full-resolution one
            self.aux_heads = nn.ModuleList(
                nn.Conv3d(chs[i - 1], cfg.num_classes, kernel_size=1)
                for i in range(cfg.num_downsamplings, 1, -1)
            )

    def forward(self, x):
        """(B, 1, D, H, W) -> (B, num_classes, D, H, W) raw scores.

        With deep supervision enabled, returns a list of score tensors from
        full resolution downward.
        """
        validate_patch_size(self.cfg, x.shape[2:])
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = self.pool(x)
        aux_scores = []
        for level, (up, dec) in enumerate(zip(self.upsamplers, self.decoders)):
            x = up(x)
            x = dec(torch.cat([x, skips[-1 - level]], dim=1))
            if self.cfg.deep_supervision and level < len(self.upsamplers) - 1:
                aux_scores.append(self.aux_heads[level](x))
        scores = self.head(x)
        if self.cfg.deep_supervision:
            return [scores] + aux_scores[::-1]
        return scores


def build_model(cfg: UNet3DConfig, patch_size=None) -> UNet3D:
    """Construct the network; validates patch compatibility when given."""
    if patch_size is not None:
        validate_patch_size(cfg, patch_size)
    return UNet3D(cfg)
