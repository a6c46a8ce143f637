"""Solar spatial encoder: stem, (downsample -> DCSM -> ST-SSM) stages, 2D conv tail.

Tensors inside the encoder use the layout ``[N, D, C, H, W]``: the feature axis
is the convolution channel axis and the image channel (wavelength) axis is the
3D-convolution depth axis. The history axis ``k`` is consumed by the stem.
"""

from __future__ import annotations

import torch
from torch import nn

from . import tensor_engine as te
from .config import SseConfig
from .s5 import SSMBlock


class Downsample(nn.Module):
    """Stride-2 spatial 3D convolution; channel axis and features preserved."""

    def __init__(self, dim):
        super().__init__()
        self.conv = te.Conv3d(dim, dim, 3, stride=(1, 2, 2), padding=1)

    def forward(self, h):
        if h.shape[-1] % 2 or h.shape[-2] % 2:
            raise ValueError(f"downsample needs even spatial dims, got {tuple(h.shape[-2:])}")
        return self.conv(h)


class DCSM(nn.Module):
    """Depth-wise channel selective module.

    Parallel 3D and per-frame 2D convolutions are summed into a fused map;
    a squeeze-style branch of 3D convolutions over the pooled descriptor
    yields sigmoid channel weights.
    """

    def __init__(self, dim, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.conv3d = te.Conv3d(dim, dim, 3, padding=1)
        self.conv2d = te.Conv2d(dim, dim, 3, padding=1)
        # descriptor is viewed as [N, C, D, 1, 1] so these mix image channels
        self.weight1 = te.Conv3d(channels, hidden, (3, 1, 1), padding=(1, 0, 0))
        self.weight2 = te.Conv3d(hidden, channels, (3, 1, 1), padding=(1, 0, 0))
        self.proj = te.Conv3d(dim, dim, 1)

    def fused(self, h):
        n, d, c, hh, ww = h.shape
        frames = h.transpose(1, 2).reshape(n * c, d, hh, ww)
        f2d = self.conv2d(frames).reshape(n, c, d, hh, ww).transpose(1, 2)
        return self.conv3d(h) + f2d

    def channel_weights(self, fused):
        desc = te.avg_pool_1x1(fused).transpose(1, 2)
        w = te.sigmoid(self.weight2(te.gelu(self.weight1(desc))))
        return w.transpose(1, 2)

    def forward(self, h):
        f = self.fused(h)
        return self.proj(f * self.channel_weights(f)) + h


class STSSM(nn.Module):
    """SSM block over the flattened (channel, height, width) sequence."""

    def __init__(self, dim, state=16, mlp_ratio=4):
        super().__init__()
        self.block = SSMBlock(dim, state, mlp_ratio)

    def forward(self, h):
        n, d, c, hh, ww = h.shape
        seq = h.reshape(n, d, c * hh * ww).transpose(1, 2)
        out = self.block(seq)
        return out.transpose(1, 2).reshape(n, d, c, hh, ww)


class SolarSpatialEncoder(nn.Module):
    def __init__(self, cfg: SseConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        s = cfg.stem_stride
        self.stem = te.Conv3d(cfg.history, cfg.dim, (1, 3, 3), stride=(1, s, s), padding=(0, 1, 1))
        self.stages = nn.ModuleList(
            nn.ModuleDict({
                "down": Downsample(cfg.dim),
                "dcsm": DCSM(cfg.dim, cfg.channels, cfg.dcsm_reduction),
                "st": STSSM(cfg.dim, cfg.state, cfg.mlp_ratio),
            })
            for _ in range(cfg.stages)
        )
        self.tail = nn.ModuleList(te.Conv2d(cfg.dim, cfg.dim, 3, stride=2, padding=1)
                                  for _ in range(cfg.final_convs))

    @property
    def seq_len(self) -> int:
        return self.cfg.seq_len

    def forward(self, x):
        """``x[N,k,C,H,W]`` (or unbatched ``[k,C,H,W]``) -> ``h_sse[N,L,D]``."""
        squeeze = x.dim() == 4
        if squeeze:
            x = x.unsqueeze(0)
        cfg = self.cfg
        expected = (cfg.history, cfg.channels, cfg.height, cfg.width)
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"encoder expects [N,{','.join(map(str, expected))}], got {tuple(x.shape)}")
        h = te.gelu(self.stem(x))
        for stage in self.stages:
            h = stage["st"](stage["dcsm"](stage["down"](h)))
        n, d, c, hh, ww = h.shape
        f = h.transpose(1, 2).reshape(n * c, d, hh, ww)
        for i, conv in enumerate(self.tail):
            f = conv(f)
            if i < len(self.tail) - 1:
                f = te.gelu(f)
        hf, wf = f.shape[-2:]
        out = f.reshape(n, c, d, hf * wf).permute(0, 1, 3, 2).reshape(n, c * hf * wf, d)
        return out[0] if squeeze else out
