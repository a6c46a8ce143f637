"""Long-range temporal SSM, fusion head and the assembled forecaster."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from . import tensor_engine as te
from .config import RunConfig
from .encoder import SolarSpatialEncoder
from .errors import ConfigError
from .mae import SparseMAE
from .s5 import SSMBlock


def lt_strides(m: int, target_len: int) -> tuple[int, int]:
    if target_len > m:
        raise ConfigError(f"LT-SSM cannot lengthen history m={m} to L={target_len}")
    r = max(m // target_len, 1)
    s1 = max(int(math.isqrt(r)), 1)
    return s1, max(r // s1, 1)


class LTSSM(nn.Module):
    """SSM blocks over ``h_pre[N,m,D_pre]`` then strided 1D convs to ``[N,L,D]``."""

    def __init__(self, pre_dim, dim, m, target_len, blocks=1, state=16, mlp_ratio=4, strides=None):
        super().__init__()
        self.target_len = target_len
        self.blocks = nn.ModuleList(SSMBlock(pre_dim, state, mlp_ratio) for _ in range(blocks))
        s1, s2 = strides or lt_strides(m, target_len)
        self.conv1 = te.Conv1d(pre_dim, dim, 3, stride=s1, padding=1)
        self.conv2 = te.Conv1d(dim, dim, 3, stride=s2, padding=1)

    def forward(self, h_pre):
        if h_pre.dim() != 3:
            raise ValueError(f"LT-SSM expects [N,m,D_pre], got {tuple(h_pre.shape)}")
        z = h_pre
        for block in self.blocks:
            z = block(z)
        z = self.conv2(te.gelu(self.conv1(z.transpose(1, 2))))
        if z.shape[-1] != self.target_len:
            z = F.adaptive_avg_pool1d(z, self.target_len)
        return z.transpose(1, 2)


class FusionHead(nn.Module):
    """``softmax(FFN(mean_seq(SSMBlock([h_sse; h_lt]))))`` over the four classes."""

    def __init__(self, dim, hidden=64, state=16, mlp_ratio=4, n_classes=4):
        super().__init__()
        self.block = SSMBlock(dim, state, mlp_ratio)
        self.fc1 = te.Linear(dim, hidden)
        self.fc2 = te.Linear(hidden, n_classes)

    def reset_classifier(self):
        for fc in (self.fc1, self.fc2):
            fresh = te.Linear(fc.weight.shape[1], fc.weight.shape[0])
            fc.load_state_dict(fresh.state_dict())

    def logits(self, z):
        z = self.block(z).mean(dim=-2)
        return self.fc2(te.gelu(self.fc1(z)))

    def forward(self, h_sse, h_lt):
        if h_sse.shape != h_lt.shape:
            raise ValueError(f"fusion needs matching [L,D]: {tuple(h_sse.shape)} vs {tuple(h_lt.shape)}")
        return te.softmax(self.logits(te.concat([h_sse, h_lt], dim=-2)), dim=-1)


class DeepSWM(nn.Module):
    """Spatial encoder + LT-SSM over pretrained features + fusion head."""

    def __init__(self, cfg: RunConfig, with_mae: bool = False):
        super().__init__()
        self.cfg = cfg
        self.sse = SolarSpatialEncoder(cfg.sse)
        L = self.sse.seq_len
        strides = tuple(cfg.head.strides) if cfg.head.strides else None
        self.lt = LTSSM(cfg.mae.dim, cfg.sse.dim, cfg.mae.history, L, cfg.head.lt_blocks,
                        cfg.head.state, cfg.head.mlp_ratio, strides)
        self.head = FusionHead(cfg.sse.dim, cfg.head.ffn_hidden, cfg.head.state, cfg.head.mlp_ratio)
        self.mae = SparseMAE(cfg.mae) if with_mae else None

    def pre_features(self, x_pre):
        n, m = x_pre.shape[:2]
        return self.mae.encode(x_pre.reshape(n * m, *x_pre.shape[2:])).reshape(n, m, -1)

    def backbone(self, x, h_pre=None, x_pre=None):
        """Concatenated ``[h_sse; h_lt]`` of shape ``[N, 2L, D]``."""
        if h_pre is None:
            if self.mae is None or x_pre is None:
                raise ValueError("need h_pre, or x_pre with an attached MAE encoder")
            h_pre = self.pre_features(x_pre)
        return te.concat([self.sse(x), self.lt(h_pre)], dim=-2)

    def forward(self, x, h_pre=None, x_pre=None):
        return te.softmax(self.head.logits(self.backbone(x, h_pre, x_pre)), dim=-1)
