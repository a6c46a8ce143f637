"""Composite forecasting loss: cross-entropy + GMGS-weighted CE + Brier term."""

from __future__ import annotations

import torch

from .config import LossConfig


def _check(p, y):
    if p.shape != y.shape or p.dim() != 2:
        raise ValueError(f"loss expects matching [N,I] tensors, got {tuple(p.shape)} and {tuple(y.shape)}")


def ce_loss(p, y, clamp: float = 1e-12):
    _check(p, y)
    return -(y * torch.log(p.clamp_min(clamp))).sum(dim=1).mean()


def bss_loss(p, y):
    _check(p, y)
    return ((p - y) ** 2).sum(dim=1).mean()


def gmgs_loss(p, y, S, smoothing: float = 0.1, clamp: float = 1e-12):
    """``-(1/N) sum_n s[i*, j*] sum_i y'_ni log p_ni`` with ``S`` held constant."""
    _check(p, y)
    S = torch.as_tensor(S, dtype=p.dtype)
    true = torch.argmax(y, dim=1)
    pred = torch.argmax(p.detach(), dim=1)
    weight = S[true, pred]
    y_s = (1 - smoothing) * y + smoothing / y.shape[1]
    return -(weight * (y_s * torch.log(p.clamp_min(clamp))).sum(dim=1)).mean()


def total_loss(p, y, S, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return (cfg.ce * ce_loss(p, y, cfg.log_clamp)
            + cfg.gmgs * gmgs_loss(p, y, S, cfg.smoothing, cfg.log_clamp)
            + cfg.bss * bss_loss(p, y))


def one_hot(labels, n_classes: int = 4, dtype=None):
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.one_hot(labels, n_classes).to(dtype or torch.get_default_dtype())
