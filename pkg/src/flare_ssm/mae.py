"""Sparse masked autoencoder with variance-aware two-phase masking.

Phase 1 ranks patches by pixel standard deviation and masks the top-``alpha``%
at the low ratio ``r_l`` and the rest at ``r_h``. Phase 2 replaces a fraction
``r_f`` of the encoded visible tokens with a learned feature-mask embedding
before decoding. The reconstruction loss covers every patch hidden from the
decoder by either phase.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import tensor_engine as te
from .config import MaeConfig


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (tolerant to fp error)."""
    return int(math.copysign(math.floor(abs(x) + 0.5 + 1e-9), x))


@dataclass
class MaskPlan:
    patch_grid: tuple[int, int]
    high_var_ids: np.ndarray
    spatial_masked_ids: np.ndarray
    feature_masked_ids: np.ndarray

    @property
    def n_patches(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def visible_ids(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.n_patches), self.spatial_masked_ids)

    @property
    def loss_ids(self) -> np.ndarray:
        return np.union1d(self.spatial_masked_ids, self.feature_masked_ids)


def mask_counts(n_patches: int, cfg: MaeConfig) -> dict[str, int]:
    """Closed-form mask sizes for one image."""
    if cfg.phase_aware:
        k_high = round_half_away(cfg.alpha / 100 * n_patches)
        high = round_half_away(cfg.r_l * k_high)
        low = round_half_away(cfg.r_h * (n_patches - k_high))
        visible = n_patches - high - low
        feature = round_half_away(cfg.r_f * visible)
    else:
        k_high, high = 0, 0
        low = round_half_away(cfg.uniform_ratio * n_patches)
        feature = 0
    return {"k_high": k_high, "high_masked": high, "low_masked": low,
            "spatial_masked": high + low, "feature_masked": feature}


def patchify(v, patch: int):
    """``[..., C, H, W] -> [..., n_patches, C*patch*patch]`` (row-major patch order)."""
    *lead, c, h, w = v.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = v.reshape(*lead, c, gh, patch, gw, patch)
    nl = len(lead)
    x = x.permute(*range(nl), nl + 1, nl + 3, nl, nl + 2, nl + 4)
    return x.reshape(*lead, gh * gw, c * patch * patch)


def unpatchify(p, patch: int, c: int, h: int, w: int):
    *lead, n, _ = p.shape
    gh, gw = h // patch, w // patch
    nl = len(lead)
    x = p.reshape(*lead, gh, gw, c, patch, patch)
    x = x.permute(*range(nl), nl + 2, nl, nl + 3, nl + 1, nl + 4)
    return x.reshape(*lead, c, h, w)


def rank_patches_by_std(v, patch: int) -> tuple[np.ndarray, np.ndarray]:
    """Patch indices by descending std over all channels and pixels; ties by index."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected [C,H,W], got shape {arr.shape}")
    c, h, w = arr.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    blocks = arr.reshape(c, h // patch, patch, w // patch, patch).transpose(1, 3, 0, 2, 4)
    stds = blocks.reshape((h // patch) * (w // patch), -1).std(axis=1)
    order = np.argsort(-stds, kind="stable")
    return order, stds


def two_phase_mask(v, cfg: MaeConfig, seed) -> MaskPlan:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    c, h, w = np.shape(v)
    grid = (h // cfg.patch, w // cfg.patch)
    n = grid[0] * grid[1]
    counts = mask_counts(n, cfg)
    if cfg.phase_aware:
        order, _ = rank_patches_by_std(v, cfg.patch)
        high = np.sort(order[: counts["k_high"]])
        rest = np.sort(order[counts["k_high"]:])
        masked = np.concatenate([
            rng.choice(high, counts["high_masked"], replace=False),
            rng.choice(rest, counts["low_masked"], replace=False),
        ])
    else:
        high = np.array([], dtype=np.int64)
        masked = rng.choice(n, counts["low_masked"], replace=False)
    masked = np.sort(masked.astype(np.int64))
    visible = np.setdiff1d(np.arange(n), masked)
    feat = np.sort(rng.choice(visible, counts["feature_masked"], replace=False).astype(np.int64))
    return MaskPlan(grid, high.astype(np.int64), masked, feat)


def masked_mse(v, v_hat, plan: MaskPlan, patch: int):
    """Mean squared error over pixels of patches hidden from the decoder."""
    ids = torch.as_tensor(plan.loss_ids, dtype=torch.long)
    if ids.numel() == 0:
        return (v_hat - v).sum() * 0.0
    diff = patchify(v_hat - v, patch)[..., ids, :]
    return (diff ** 2).mean()


class SparseMAE(nn.Module):
    def __init__(self, cfg: MaeConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.dim
        n = cfg.grid[0] * cfg.grid[1]
        pix = cfg.channels * cfg.patch * cfg.patch
        self.patch_embed = te.Linear(pix, d)
        self.pos = nn.Parameter(torch.randn(n, d) * 0.02)
        self.encoder = nn.ModuleList(te.TransformerLayer(d, cfg.heads) for _ in range(cfg.enc_layers))
        self.enc_norm = te.LayerNorm(d)
        self.feature_mask = nn.Parameter(torch.randn(d) * 0.02)
        self.dec_embed = te.Linear(d, d)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)
        self.dec_pos = nn.Parameter(torch.randn(n, d) * 0.02)
        self.decoder = nn.ModuleList(te.TransformerLayer(d, cfg.heads) for _ in range(cfg.dec_layers))
        self.dec_norm = te.LayerNorm(d)
        self.pred = te.Linear(d, pix)

    def _encode_tokens(self, tokens):
        for layer in self.encoder:
            tokens = layer(tokens)
        return self.enc_norm(tokens)

    def encode(self, v):
        """Unmasked per-image feature ``[B,C,H,W] -> [B,D_pre]`` (mean over tokens)."""
        tokens = self.patch_embed(patchify(v, self.cfg.patch)) + self.pos
        return self._encode_tokens(tokens).mean(dim=-2)

    def encode_sequence(self, x_pre, chunk: int = 256):
        """``[m,C,H,W] -> [m,D_pre]``; each timestep is encoded independently."""
        return torch.cat([self.encode(x_pre[i : i + chunk]) for i in range(0, x_pre.shape[0], chunk)])

    def reconstruct(self, v, plans: list[MaskPlan]):
        """Reconstruct a batch ``v[B,C,H,W]`` under per-image mask plans."""
        cfg = self.cfg
        b = v.shape[0]
        n = plans[0].n_patches
        vis = torch.as_tensor(np.stack([p.visible_ids for p in plans]), dtype=torch.long)
        fmask = torch.zeros(b, n, dtype=torch.bool)
        for i, p in enumerate(plans):
            fmask[i, torch.as_tensor(p.feature_masked_ids, dtype=torch.long)] = True
        tokens = self.patch_embed(patchify(v, cfg.patch)) + self.pos
        idx = vis[..., None].expand(-1, -1, cfg.dim)
        latent = self._encode_tokens(torch.gather(tokens, 1, idx))
        fm = torch.gather(fmask, 1, vis)[..., None]
        latent = torch.where(fm, self.feature_mask.expand_as(latent), latent)
        x = self.dec_embed(latent)
        full = self.mask_token.expand(b, n, cfg.dim)
        full = full.scatter(1, idx, x) + self.dec_pos
        for layer in self.decoder:
            full = layer(full)
        out = self.pred(self.dec_norm(full))
        return unpatchify(out, cfg.patch, cfg.channels, cfg.height, cfg.width)

    def step(self, v, plans):
        """Return ``(reconstruction, mean masked MSE over the batch)``."""
        v_hat = self.reconstruct(v, plans)
        losses = [masked_mse(v[i], v_hat[i], p, self.cfg.patch) for i, p in enumerate(plans)]
        return v_hat, torch.stack(losses).mean()


def mae_step(model: SparseMAE, v, plan: MaskPlan):
    """Single-image convenience wrapper around :meth:`SparseMAE.step`."""
    v_hat, loss = model.step(v[None], [plan])
    return v_hat[0], loss
