"""Preprocessing: cadence alignment, resizing, missing-slot handling, standardization."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..errors import DataError

log = logging.getLogger(__name__)


class SampleExcluded(DataError):
    pass


@dataclass
class SolarSample:
    images: np.ndarray  # [k, C, H, W]
    label: int
    timestamp: int
    missing_mask: np.ndarray  # [k, C] bool

    @property
    def missing_fraction(self) -> float:
        return float(np.mean(self.missing_mask))


@dataclass
class RawSample:
    frames: np.ndarray  # [k, C, Hr, Wr] raw resolution
    obs_times: np.ndarray  # [k, C] acquisition hours, NaN if absent
    label: int
    timestamp: int


@dataclass
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def align_to_cadence(frames, obs_times, grid):
    """Nearest-hour resampling onto ``grid``.

    Each acquisition goes to the grid hour it rounds to; when several land on
    one hour the closest wins. Grid hours left empty are flagged missing.
    """
    frames = np.asarray(frames)
    obs = np.asarray(obs_times, dtype=np.float64)
    grid = np.asarray(grid, dtype=np.int64)
    T, C = grid.size, obs.shape[1]
    out = np.zeros((T, C) + frames.shape[2:], dtype=frames.dtype)
    best = np.full((T, C), np.inf)
    src = np.full((T, C), -1, dtype=np.int64)
    valid = ~np.isnan(obs)
    slot = np.where(valid, np.floor(np.where(valid, obs, 0) + 0.5), -1).astype(np.int64) - grid[0]
    dist = np.abs(np.where(valid, obs, 0) - (slot + grid[0]))
    for i in range(obs.shape[0]):
        for c in range(C):
            s = slot[i, c]
            if valid[i, c] and 0 <= s < T and dist[i, c] < best[s, c]:
                best[s, c] = dist[i, c]
                src[s, c] = i
    missing = src < 0
    for c in range(C):
        ok = ~missing[:, c]
        out[ok, c] = frames[src[ok, c], c]
    return out, missing


def resize(frames, height: int, width: int):
    """Area-average for integer factors, bilinear otherwise (last two axes)."""
    frames = np.asarray(frames)
    hr, wr = frames.shape[-2:]
    if (hr, wr) == (height, width):
        return frames.copy()
    if hr % height == 0 and wr % width == 0:
        fh, fw = hr // height, wr // width
        x = frames.reshape(*frames.shape[:-2], height, fh, width, fw)
        return x.mean(axis=(-3, -1)).astype(frames.dtype)
    zoom = [1] * (frames.ndim - 2) + [height / hr, width / wr]
    return ndimage.zoom(frames, zoom, order=1).astype(frames.dtype)


def compute_stats(frames, missing) -> ChannelStats:
    """Per-channel mean/std over the present slots of ``frames[T,C,H,W]``."""
    C = frames.shape[1]
    mean, std = np.zeros(C), np.ones(C)
    for c in range(C):
        x = frames[~missing[:, c], c].astype(np.float64)
        if x.size:
            mean[c] = x.mean()
            std[c] = x.std() or 1.0
    return ChannelStats(mean, std)


def standardize(images, missing, stats: ChannelStats):
    """Standardize ``[..., C, H, W]`` per channel; missing slots become zero."""
    x = (images.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    x[np.asarray(missing, dtype=bool)] = 0.0
    return x.astype(np.float32)


def preprocess(raw: RawSample, height: int, width: int, max_missing: float = 0.25,
               stats: ChannelStats | None = None) -> SolarSample:
    """Align, resize, zero-fill and (optionally) standardize one raw sample."""
    k = raw.frames.shape[0]
    grid = np.arange(raw.timestamp - k + 1, raw.timestamp + 1)
    aligned, missing = align_to_cadence(raw.frames, raw.obs_times, grid)
    frac = float(missing.mean())
    if frac > max_missing:
        reason = f"sample t={raw.timestamp}: {missing.sum()} of {missing.size} slots missing ({frac:.1%})"
        log.info("excluded %s", reason)
        raise SampleExcluded(reason)
    images = resize(aligned, height, width)
    images[missing] = 0.0
    if stats is not None:
        images = standardize(images, missing, stats)
    return SolarSample(images.astype(np.float32), int(raw.label), int(raw.timestamp), missing)
