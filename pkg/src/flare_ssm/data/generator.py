"""Synthetic FlareBench-like stream.

A latent log-activity series (slow cycle envelope plus an hourly AR(1)
process) is mapped monotonically to GOES-like peak X-ray flux. The map is
calibrated so that the 24-hour-ahead maximum of the flux at the sample times
reproduces the target class proportions. Frames show Gaussian active regions
rotating across a limb-darkened disk whose total brightness grows with the
current log-flux.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import CLASSES, GeneratorConfig
from ..errors import ConfigError
from . import preprocess

THRESHOLDS = (1e-4, 1e-5, 1e-6)  # X | M | C | O boundaries
QUIET_FLUX = 1e-7
ROTATION_HOURS = 27 * 24
DISK_RADIUS = 0.65  # fraction of the centre-to-corner distance


def label_from_flux(flux):
    """Flare class index (0=X .. 3=O) of a peak flux in W/m^2."""
    f = np.asarray(flux, dtype=np.float64)
    if np.any(f < 0) or np.any(np.isnan(f)):
        raise ValueError("peak flux must be non-negative")
    out = np.full(f.shape, 3, dtype=np.int64)
    out[f > 1e-6] = 2
    out[f > 1e-5] = 1
    out[f > 1e-4] = 0
    return out if out.ndim else int(out)


def window_max(series, times, horizon: int):
    """``max(series[t+1 : t+horizon+1])`` for each t (the next ``horizon`` hours)."""
    from numpy.lib.stride_tricks import sliding_window_view

    win = sliding_window_view(series, horizon)
    return win[np.asarray(times) + 1].max(axis=1)


@dataclass
class LatentLog:
    activity: np.ndarray  # [T] latent log-activity
    log_flux: np.ndarray  # [T] log10 W/m^2
    sample_times: np.ndarray  # [n] hour index of each candidate sample
    labels: np.ndarray  # [n]

    @property
    def flux(self):
        return 10.0 ** self.log_flux


def sample_layout(cfg: GeneratorConfig) -> tuple[np.ndarray, int]:
    t0 = max(cfg.history, cfg.lt_history) - 1
    times = t0 + cfg.sample_stride * np.arange(cfg.n_samples)
    return times, int(times[-1] + cfg.horizon + 1)


def _class_counts(props, n):
    counts = [int(np.floor(p * n + 0.5)) for p in props[1:]]
    counts.insert(0, n - sum(counts))
    return counts


def _calibrate(window_peaks, props):
    """Knots of a monotone map sending class-count quantiles to flux thresholds."""
    n = window_peaks.size
    counts = _class_counts(props, n)  # X, M, C, O
    if min(counts) < 1:
        raise ConfigError(f"class proportions {props} infeasible for {n} samples (counts {counts})")
    srt = np.sort(window_peaks)
    knots = []
    below = 0
    for c in (3, 2, 1):  # O, C, M upper edges
        below += counts[c]
        knots.append(0.5 * (srt[below - 1] + srt[below]))
    if not (knots[0] < knots[1] < knots[2]):
        raise ConfigError("class proportions infeasible: latent peaks are tied at a class boundary")
    return np.array(knots)


def _piecewise(g, knots, values):
    slopes = np.diff(values) / np.diff(knots)
    out = np.interp(g, knots, values)
    lo, hi = g < knots[0], g > knots[-1]
    out[lo] = values[0] + slopes[0] * (g[lo] - knots[0])
    out[hi] = values[-1] + slopes[-1] * (g[hi] - knots[-1])
    return out


def generate_latent(cfg: GeneratorConfig, seed: int | None = None) -> LatentLog:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    times, T = sample_layout(cfg)
    t = np.arange(T)
    period = cfg.cycle_years * cfg.hours_per_year
    cycle = cfg.cycle_amplitude * np.sin(2 * np.pi * t / period)
    eps = rng.standard_normal(T) * cfg.ar_noise
    z = np.empty(T)
    z[0] = eps[0] / np.sqrt(1 - cfg.ar_coef ** 2)
    for i in range(1, T):
        z[i] = cfg.ar_coef * z[i - 1] + eps[i]
    g = cycle + z
    if cfg.blob_amplitude == 0:
        log_flux = np.full(T, np.log10(QUIET_FLUX))
    else:
        knots = _calibrate(window_max(g, times, cfg.horizon), cfg.class_proportions)
        log_flux = _piecewise(g, knots, np.log10(THRESHOLDS[::-1]))
    labels = label_from_flux(window_max(10.0 ** log_flux, times, cfg.horizon))
    return LatentLog(g, log_flux, times, labels)


def _grid(n):
    c = (np.arange(n) + 0.5) / n * 2 - 1  # [-1, 1]
    return np.meshgrid(c, c, indexing="ij")


def render_frames(cfg: GeneratorConfig, latent: LatentLog, rng, resize_to=None) -> np.ndarray:
    """Frames ``[T, C, S, S]`` at raw resolution driven by the latent log-flux.

    With ``resize_to=(H, W)`` each frame is downsized right after rendering.
    """
    T = latent.log_flux.size
    S, C = cfg.raw_size, cfg.channels
    yy, xx = _grid(S)
    r_disk = DISK_RADIUS * np.sqrt(2)
    rr = np.sqrt(xx ** 2 + yy ** 2) / r_disk
    disk = np.clip(1 - rr ** 2, 0, None) ** 0.5
    energy = cfg.blob_amplitude * np.clip(latent.log_flux + 8.0, 0, None)

    nb = max(cfg.n_blobs, 1)
    lon0 = -np.pi / 2 + np.pi * (np.arange(nb) + 0.5) / nb
    lat = rng.uniform(-0.6, 0.6, nb)
    logw = np.zeros(nb)
    gains = np.linspace(1.5, 0.1, max(C - 1, 1))
    base = rng.uniform(0.5, 1.0, C)
    sigma = 0.08
    H, W = resize_to or (S, S)
    frames = np.empty((T, C, H, W), dtype=np.float32)
    raw = np.empty((C, S, S), dtype=np.float32)
    lap = np.zeros(nb)
    for ti in range(T):
        lon = lon0 + 2 * np.pi * ti / ROTATION_HOURS
        # each pass behind the limb brings the region back at a fresh latitude
        this_lap = np.floor((lon + np.pi / 2) / np.pi)
        new = this_lap != lap
        if np.any(new):
            lat[new] = rng.uniform(-0.6, 0.6, int(new.sum()))
            lap = this_lap
        wrapped = (lon + np.pi / 2) % np.pi - np.pi / 2
        logw = 0.99 * logw + 0.1 * rng.standard_normal(nb)
        w = np.exp(logw)
        w /= w.sum()
        cx = r_disk * np.sin(wrapped) * np.cos(lat)
        cy = r_disk * np.sin(lat)
        spots = np.zeros((S, S))
        bipolar = np.zeros((S, S))
        for j in range(nb):
            d2 = (xx - cx[j]) ** 2 + (yy - cy[j]) ** 2
            amp = energy[ti] * w[j]
            spots += amp * np.exp(-d2 / (2 * sigma ** 2))
            dx = 0.6 * sigma
            bipolar += amp * (np.exp(-((xx - cx[j] - dx) ** 2 + (yy - cy[j]) ** 2) / (2 * (0.7 * sigma) ** 2))
                              - np.exp(-((xx - cx[j] + dx) ** 2 + (yy - cy[j]) ** 2) / (2 * (0.7 * sigma) ** 2)))
        noise = rng.standard_normal((C, S, S)) * cfg.pixel_noise
        raw[0] = bipolar * (disk > 0) + noise[0]
        for c in range(1, C):
            raw[c] = base[c] * disk + gains[c - 1] * spots * (disk > 0) + noise[c]
        frames[ti] = preprocess.resize(raw, H, W)
    return frames


def observation_times(cfg: GeneratorConfig, T: int, rng) -> np.ndarray:
    """Per-(hour, channel) acquisition times; NaN where the frame never arrived."""
    C = cfg.channels
    obs = np.arange(T)[:, None] + rng.uniform(-cfg.obs_jitter, cfg.obs_jitter, (T, C))
    late = rng.random((T, C)) < cfg.late_rate
    obs[late] += rng.uniform(0.55, 0.95, int(late.sum()))
    obs[rng.random((T, C)) < cfg.missing_rate] = np.nan
    starts = np.flatnonzero(rng.random(T) < cfg.outage_rate)
    for s in starts:
        obs[s : s + cfg.outage_hours] = np.nan
    return obs


@dataclass
class Stream:
    cfg: GeneratorConfig
    latent: LatentLog
    frames: np.ndarray  # [T, C, H, W] working resolution, zeros where missing
    missing: np.ndarray  # [T, C]
    sample_times: np.ndarray  # [n] kept samples
    labels: np.ndarray  # [n]
    excluded: list = field(default_factory=list)  # (timestamp, reason)

    def sample(self, i):
        t = int(self.sample_times[i])
        k = self.cfg.history
        return preprocess.SolarSample(
            images=self.frames[t - k + 1 : t + 1],
            label=int(self.labels[i]),
            timestamp=t,
            missing_mask=self.missing[t - k + 1 : t + 1],
        )


def generate_dataset(cfg: GeneratorConfig, seed: int | None = None) -> Stream:
    """Latent series, rendered + aligned + resized frames and the kept samples."""
    seed = cfg.seed if seed is None else seed
    latent = generate_latent(cfg, seed)
    rng = np.random.default_rng([seed, 1])
    T = latent.log_flux.size
    # alignment only selects whole frames, so resizing first is equivalent
    rendered = render_frames(cfg, latent, rng, (cfg.height, cfg.width))
    obs = observation_times(cfg, T, rng)
    frames, missing = preprocess.align_to_cadence(rendered, obs, np.arange(T))
    del rendered
    keep, excluded = [], []
    k = cfg.history
    for i, t in enumerate(latent.sample_times):
        frac = missing[t - k + 1 : t + 1].mean()
        if frac > cfg.max_missing_fraction:
            excluded.append((int(t), f"missing fraction {frac:.3f} > {cfg.max_missing_fraction}"))
        else:
            keep.append(i)
    keep = np.array(keep, dtype=np.int64)
    return Stream(cfg, latent, frames, missing, latent.sample_times[keep], latent.labels[keep], excluded)


def class_histogram(labels) -> dict[str, int]:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=len(CLASSES))
    return {c: int(n) for c, n in zip(CLASSES, counts)}
