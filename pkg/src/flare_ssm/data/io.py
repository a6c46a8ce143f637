"""On-disk dataset: binary sample shards, hourly frame store and a JSON manifest.

Record layout (little-endian): magic ``FBS1``, ``u32`` version, ``u32`` k,
``u32`` C, ``u32`` H, ``u32`` W, ``i64`` timestamp, ``u8`` label,
``u8[k*C]`` missing flags, then ``k*C*H*W`` float32 pixels. A shard is a
plain concatenation of records. Pixels are stored unstandardized; the
manifest carries per-fold training statistics.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import __version__
from ..errors import DataError
from .generator import Stream, class_histogram
from .preprocess import ChannelStats, SolarSample, compute_stats, standardize
from .splits import Fold, split_folds

MAGIC = b"FBS1"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIqB")


def encode_sample(s: SolarSample) -> bytes:
    k, c, h, w = s.images.shape
    head = _HEADER.pack(MAGIC, VERSION, k, c, h, w, int(s.timestamp), int(s.label))
    flags = np.asarray(s.missing_mask, dtype=np.uint8).tobytes()
    return head + flags + np.ascontiguousarray(s.images, dtype="<f4").tobytes()


def decode_samples(blob: bytes, where: str = "<bytes>") -> list[SolarSample]:
    out, off = [], 0
    while off < len(blob):
        if len(blob) - off < _HEADER.size:
            raise DataError(f"{where}: truncated record header at byte {off}")
        magic, version, k, c, h, w, ts, label = _HEADER.unpack_from(blob, off)
        if magic != MAGIC:
            raise DataError(f"{where}: bad magic {magic!r} at byte {off}")
        if version != VERSION:
            raise DataError(f"{where}: unsupported record version {version}")
        if label > 3:
            raise DataError(f"{where}: label {label} out of range")
        off += _HEADER.size
        n_px = k * c * h * w
        if len(blob) - off < k * c + 4 * n_px:
            raise DataError(f"{where}: truncated record body at byte {off}")
        missing = np.frombuffer(blob, np.uint8, k * c, off).reshape(k, c).astype(bool)
        off += k * c
        images = np.frombuffer(blob, "<f4", n_px, off).reshape(k, c, h, w).astype(np.float32)
        off += 4 * n_px
        out.append(SolarSample(images, int(label), int(ts), missing))
    return out


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def fold_stats(stream_frames, stream_missing, sample_times, train_idx, k: int) -> ChannelStats:
    """Channel statistics over the hourly frames inside training input windows."""
    hours = np.zeros(stream_frames.shape[0], dtype=bool)
    for t in np.asarray(sample_times)[train_idx]:
        hours[t - k + 1 : t + 1] = True
    return compute_stats(stream_frames[hours], stream_missing[hours])


def write_dataset(stream: Stream, out_dir, config_text: str = "") -> dict:
    """Write shards, frame store and manifest; return the manifest dict."""
    out = Path(out_dir)
    (out / "shards").mkdir(parents=True, exist_ok=True)
    cfg = stream.cfg
    n = stream.sample_times.size
    folds = split_folds(stream.sample_times, cfg.hours_per_year, cfg.horizon)
    shards = []
    for s0 in range(0, n, cfg.shard_size):
        rel = f"shards/shard_{s0 // cfg.shard_size:05d}.fbs"
        idx = range(s0, min(s0 + cfg.shard_size, n))
        with open(out / rel, "wb") as fh:
            for i in idx:
                fh.write(encode_sample(stream.sample(i)))
        shards.append({"path": rel, "count": len(idx), "first": s0, "sha256": _sha(out / rel)})
    np.save(out / "frames.npy", stream.frames)
    np.save(out / "frames_missing.npy", stream.missing)
    np.savez(out / "latent.npz", activity=stream.latent.activity, log_flux=stream.latent.log_flux,
             sample_times=stream.latent.sample_times, labels=stream.latent.labels)
    manifest = {
        "format": "FBS1",
        "code_version": __version__,
        "n_samples": int(n),
        "shape": [cfg.history, cfg.channels, cfg.height, cfg.width],
        "lt_history": cfg.lt_history,
        "hours_per_year": cfg.hours_per_year,
        "horizon": cfg.horizon,
        "class_counts": class_histogram(stream.labels),
        "excluded": [{"timestamp": t, "reason": r} for t, r in stream.excluded],
        "shards": shards,
        "frames": {"path": "frames.npy", "missing": "frames_missing.npy", "count": int(stream.frames.shape[0])},
        "folds": {
            str(f.index): {
                **f.to_dict(),
                "counts": {"train": int(f.train.size), "val": int(f.val.size), "test": int(f.test.size)},
                "stats": fold_stats(stream.frames, stream.missing, stream.sample_times, f.train,
                                    cfg.history).to_dict(),
            }
            for f in folds
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    if config_text:
        (out / "config.txt").write_text(config_text, encoding="utf-8")
    return manifest


@dataclass
class FoldArrays:
    """Standardized arrays of one fold, ready for training."""

    fold: Fold
    stats: ChannelStats
    images: np.ndarray  # [n, k, C, H, W]
    images_missing: np.ndarray  # [n, k, C]
    labels: np.ndarray
    timestamps: np.ndarray
    frames: np.ndarray  # [T, C, H, W] standardized hourly frames
    frames_missing: np.ndarray


class FlareDataset:
    """Reader for a directory produced by :func:`write_dataset`."""

    def __init__(self, root):
        self.root = Path(root)
        path = self.root / "manifest.json"
        if not path.exists():
            raise DataError(f"no dataset at {self.root} (missing manifest.json); run 'flare-ssm generate' first")
        try:
            self.manifest = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid manifest: {exc}") from exc
        self._samples = None

    def samples(self) -> list[SolarSample]:
        if self._samples is None:
            out = []
            for sh in self.manifest["shards"]:
                p = self.root / sh["path"]
                if not p.exists():
                    raise DataError(f"missing shard {p}")
                part = decode_samples(p.read_bytes(), str(p))
                if len(part) != sh["count"]:
                    raise DataError(f"{p}: {len(part)} records, manifest says {sh['count']}")
                out.extend(part)
            self._samples = out
        return self._samples

    def arrays(self):
        s = self.samples()
        return (np.stack([x.images for x in s]), np.array([x.label for x in s], dtype=np.int64),
                np.array([x.timestamp for x in s], dtype=np.int64), np.stack([x.missing_mask for x in s]))

    def frames(self):
        fr = np.load(self.root / self.manifest["frames"]["path"], mmap_mode="r")
        miss = np.load(self.root / self.manifest["frames"]["missing"])
        return fr, miss

    def fold(self, index: int) -> Fold:
        try:
            return Fold.from_dict(index, self.manifest["folds"][str(index)])
        except KeyError as exc:
            raise DataError(f"fold {index} not in manifest") from exc

    def fold_arrays(self, index: int) -> FoldArrays:
        fold = self.fold(index)
        stats = ChannelStats.from_dict(self.manifest["folds"][str(index)]["stats"])
        images, labels, ts, missing = self.arrays()
        frames, fmiss = self.frames()
        std_images = np.stack([standardize(images[i], missing[i], stats) for i in range(len(images))])
        std_frames = np.empty(frames.shape, dtype=np.float32)
        for a in range(0, frames.shape[0], 1024):
            std_frames[a : a + 1024] = standardize(np.asarray(frames[a : a + 1024]), fmiss[a : a + 1024], stats)
        return FoldArrays(fold, stats, std_images, missing, labels, ts, std_frames, fmiss)
