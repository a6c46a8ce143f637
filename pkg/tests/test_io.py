import dataclasses
import hashlib
import json

import numpy as np
import pytest

from flare_ssm.config import make_config
from flare_ssm.data.generator import generate_dataset
from flare_ssm.data.io import FlareDataset, decode_samples, encode_sample, write_dataset
from flare_ssm.data.preprocess import SolarSample
from flare_ssm.errors import DataError


@pytest.fixture(scope="module")
def tiny_stream():
    return generate_dataset(make_config(profile="tiny").data, seed=0)


def test_record_round_trip():
    rng = np.random.default_rng(0)
    s = SolarSample(rng.standard_normal((2, 3, 4, 5)).astype(np.float32), 2, 123456789012, rng.random((2, 3)) < 0.3)
    blob = encode_sample(s)
    assert blob[:4] == b"FBS1" and len(blob) == 4 + 4 * 5 + 8 + 1 + 6 + 4 * 120
    (back,) = decode_samples(blob)
    assert np.array_equal(back.images, s.images) and back.label == 2 and back.timestamp == s.timestamp
    assert np.array_equal(back.missing_mask, s.missing_mask)


def test_record_corruption_detected():
    s = SolarSample(np.zeros((1, 1, 2, 2), np.float32), 0, 1, np.zeros((1, 1), bool))
    blob = encode_sample(s)
    with pytest.raises(DataError, match="truncated"):
        decode_samples(blob[:-1])
    with pytest.raises(DataError, match="magic"):
        decode_samples(b"XXXX" + blob[4:])


def test_dataset_write_and_recount(tmp_path, tiny_stream):
    manifest = write_dataset(tiny_stream, tmp_path)
    ds = FlareDataset(tmp_path)
    images, labels, ts, missing = ds.arrays()
    assert len(labels) == manifest["n_samples"] == sum(s["count"] for s in manifest["shards"])
    assert np.array_equal(labels, tiny_stream.labels) and np.array_equal(ts, tiny_stream.sample_times)
    for k, f in manifest["folds"].items():
        for split in ("train", "val", "test"):
            assert f["counts"][split] == len(f[split])
    counts = np.bincount(labels, minlength=4)
    assert list(manifest["class_counts"].values()) == counts.tolist()


def test_fold_arrays_standardized_with_training_stats(tmp_path, tiny_stream):
    write_dataset(tiny_stream, tmp_path)
    fa = FlareDataset(tmp_path).fold_arrays(3)
    k = fa.images.shape[1]
    hours = np.zeros(fa.frames.shape[0], bool)
    for t in fa.timestamps[fa.fold.train]:
        hours[t - k + 1 : t + 1] = True
    for c in range(fa.frames.shape[1]):
        x = fa.frames[hours][~fa.frames_missing[hours][:, c], c].astype(np.float64)
        assert abs(x.mean()) < 1e-5 and abs(x.std() - 1) < 1e-4
    other = FlareDataset(tmp_path).manifest["folds"]["1"]["stats"]
    assert other["mean"] != FlareDataset(tmp_path).manifest["folds"]["3"]["stats"]["mean"]


def test_manifest_deterministic(tmp_path):
    cfg = make_config(profile="tiny").data
    h = []
    for d in ("a", "b"):
        write_dataset(generate_dataset(cfg, seed=4), tmp_path / d)
        h.append(hashlib.sha256((tmp_path / d / "manifest.json").read_bytes()).hexdigest())
    assert h[0] == h[1]


def test_missing_dataset_and_shard(tmp_path, tiny_stream):
    with pytest.raises(DataError, match="generate"):
        FlareDataset(tmp_path / "nope")
    write_dataset(tiny_stream, tmp_path)
    (tmp_path / "shards" / "shard_00000.fbs").unlink()
    with pytest.raises(DataError, match="missing shard"):
        FlareDataset(tmp_path).samples()
