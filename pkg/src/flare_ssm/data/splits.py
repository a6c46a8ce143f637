"""Chronological three-fold splitter.

Validation is the first year of the sample span, the three test windows are
the final three years (one per fold) and training is everything in between.
Samples within ``gap`` hours before a window boundary are left unused so
that no training label horizon reaches into the following window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DataError

N_FOLDS = 3
MIN_YEARS = 5


@dataclass
class Fold:
    index: int
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}

    @classmethod
    def from_dict(cls, index, d):
        return cls(index, *(np.asarray(d[k], dtype=np.int64) for k in ("train", "val", "test")))


def split_folds(timestamps, hours_per_year: int, gap: int = 24) -> list[Fold]:
    ts = np.asarray(timestamps, dtype=np.int64)
    if ts.size and np.any(np.diff(ts) <= 0):
        raise DataError("timestamps must be strictly increasing")
    if ts.size == 0:
        raise DataError("empty dataset")
    start, end = int(ts[0]), int(ts[-1]) + 1
    if end - start < MIN_YEARS * hours_per_year:
        raise DataError(
            f"dataset spans {(end - start) / hours_per_year:.2f} synthetic years; need >= {MIN_YEARS}"
        )
    val_end = start + hours_per_year
    folds = []
    for f in range(N_FOLDS):
        test_start = end - (N_FOLDS - f) * hours_per_year
        test_end = test_start + hours_per_year
        val = np.flatnonzero((ts >= start) & (ts < val_end - gap))
        train = np.flatnonzero((ts >= val_end) & (ts < test_start - gap))
        test = np.flatnonzero((ts >= test_start) & (ts < test_end))
        folds.append(Fold(f + 1, train, val, test))
    return folds
