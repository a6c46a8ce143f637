"""Class-balanced resampling for the classifier re-training stage."""

from __future__ import annotations

import numpy as np

from ..config import CLASSES
from ..errors import DataError


def crt_resample(labels, seed, per_class: int | None = None, n_classes: int = len(CLASSES)) -> np.ndarray:
    """Indices of one balanced epoch: ``per_class`` draws from every class.

    Classes smaller than ``per_class`` are oversampled with replacement,
    larger ones subsampled without. Defaults to the largest class size.
    """
    labels = np.asarray(labels, dtype=np.int64)
    groups = [np.flatnonzero(labels == c) for c in range(n_classes)]
    empty = [CLASSES[c] if n_classes == len(CLASSES) else c for c, g in enumerate(groups) if g.size == 0]
    if empty:
        raise DataError(f"class-balanced sampling needs every class; none of {empty} in training split")
    per_class = per_class or max(g.size for g in groups)
    rng = np.random.default_rng(seed)
    draws = [rng.choice(g, per_class, replace=g.size < per_class) for g in groups]
    epoch = np.concatenate(draws)
    return epoch[rng.permutation(epoch.size)]
