"""Forecast verification: contingency tables, GMGS, BSS/TSS for >=M, GMGS influence.

All scores are computed in float64. Classes follow :data:`flare_ssm.config.CLASSES`
(0=X, 1=M, 2=C, 3=O), which is also the ordinal order the Gandin-Murphy
scoring matrix is built in.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CLASSES
from .errors import DataError, MetricUndefined

N_CLASSES = len(CLASSES)


@dataclass
class ContingencyTable:
    counts: np.ndarray  # [I, I], rows observed, cols predicted

    @property
    def N(self) -> int:
        return int(self.counts.sum())

    @property
    def P(self) -> np.ndarray:
        return self.counts / self.N

    @property
    def marginals(self) -> np.ndarray:
        """Observed-class relative frequencies ``p_i = sum_j p_ij``."""
        return self.P.sum(axis=1)


@dataclass
class ScoringMatrix:
    s: np.ndarray
    a: np.ndarray


def contingency_table(observed, predicted, n_classes: int = N_CLASSES) -> ContingencyTable:
    observed = np.asarray(observed, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if observed.shape != predicted.shape:
        raise ValueError("observed and predicted must have the same length")
    if observed.size == 0:
        raise MetricUndefined("empty label set")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (observed, predicted), 1)
    return ContingencyTable(counts)


def scoring_matrix(p) -> ScoringMatrix:
    """Gandin-Murphy-Gerrity scoring matrix from observed class marginals."""
    p = np.asarray(p, dtype=np.float64)
    I = p.size
    if I < 2:
        raise ValueError("need at least two classes")
    if abs(p.sum() - 1) > 1e-9 or np.any(p < 0):
        raise ValueError(f"marginals must be a probability vector, got {p}")
    cum = np.cumsum(p)[:-1]
    # 1 - cum evaluated as the tail sum, which avoids cancellation
    tail = np.cumsum(p[::-1])[::-1][1:]
    bad = np.flatnonzero((cum <= 0) | (tail <= 0))
    if bad.size:
        raise MetricUndefined(
            f"scoring matrix undefined: cumulative marginal through class {CLASSES[bad[0]] if I == N_CLASSES else bad[0]} "
            f"is {cum[bad[0]]:.6g} (marginals {np.round(p, 6).tolist()})"
        )
    a = tail / cum
    inv = 1 / a
    s = np.zeros((I, I))
    for i in range(I):
        s[i, i] = (inv[:i].sum() + a[i:].sum()) / (I - 1)
        for j in range(i + 1, I):
            s[i, j] = s[j, i] = (inv[:i].sum() - (j - i) + a[j:].sum()) / (I - 1)
    return ScoringMatrix(s, a)


def gmgs_score(table: ContingencyTable, S: ScoringMatrix | np.ndarray | None = None) -> float:
    """``tr(S^T P)``; ``S`` defaults to the table's own observed marginals."""
    if S is None:
        S = scoring_matrix(table.marginals)
    s = S.s if isinstance(S, ScoringMatrix) else np.asarray(S, dtype=np.float64)
    return float(np.trace(s.T @ table.P))


def gmgs_influence(table: ContingencyTable, S: ScoringMatrix | np.ndarray) -> np.ndarray:
    """Per-cell GMGS loss ``c_ij (s_ii - s_ij) / N``."""
    s = S.s if isinstance(S, ScoringMatrix) else np.asarray(S, dtype=np.float64)
    return table.counts * (np.diag(s)[:, None] - s) / table.N


def binarize_geq_m(labels, probs):
    """Positive class {X, M}; returns (binary labels, P(X) + P(M))."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    return (labels <= 1).astype(np.int64), probs[..., 0] + probs[..., 1]


def bss_geq_m(q, y, f: float | None = None) -> float:
    """Brier skill score of binary forecasts ``q`` against a climatology.

    Both class indicators enter the Brier sums; the reference forecast is the
    climatological rate of each class (``f`` for positives, ``1 - f`` otherwise).
    """
    q = np.asarray(q, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.any((q < 0) | (q > 1)):
        raise ValueError("binary probabilities must lie in [0,1]")
    if f is None:
        f = float(y.mean())
    bs = np.sum((q - y) ** 2 + ((1 - q) - (1 - y)) ** 2)
    bs_c = np.sum((f - y) ** 2 + ((1 - f) - (1 - y)) ** 2)
    if bs_c == 0:
        raise MetricUndefined("BSS undefined: climatological Brier score is zero (labels all identical)")
    return float((bs - bs_c) / (0 - bs_c))


def tss_geq_m(pred, y) -> float:
    pred = np.asarray(pred, dtype=bool)
    y = np.asarray(y, dtype=bool)
    tp = int(np.sum(pred & y))
    fn = int(np.sum(~pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    if tp + fn == 0 or fp + tn == 0:
        raise MetricUndefined(f"TSS undefined: TP+FN={tp + fn}, FP+TN={fp + tn}")
    return tp / (tp + fn) - fp / (fp + tn)


def predict_class(probs) -> np.ndarray:
    """Argmax with ties to the lowest class index."""
    return np.argmax(np.asarray(probs, dtype=np.float64), axis=-1)


def evaluate(labels, probs, fallback_marginals=None) -> dict:
    """Full metric suite for 4-class probabilities.

    If the evaluated labels do not admit a scoring matrix (some class never
    observed), ``fallback_marginals`` is used for GMGS and the report records it.
    """
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    pred = predict_class(probs)
    table = contingency_table(labels, pred)
    source = "evaluated"
    try:
        S = scoring_matrix(table.marginals)
    except MetricUndefined:
        if fallback_marginals is None:
            raise
        S = scoring_matrix(fallback_marginals)
        source = "fallback"
    yb, qb = binarize_geq_m(labels, probs)
    pb, _ = binarize_geq_m(pred, probs)
    report = {
        "n": table.N,
        "gmgs": gmgs_score(table, S),
        "gmgs_marginals": source,
        "confusion": table.counts.tolist(),
        "scoring_matrix": S.s.tolist(),
        "gmgs_influence": gmgs_influence(table, S).tolist(),
    }
    for key, fn in (("bss_geq_m", lambda: bss_geq_m(qb, yb)), ("tss_geq_m", lambda: tss_geq_m(pb, yb))):
        try:
            report[key] = fn()
        except MetricUndefined as exc:
            report[key] = None
            report.setdefault("undefined", {})[key] = str(exc)
    return report


# --- prediction file ----------------------------------------------------------

FIELDS = ("timestamp", "p_X", "p_M", "p_C", "p_O", "label")


def write_predictions(path, timestamps, probs, labels) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for t, p, y in zip(timestamps, np.asarray(probs, dtype=np.float64), labels):
            w.writerow([int(t), *(repr(float(v)) for v in p), CLASSES[int(y)]])


def read_predictions(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ts, ps, ys = [], [], []
    if not Path(path).is_file():
        raise DataError(f"prediction file {path} not found")
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != len(FIELDS):
                raise DataError(f"{path}:{lineno}: expected {len(FIELDS)} fields, got {len(row)}")
            try:
                ts.append(int(row[0]))
                ps.append([float(v) for v in row[1:5]])
                lab = row[5].strip()
                ys.append(CLASSES.index(lab) if lab in CLASSES else int(lab))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return np.array(ts, dtype=np.int64), np.array(ps, dtype=np.float64), np.array(ys, dtype=np.int64)


def metrics_from_file(path, fallback_marginals=None) -> dict:
    _, probs, labels = read_predictions(Path(path))
    return evaluate(labels, probs, fallback_marginals)
