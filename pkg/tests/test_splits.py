import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare_ssm.data.splits import split_folds
from flare_ssm.errors import DataError


def _check(ts, hpy, gap):
    folds = split_folds(ts, hpy, gap)
    end = ts[-1] + 1
    assert len(folds) == 3
    tests = []
    for f in folds:
        tr, va, te = (set(ts[getattr(f, k)].tolist()) for k in ("train", "val", "test"))
        assert not (tr & te) and not (tr & va) and not (va & te)
        assert max(ts[f.train]) < min(ts[f.test])
        assert max(ts[f.val]) < min(ts[f.train])
        # a training label horizon never reaches into the test window
        assert max(ts[f.train]) + gap < min(ts[f.test])
        tests.append(set(f.test.tolist()))
    assert all(not (tests[i] & tests[j]) for i in range(3) for j in range(i + 1, 3))
    trailing = set(np.flatnonzero(ts >= end - 3 * hpy).tolist())
    assert set().union(*tests) == trailing
    # recount: used + gap samples = total
    for f in folds:
        test_start = end - (4 - f.index) * hpy
        in_gap = ((ts >= ts[0] + hpy - gap) & (ts < ts[0] + hpy)) | ((ts >= test_start - gap) & (ts < test_start))
        after = ts >= test_start + hpy
        assert f.train.size + f.val.size + f.test.size == ts.size - in_gap.sum() - after.sum()
    return folds


def test_desk_layout():
    ts = 63 + 3 * np.arange(2000)
    folds = _check(ts, 876, 24)
    assert folds[2].test.size == np.sum(ts >= ts[-1] + 1 - 876)


@settings(max_examples=30, deadline=None)
@given(st.integers(20, 200), st.integers(1, 4), st.integers(0, 30), st.integers(0, 7))
def test_split_hygiene_property(hpy, stride, gap, extra_years):
    n = (5 + extra_years) * hpy // stride + 5
    ts = 10 + stride * np.arange(n)
    if ts[-1] + 1 - ts[0] < 5 * hpy:
        return
    _check(ts, hpy, min(gap, hpy // 4))


def test_short_dataset_rejected():
    with pytest.raises(DataError, match="need >= 5"):
        split_folds(np.arange(4 * 100), 100)
    with pytest.raises(DataError):
        split_folds(np.array([3, 2, 1]), 1)
