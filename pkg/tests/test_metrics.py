import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flare_ssm import metrics as M
from flare_ssm.errors import DataError, MetricUndefined


def _marginals(rng, I):
    p = rng.dirichlet(np.ones(I)) * 0.9 + 0.1 / I
    return p / p.sum()


def _gerrity_oracle(p):
    """Scoring matrix entries written out term by term (independent loop form)."""
    I = len(p)
    a = []
    for i in range(I - 1):
        cum = sum(p[: i + 1])
        a.append((1 - cum) / cum)
    s = np.zeros((I, I))
    for i in range(I):
        for j in range(I):
            lo, hi = min(i, j), max(i, j)
            acc = sum(1 / a[k] for k in range(lo)) - (hi - lo) + sum(a[k] for k in range(hi, I - 1))
            s[i, j] = acc / (I - 1)
    return s


def test_two_class_scoring_matrix_exact():
    assert np.array_equal(M.scoring_matrix([0.8, 0.2]).s, np.array([[0.25, -1.0], [-1.0, 4.0]]))
    assert np.array_equal(M.scoring_matrix([0.5, 0.5]).s, np.array([[1.0, -1.0], [-1.0, 1.0]]))


@pytest.mark.parametrize("I", [2, 3, 4, 5])
def test_scoring_matrix_matches_oracle_and_symmetric(I):
    rng = np.random.default_rng(I)
    for _ in range(10):
        p = _marginals(rng, I)
        s = M.scoring_matrix(p).s
        assert np.array_equal(s, s.T)
        assert np.max(np.abs(s - _gerrity_oracle(p))) < 1e-12


def test_scoring_matrix_degenerate_rejected():
    with pytest.raises(MetricUndefined, match="class X"):
        M.scoring_matrix([0.0, 0.2, 0.3, 0.5])
    with pytest.raises(MetricUndefined):
        M.scoring_matrix([0.5, 0.5, 0.0, 0.0])
    with pytest.raises(ValueError):
        M.scoring_matrix([0.5, 0.6])


@pytest.mark.parametrize("I", [2, 3, 4])
def test_gmgs_perfect_and_constant(I):
    rng = np.random.default_rng(10 + I)
    for _ in range(20):
        p = _marginals(rng, I)
        counts = rng.multinomial(1000, p) + 1
        labels = np.repeat(np.arange(I), counts)
        table = M.contingency_table(labels, labels, I)
        assert abs(M.gmgs_score(table) - 1) < 1e-10
        for c in range(I):
            const = M.contingency_table(labels, np.full_like(labels, c), I)
            assert abs(M.gmgs_score(const)) < 1e-10


def test_gmgs_two_class_hand_value():
    table = M.ContingencyTable(np.array([[80, 0], [0, 20]]))
    assert M.gmgs_score(table) == pytest.approx(0.8 * 0.25 + 0.2 * 4, abs=1e-15)


def test_influence_examples():
    S = M.scoring_matrix([0.8, 0.2])
    table = M.ContingencyTable(np.array([[70, 10], [0, 20]]))
    inf = M.gmgs_influence(table, S)
    assert inf[0, 1] == pytest.approx(0.125, abs=1e-15)
    assert np.all(np.diag(inf) == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_influence_sums_to_gmgs_gap(seed):
    rng = np.random.default_rng(seed)
    counts = rng.integers(0, 30, (4, 4))
    counts[np.diag_indices(4)] += 5
    table = M.ContingencyTable(counts)
    S = M.scoring_matrix(table.marginals)
    perfect = M.ContingencyTable(np.diag(counts.sum(axis=1)))
    gap = M.gmgs_score(perfect, S) - M.gmgs_score(table, S)
    assert abs(gap - M.gmgs_influence(table, S).sum()) < 1e-12


def test_binarize():
    y, q = M.binarize_geq_m([0, 1, 2, 3], [[0.3, 0.3, 0.2, 0.2]] * 4)
    assert y.tolist() == [1, 1, 0, 0]
    assert q[0] == pytest.approx(0.6)


def test_bss_examples():
    y = np.array([1, 0, 0, 0])
    assert M.bss_geq_m(y.astype(float), y) == 1.0
    rng = np.random.default_rng(0)
    yr = rng.integers(0, 2, 50)
    f = yr.mean()
    assert abs(M.bss_geq_m(np.full(50, f), yr)) < 1e-12
    assert abs(M.bss_geq_m(yr.astype(float), yr) - 1) < 1e-12
    with pytest.raises(MetricUndefined):
        M.bss_geq_m(np.zeros(3), np.zeros(3))
    # two-term Brier: q=0.5 everywhere against f=0.25, N=4
    bs = 4 * 0.25 * 2  # each sample contributes 2 * 0.25
    bs_c = 1 * 2 * 0.75 ** 2 + 3 * 2 * 0.25 ** 2
    assert M.bss_geq_m(np.full(4, 0.5), y) == pytest.approx(1 - bs / bs_c, abs=1e-15)


def test_tss_examples():
    y = np.array([1] * 10 + [0] * 10, dtype=bool)
    pred = np.array([1] * 5 + [0] * 5 + [1] * 2 + [0] * 8, dtype=bool)
    assert M.tss_geq_m(pred, y) == pytest.approx(0.3, abs=1e-15)
    assert M.tss_geq_m(y, y) == 1.0
    assert M.tss_geq_m(np.ones(20, bool), y) == 0.0
    with pytest.raises(MetricUndefined):
        M.tss_geq_m(y[:10], y[:10])


def test_evaluate_one_hot_perfect():
    labels = np.array([0, 1, 1, 2, 2, 2, 3, 3, 3, 3])
    rep = M.evaluate(labels, np.eye(4)[labels])
    assert rep["gmgs"] == pytest.approx(1, abs=1e-12)
    assert rep["tss_geq_m"] == 1.0 and rep["bss_geq_m"] == 1.0
    assert sum(map(sum, rep["confusion"])) == 10


def test_evaluate_fallback_marginals():
    labels = np.array([1, 2, 2, 3, 3, 3])
    with pytest.raises(MetricUndefined):
        M.evaluate(labels, np.eye(4)[labels])
    rep = M.evaluate(labels, np.eye(4)[labels], fallback_marginals=[0.1, 0.2, 0.3, 0.4])
    assert rep["gmgs_marginals"] == "fallback"
    only_neg = np.array([2, 3, 3])
    rep = M.evaluate(only_neg, np.eye(4)[only_neg], fallback_marginals=[0.1, 0.2, 0.3, 0.4])
    assert rep["bss_geq_m"] is None and "bss_geq_m" in rep["undefined"]


def test_prediction_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    probs = rng.dirichlet(np.ones(4), 30)
    labels = rng.integers(0, 4, 30)
    path = tmp_path / "p.csv"
    M.write_predictions(path, np.arange(30) * 3, probs, labels)
    ts, p2, y2 = M.read_predictions(path)
    assert np.array_equal(p2, probs) and np.array_equal(y2, labels)
    assert path.read_text().splitlines()[0].split(",")[5] in "XMCO"
    assert M.metrics_from_file(path) == M.evaluate(labels, probs)


def test_prediction_file_errors(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("1,0.5,0.5\n")
    with pytest.raises(DataError, match="expected 6"):
        M.read_predictions(bad)
    bad.write_text("1,a,0,0,0,X\n")
    with pytest.raises(DataError):
        M.read_predictions(bad)
