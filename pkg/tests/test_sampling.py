import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from lift3d.sampling import RaySamples, bin_edges, importance, merge, stratified
from lift3d.tensorio import Rng


def test_stratified_examples():
    s = stratified(0.0, 2.0, 1, Rng(0))
    assert s.ts.shape == (1,) and 0 <= s.ts[0] < 2
    s = stratified(0.0, 2.0, 4)
    assert np.allclose(s.ts, [0.25, 0.75, 1.25, 1.75])


@given(st.integers(1, 64), st.integers(0, 2**32), st.floats(0.1, 3), st.floats(0.1, 5))
def test_stratified_one_per_bin(K, seed, near, span):
    far = near + span
    s = stratified(near, far, K, Rng(seed))
    assert np.all(np.diff(s.ts) > 0)
    bins = np.floor((s.ts - near) / span * K).astype(int)
    assert np.array_equal(bins, np.arange(K))
    assert s.ts.min() >= near and s.ts.max() < far
    assert np.all(s.deltas >= 0) and np.isclose(s.deltas[-1], far - s.ts[-1])


def two_bins():
    return RaySamples(np.array([0.5, 1.5]), 0.0, 2.0)


def test_importance_two_bin_fraction():
    s = importance(two_bins(), np.array([1.0, 3.0]), 10_000, Rng(1))
    assert abs((s.ts > 1.0).mean() - 0.75) < 0.02


def test_importance_delta_limit():
    bins = stratified(0.0, 1.0, 8)
    w = np.zeros(8)
    w[5] = 1.0
    s = importance(bins, w, 200, Rng(2))
    e = bin_edges(bins)
    assert np.all((s.ts >= e[5]) & (s.ts <= e[6]))


def test_importance_uniform_ks():
    bins = stratified(0.0, 1.0, 16)
    s = importance(bins, np.ones(16), 10_000, Rng(3))
    assert stats.kstest(s.ts, "uniform").statistic < 0.05


def test_importance_chi_square_against_pdf():
    r = np.random.default_rng(4)
    bins = stratified(1.0, 3.0, 16)
    w = r.uniform(0, 1, 16) ** 2
    s = importance(bins, w, 10_000, Rng(4))
    e = bin_edges(bins)
    counts = np.histogram(s.ts, bins=e)[0]
    p = (w + 1e-5) / (w + 1e-5).sum()
    assert stats.chisquare(counts, 10_000 * p).pvalue > 0.01


def test_importance_zero_weights_fall_back(caplog):
    bins = stratified(np.zeros(3), np.ones(3), 4)
    w = np.zeros((3, 4))
    w[1, 2] = 1.0
    with caplog.at_level("INFO"):
        s = importance(bins, w, 8, Rng(5))
    assert "all-zero" in caplog.text
    # rows 0 and 2 are stratified: one sample per eighth
    for row in (0, 2):
        assert np.array_equal(np.floor(s.ts[row] * 8).astype(int), np.arange(8))


@given(st.integers(1, 32), st.integers(1, 32), st.integers(0, 2**32))
def test_importance_bounds_and_sorted(K, M, seed):
    r = np.random.default_rng(seed)
    bins = stratified(0.5, 4.0, K, Rng(seed))
    s = importance(bins, r.uniform(0, 1, K), M, Rng(seed + 1))
    assert s.ts.shape == (M,)
    assert np.all(np.diff(s.ts) >= 0)
    assert s.ts.min() >= 0.5 and s.ts.max() <= 4.0


def test_merge():
    x = RaySamples(np.array([0.5]), 0.0, 1.0)
    empty = RaySamples(np.zeros(0), 0.0, 1.0)
    assert np.array_equal(merge(x, empty).ts, x.ts)
    m = merge(x, RaySamples(np.array([0.25, 0.75]), 0.0, 1.0))
    assert np.allclose(m.ts, [0.25, 0.5, 0.75])
    # independent recompute of deltas
    assert np.allclose(m.deltas, [0.25, 0.25, 0.25])


def test_batched_shapes():
    s = stratified(np.full(5, 1.0), np.full(5, 2.0), 6, Rng(0))
    assert s.ts.shape == (5, 6) and s.deltas.shape == (5, 6)
    f = importance(s, np.ones((5, 6)), 7, Rng(1))
    assert merge(s, f).ts.shape == (5, 13)
