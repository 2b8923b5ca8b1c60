import numpy as np
import pytest

from west.errors import DuplicateCenters, EmptySplit, TooShort
from west.graphcore import (
    AccessLog,
    DTDGDataset,
    baseline_adjacency_binary,
    baseline_adjacency_centers,
    baseline_adjacency_traffic,
    chrono_split,
    renormalize,
    window_dataset,
)
from west.mobility import TrafficSeries


def _series(T, n=3, seed=0):
    rng = np.random.default_rng(seed)
    return TrafficSeries(n, 1.0, rng.integers(0, 50, (T, n)))


def _random_sym(rng, n):
    a = rng.uniform(0, 1, (n, n)) * (rng.uniform(size=(n, n)) < 0.6)
    a = np.triu(a, 1)
    a = a + a.T
    np.fill_diagonal(a, rng.uniform(0, 1, n))
    return a / a.max() if a.max() > 0 else a


class TestRenormalize:
    def test_zero_adjacency_is_identity(self):
        np.testing.assert_array_equal(renormalize(np.zeros((4, 4))).matrix, np.eye(4))

    def test_two_nodes(self):
        m = renormalize([[0.0, 1.0], [1.0, 0.0]]).matrix
        np.testing.assert_allclose(m, np.full((2, 2), 0.5), atol=1e-15)

    def test_dense_identity(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            a = _random_sym(rng, int(rng.integers(2, 13)))
            a_hat = a + np.eye(len(a))
            d = np.diag(1.0 / np.sqrt(a_hat.sum(1)))
            np.testing.assert_allclose(renormalize(a).matrix, d @ a_hat @ d, rtol=0, atol=1e-12)

    def test_symmetric_spectrum(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            m = renormalize(_random_sym(rng, int(rng.integers(1, 13)))).matrix
            assert np.array_equal(m, m.T) and (m >= 0).all()
            ev = np.linalg.eigvalsh(m)
            assert ev.min() >= -1 - 1e-10 and ev.max() <= 1 + 1e-10

    @pytest.mark.parametrize("a", [np.ones((2, 3)), [[0, 1], [0, 0]], [[0, -1], [-1, 0]]])
    def test_rejects(self, a):
        with pytest.raises(ValueError):
            renormalize(a)


class TestWindows:
    def test_boundary_single_window(self):
        assert len(window_dataset(_series(12), 6, 6)) == 1

    def test_fourteen_steps(self):
        s = _series(14)
        ds = window_dataset(s, 6, 6, scale=False)
        assert len(ds) == 3
        for m, w in enumerate(ds.windows):
            np.testing.assert_array_equal(w.x, s.counts[m:m + 6].T)
            np.testing.assert_array_equal(w.y, s.counts[m + 6:m + 12].T)
            assert w.start == m

    def test_too_short(self):
        with pytest.raises(TooShort):
            window_dataset(_series(11), 6, 6)

    def test_constant_series(self):
        s = TrafficSeries(2, 1.0, np.full((20, 2), 7))
        ds = window_dataset(s, 3, 2)
        assert np.ptp(ds.x) == 0
        np.testing.assert_array_equal(ds.scaler.inverse(ds.y), 7.0)

    def test_scaler_fit_on_train_portion(self):
        counts = np.zeros((30, 1))
        counts[:10, 0] = np.arange(10)
        counts[-1, 0] = 1000  # only inside the test tail
        ds = window_dataset(TrafficSeries(1, 1.0, counts), 2, 2, train_fraction=0.5)
        assert ds.scaler.hi == 9.0 and ds.scaler.lo == 0.0
        np.testing.assert_allclose(ds.scaler.inverse(ds.y), np.stack(
            [counts[s + 2:s + 4].T for s in ds.starts]))


class TestSplit:
    def test_ten_windows(self):
        ds = window_dataset(_series(11), 1, 1)
        train, test = chrono_split(ds, 0.8)
        assert len(test) == 2
        # windows 0..7 precede the cut; the one ending at the test start is dropped
        assert list(train.starts) == list(range(7))

    def test_five_windows_floor(self):
        ds = window_dataset(_series(6), 1, 1)
        train, test = chrono_split(ds, 0.5)
        assert list(test.starts) == [2, 3, 4]
        assert len(train) == 1  # floor gives 2, minus the straddling window

    def test_leakage_free(self):
        ds = window_dataset(_series(100), 6, 6)
        train, test = chrono_split(ds, 0.8)
        assert train.target_indices().max() < test.feature_indices().min()
        assert len(set(train.target_indices().ravel()) & set(test.feature_indices().ravel())) == 0

    @pytest.mark.parametrize("T,frac", [(12, 0.05), (2, 0.99)])
    def test_empty_side(self, T, frac):
        with pytest.raises(EmptySplit):
            chrono_split(window_dataset(_series(T), 1, 1), frac)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            chrono_split(window_dataset(_series(12), 1, 1), 1.0)

    def test_access_log(self):
        log = AccessLog()
        ds = window_dataset(_series(30), 2, 2).with_log(log)
        train, test = chrono_split(ds, 0.8)
        train.arrays()
        assert log.reads("test") == []
        test.arrays([0])
        assert log.reads("test") == [("test", (int(test.starts[0]),))]


class TestBaselines:
    def test_binary_grid(self, grid2x2):
        b = baseline_adjacency_binary(grid2x2)
        expect = np.array([[1, 1, 1, 0], [1, 1, 0, 1], [1, 0, 1, 1], [0, 1, 1, 1]], float)
        np.testing.assert_array_equal(b, expect)

    def test_centers(self):
        a = baseline_adjacency_centers([(0, 0), (1, 0), (3, 0)])
        # inverse distances 1, 1/3, 1/2, max 1
        np.testing.assert_allclose(a, [[1, 1, 1 / 3], [1, 1, 0.5], [1 / 3, 0.5, 1]], atol=1e-15)

    def test_centers_duplicate(self):
        with pytest.raises(DuplicateCenters):
            baseline_adjacency_centers([(0, 0), (0, 0)])

    def test_traffic_identical(self):
        x = np.random.default_rng(0).normal(size=50)
        a = baseline_adjacency_traffic(np.column_stack([x, x]))
        np.testing.assert_allclose(a, np.ones((2, 2)), atol=1e-12)

    def test_traffic_anticorrelated(self):
        x = np.random.default_rng(0).normal(size=50)
        a = baseline_adjacency_traffic(np.column_stack([x, 10 - x]))
        assert a[0, 1] == 0.0 and a[1, 0] == 0.0

    def test_traffic_half_correlation(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=20000)
        z = (x - x.mean()) / x.std()
        y = 0.5 * z + np.sqrt(0.75) * rng.normal(size=x.size)
        a = baseline_adjacency_traffic(np.column_stack([x, y]))
        r = np.corrcoef(x, y)[0, 1]
        assert a[0, 1] == pytest.approx(r, abs=1e-12)
        assert abs(a[0, 1] - 0.5) <= 0.05

    def test_traffic_zero_variance(self):
        a = baseline_adjacency_traffic(np.column_stack([np.ones(5), np.arange(5.0)]))
        np.testing.assert_array_equal(a, np.eye(2))

    def test_all_builders_sane(self, six_regions):
        rng = np.random.default_rng(4)
        mats = [
            baseline_adjacency_binary(six_regions),
            baseline_adjacency_centers([r.center for r in six_regions]),
            baseline_adjacency_traffic(rng.poisson(5, (40, 6))),
        ]
        for m in mats:
            assert np.array_equal(m, m.T)
            assert (m >= 0).all() and (m <= 1).all()
            np.testing.assert_array_equal(np.diag(m), 1.0)


def test_dataset_round_trip(tmp_path):
    ds = window_dataset(_series(25, n=4), 3, 2)
    ds.save(tmp_path / "ds")
    back = DTDGDataset.load(tmp_path / "ds")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.starts, ds.starts)
    assert back.scaler == ds.scaler and back.fingerprint() == ds.fingerprint()
