import calendar

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import freewaytt.tuning as tuning
from freewaytt.errors import FormatError, ValidationError
from freewaytt.features import FeatureSpec, SupervisedDataset, build_supervised
from freewaytt.tuning import (
    GridSpec,
    chronological_split,
    cv_score,
    cv_surface,
    evaluate_horizons,
    grid_search,
    kfold_split,
    mape,
    parse_grid_config,
    split_peak,
    write_tune_csv,
)


def toy_dataset(n=100, seed=0, n_seg=2, constant=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(20, 60, size=(n, 3))
    y = np.full(n, constant) if constant is not None else X[:, 0] * 0.9 + 5 + rng.normal(0, 1, n)
    seg = np.array([f"S{i % n_seg + 1}" for i in range(n)], dtype=object)
    start = calendar.timegm((2013, 4, 1, 6, 0, 0)) + 300 * np.arange(n, dtype=np.int64)
    return SupervisedDataset(["a", "b", "c"], X, y, seg, start, start - 300)


class TestMape:
    def test_hand_cases(self):
        assert abs(mape([100, 200], [90, 220]) - 10.0) <= 1e-12
        assert mape([3.0, 4.0], [3.0, 4.0]) == 0.0
        assert abs(mape([50], [100]) - 100.0) <= 1e-12

    def test_zero_actual(self):
        with pytest.raises(ValidationError):
            mape([0.0, 1.0], [1.0, 1.0])

    @given(st.lists(st.tuples(st.floats(1, 1e3), st.floats(0, 1e3)), min_size=1, max_size=20),
           st.floats(1e-3, 1e3))
    def test_scale_invariant(self, pairs, c):
        a, p = np.array(pairs).T
        assert mape(c * a, c * p) == pytest.approx(mape(a, p), rel=1e-9, abs=1e-9)


class TestKFold:
    def test_even(self):
        assert [len(f) for f in kfold_split(10, 5, 0)] == [2] * 5

    def test_remainder(self):
        assert sorted(len(f) for f in kfold_split(11, 5, 0)) == [2, 2, 2, 2, 3]

    def test_seeded(self):
        a, b = kfold_split(37, 4, 9), kfold_split(37, 4, 9)
        assert all(np.array_equal(x, y) for x, y in zip(a, b))

    @given(st.integers(2, 300), st.integers(2, 10), st.integers(0, 1000))
    def test_partition_properties(self, n, k, seed):
        if k > n:
            return
        folds = kfold_split(n, k, seed)
        allv = np.concatenate(folds)
        assert sorted(allv.tolist()) == list(range(n))
        sizes = [len(f) for f in folds]
        assert max(sizes) - min(sizes) <= 1


class TestCv:
    @pytest.mark.parametrize("algo", ["dt", "bagging", "rf", "adaboost", "gb", "xgb"])
    def test_constant_target(self, algo):
        ds = toy_dataset(40, constant=50.0)
        assert cv_score(ds, algo, {"t": 5, "d": 2, "L": 0.5}, k=4) == 0.0

    def test_fits_per_grid_point(self, monkeypatch):
        calls = []
        real = tuning.fit_model

        def counting(*a, **kw):
            calls.append(1)
            return real(*a, **kw)

        monkeypatch.setattr(tuning, "fit_model", counting)
        grid = GridSpec("xgb", t_values=[3, 6], d_values=[2], L_values=[0.1, 0.5], k=5)
        grid_search(toy_dataset(100), grid)
        # 2 fit groups (L) x 5 folds; the t axis is served by staged prediction
        assert len(calls) == 2 * 5

    @pytest.mark.parametrize("algo", ["gb", "xgb", "bagging"])
    def test_staged_equals_retrained(self, algo):
        ds = toy_dataset(80)
        surface = cv_surface(ds, algo, {"L": 0.3, "d": 2}, [2, 5, 9], k=4, seed=3)
        for i, t in enumerate([2, 5, 9]):
            direct = cv_score(ds, algo, {"t": t, "L": 0.3, "d": 2}, k=4, seed=3)
            assert abs(surface[i].mean() - direct) < 1e-9

    def test_fold_missing_segment_warns(self, caplog):
        ds = toy_dataset(12, n_seg=12)
        cv_score(ds, "dt", k=3)
        assert "omitted" in caplog.text

    def test_workers_do_not_change_scores(self):
        ds = toy_dataset(60)
        grid = GridSpec("gb", t_values=[2, 4], d_values=[1, 2], L_values=[0.5], k=3, seed=1)
        a, b = grid_search(ds, grid), grid_search(ds, grid, workers=3)
        assert [r.fold_mapes for r in a.rows] == [r.fold_mapes for r in b.rows]


class TestGridSearch:
    def test_single_point(self):
        r = grid_search(toy_dataset(), GridSpec("xgb", t_values=[5], d_values=[3], L_values=[0.1], k=3))
        assert len(r.rows) == 1 and r.best_params == {"t": 5, "L": 0.1, "d": 3}

    def test_surface_size(self):
        grid = GridSpec("xgb", t_values=[1, 3, 5], d_values=[1, 2], L_values=[0.1, 0.5], k=3)
        assert len(grid_search(toy_dataset(), grid).rows) == 12

    def test_relevant_axes_only(self):
        grid = GridSpec("rf", t_values=[2, 3], k=3)
        r = grid_search(toy_dataset(60), grid)
        assert len(r.rows) == 2 and all(row.params["L"] is None and row.params["d"] is None for row in r.rows)

    def test_reproducible(self, tmp_path):
        grid = GridSpec("adaboost", t_values=[2, 4], L_values=[0.5, 1.0], k=3, seed=4)
        write_tune_csv(tmp_path / "a.csv", grid_search(toy_dataset(), grid))
        write_tune_csv(tmp_path / "b.csv", grid_search(toy_dataset(), grid))
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_tie_break(self):
        rows = [tuning.ComboScore({"t": t, "L": L, "d": d}, 1.0, 0.0, (1.0,))
                for t in (5, 2) for d in (3, 1) for L in (0.1, 0.5)]
        assert min(rows, key=tuning._tie_key).params == {"t": 2, "L": 0.5, "d": 1}

    def test_best_is_minimum(self):
        r = grid_search(toy_dataset(), GridSpec("gb", t_values=[1, 10], d_values=[1, 3], L_values=[0.5], k=3))
        assert r.best.mean_mape == min(row.mean_mape for row in r.rows)

    def test_csv_layout(self, tmp_path):
        r = grid_search(toy_dataset(), GridSpec("xgb", t_values=[2], d_values=[2], L_values=[0.1], k=3))
        write_tune_csv(tmp_path / "r.csv", r)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "algorithm,t,L,d,mean_mape,sd_mape,fold_1,fold_2,fold_3,best"
        assert lines[1].startswith("xgb,2,0.1,2,") and lines[1].endswith(",1")

    def test_grid_validation(self):
        with pytest.raises(ValidationError):
            GridSpec("xgb", t_values=[0])
        with pytest.raises(ValidationError):
            GridSpec("xgb", t_values=[5], d_values=[8])
        with pytest.raises(ValidationError):
            GridSpec("gb", t_values=[5], L_values=[])


class TestGridConfig:
    def test_parse(self):
        g = parse_grid_config("# xgb sweep\nt = 10, 40\nd = 2..4\nL = 0.1 0.5\nlambda = 2\nk = 3\nseed = 9\n", "xgb")
        assert list(g.t_values) == [10, 40] and list(g.d_values) == [2, 3, 4]
        assert list(g.L_values) == [0.1, 0.5] and g.fixed == {"lam": 2.0} and (g.k, g.seed) == (3, 9)

    def test_t_required(self):
        with pytest.raises(ValidationError):
            parse_grid_config("d = 2\n", "gb")

    def test_bad_line(self):
        with pytest.raises(FormatError):
            parse_grid_config("t 10\n", "gb")
        with pytest.raises(FormatError):
            parse_grid_config("t = 1\ncolor = red\n", "gb")


class TestSplits:
    def test_chronological(self):
        ds = toy_dataset(20)
        tr, te = chronological_split(ds, 0.75)
        assert len(tr) == 15 and ds.target_start[tr].max() < ds.target_start[te].min()

    def test_peak_classification(self):
        day = calendar.timegm((2013, 4, 1, 0, 0, 0))
        starts = np.array([day + 7 * 3600 + 1800, day + 12 * 3600, day + 16 * 3600, day + 19 * 3600])
        ds = SupervisedDataset(["a"], np.zeros((4, 1)), np.ones(4), np.array(["S"] * 4, dtype=object), starts,
                               starts - 300)
        peak, off = split_peak(ds)
        assert peak.tolist() == [0, 2] and off.tolist() == [1, 3]
        peak, off = split_peak(ds, [])
        assert peak.size == 0 and off.size == 4


class TestEvaluate:
    def test_single_horizon(self, ar_matrix):
        res = evaluate_horizons(ar_matrix, "xgb", horizons=[1], seed=1)
        assert len(res) == 1 and res[0].horizon == 1 and res[0].mape > 0
        assert set(res[0].by_period) == {"peak", "non-peak"}

    def test_train_not_worse_than_test(self, ar_matrix):
        (r,) = evaluate_horizons(ar_matrix, "xgb", horizons=[2], seed=1)
        assert r.train_mape <= r.mape

    def test_test_rows_are_later(self, ar_matrix):
        (r,) = evaluate_horizons(ar_matrix, "dt", {"d": 4}, horizons=[1], seed=1)
        ds = build_supervised(ar_matrix, FeatureSpec(3, 1))
        tr, _ = chronological_split(ds)
        assert r.test.target_start.min() >= ds.target_start[tr].max()
