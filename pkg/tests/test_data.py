import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odehazard.data import (
    DataError,
    SurvivalDataset,
    censoring_summary,
    kaplan_meier,
    load_dataset,
    write_dataset,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


class TestLoad:
    def test_roundtrip(self, tmp_path):
        p = _write(tmp_path / "d.csv", "time,status\n1.5,1\n2.0,0\n0.25,1\n")
        ds = load_dataset(p)
        np.testing.assert_array_equal(ds.times, [1.5, 2.0, 0.25])
        np.testing.assert_array_equal(ds.status, [1, 0, 1])
        write_dataset(ds, tmp_path / "e.csv")
        back = load_dataset(tmp_path / "e.csv")
        np.testing.assert_array_equal(back.times, ds.times)
        np.testing.assert_array_equal(back.status, ds.status)

    def test_custom_columns(self, tmp_path):
        p = _write(tmp_path / "d.csv", "id,dtime,death\n1,3.0,1\n2,4.0,0\n")
        ds = load_dataset(p, "dtime", "death")
        assert ds.n == 2 and ds.events == 1

    @pytest.mark.parametrize(
        "body",
        ["time,status\n1,2\n", "time,status\n1,1\n-3,0\n", "time,status\n0,1\n", "time,status\nx,1\n",
         "time,status\n1,\n", "time,status\n"],
    )
    def test_invalid_rejects_whole_file(self, tmp_path, body):
        with pytest.raises(DataError):
            load_dataset(_write(tmp_path / "d.csv", body))

    def test_missing_column(self, tmp_path):
        with pytest.raises(DataError, match="column"):
            load_dataset(_write(tmp_path / "d.csv", "t,status\n1,1\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_dataset(tmp_path / "nope.csv")

    def test_arrays_read_only(self):
        ds = SurvivalDataset([1.0, 2.0], [1, 0])
        with pytest.raises(ValueError):
            ds.times[0] = 5.0


def test_censoring_summary():
    ds = SurvivalDataset([1, 2, 3, 4], [1, 0, 0, 1])
    assert censoring_summary(ds) == {"n": 4, "events": 2, "censored": 2, "rate": 0.5}
    assert censoring_summary(SurvivalDataset([1.0], [1]))["rate"] == 0.0


class TestKaplanMeier:
    def test_hand_example(self):
        # at risk 5,4,(censor),2 : S = 4/5, 4/5*1/2... computed by hand
        ds = SurvivalDataset([1, 2, 3, 4, 5], [1, 1, 0, 1, 0])
        km = kaplan_meier(ds)
        np.testing.assert_allclose(km.knots, [1, 2, 4])
        np.testing.assert_allclose(km.values, [0.8, 0.6, 0.3])
        np.testing.assert_allclose(km([0.5, 1.0, 1.5, 3.9, 4.0, 10.0]), [1.0, 0.8, 0.8, 0.6, 0.3, 0.3])

    def test_ties_events_before_censoring(self):
        ds = SurvivalDataset([2, 2, 2, 3], [1, 0, 1, 1])
        km = kaplan_meier(ds)
        np.testing.assert_allclose(km.values, [0.5, 0.0])

    def test_no_events_is_flat(self):
        km = kaplan_meier(SurvivalDataset([1, 2], [0, 0]))
        assert km(5.0) == 1.0

    def test_uncensored_equals_ecdf(self):
        t = np.random.default_rng(0).exponential(size=200)
        km = kaplan_meier(SurvivalDataset(t, np.ones(200, int)))
        grid = np.linspace(0.01, 3, 50)
        ecdf = (t[None, :] <= grid[:, None]).mean(axis=1)
        np.testing.assert_allclose(km(grid), 1 - ecdf, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.01, 100), st.integers(0, 1)), min_size=1, max_size=40))
    def test_monotone_in_unit_interval(self, rows):
        ds = SurvivalDataset([r[0] for r in rows], [r[1] for r in rows])
        km = kaplan_meier(ds)
        assert np.all(np.diff(km.values) <= 1e-15)
        assert np.all((km.values >= 0) & (km.values <= 1))
