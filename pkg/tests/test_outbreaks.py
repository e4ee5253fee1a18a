import numpy as np
import pytest
from scipy import stats

from rollcast.metrics import ForecastRecord
from rollcast.outbreaks import annotate_rising, load_annotations, save_annotations, stratify
from rollcast.panel import PanelDataset
from tests.conftest import make_panel, write_csv


def _panel_from_series(series, frequency="daily"):
    values = np.asarray(series, dtype=np.float64)[:, None]
    template = make_panel(T=values.shape[0], n=1, frequency=frequency)
    return PanelDataset(template.dates, ("r0",), values, frequency,
                        np.zeros_like(values, dtype=bool))


class TestAnnotateRising:
    def test_exponential_growth_single_interval(self):
        # Oracle: scipy.stats.linregress on each trailing log window.
        t = np.arange(30)
        series = 10.0 * np.exp(0.4 * t)
        panel = _panel_from_series(series)
        window, alpha = 7, 0.05
        expected = []
        logy = np.log1p(series)
        for end in range(window - 1, 30):
            seg = logy[end - window + 1 : end + 1]
            res = stats.linregress(np.arange(window), seg)
            expected.append(res.slope > 0 and res.pvalue < alpha)
        assert all(expected)
        ann = annotate_rising(panel, window=window, alpha=alpha)
        assert len(ann.intervals) == 1
        iv = ann.intervals[0]
        assert panel.index_of(iv.start) == window - 1
        assert panel.index_of(iv.end) == 29

    def test_constant_series_empty(self):
        panel = _panel_from_series(np.full(20, 7.0))
        assert annotate_rising(panel, window=5).intervals == ()

    def test_decreasing_series_empty(self):
        panel = _panel_from_series(100.0 * np.exp(-0.3 * np.arange(20)))
        assert annotate_rising(panel, window=5).intervals == ()

    def test_pvalues_match_linregress(self):
        rng = np.random.default_rng(3)
        series = np.abs(np.cumsum(rng.normal(0.2, 1.0, size=40))) + 1.0
        panel = _panel_from_series(series)
        window, alpha = 6, 0.2
        ann = annotate_rising(panel, window=window, alpha=alpha)
        marked = np.zeros(40, dtype=bool)
        for iv in ann.intervals:
            marked[panel.index_of(iv.start) : panel.index_of(iv.end) + 1] = True
        logy = np.log1p(series)
        rising = np.zeros(40, dtype=bool)
        for end in range(window - 1, 40):
            res = stats.linregress(np.arange(window), logy[end - window + 1 : end + 1])
            rising[end] = res.slope > 0 and res.pvalue < alpha
        # marked = rising runs of length >= 2
        expected = np.zeros(40, dtype=bool)
        run = 0
        for t in range(41):
            if t < 40 and rising[t]:
                run += 1
            else:
                if run >= 2:
                    expected[t - run : t] = True
                run = 0
        assert np.array_equal(marked, expected)

    def test_alpha_monotonicity(self):
        rng = np.random.default_rng(5)
        series = np.abs(np.cumsum(rng.normal(0.1, 1.0, size=50))) + 1.0
        panel = _panel_from_series(series)

        def rising_set(alpha):
            ann = annotate_rising(panel, window=6, alpha=alpha)
            out = set()
            for iv in ann.intervals:
                out.update(range(panel.index_of(iv.start), panel.index_of(iv.end) + 1))
            return out

        small, large = rising_set(0.01), rising_set(0.3)
        assert small <= large

    def test_window_too_long(self):
        panel = _panel_from_series(np.arange(5, dtype=float))
        with pytest.raises(ValueError, match="exceeds panel length"):
            annotate_rising(panel, window=6)

    def test_determinism(self):
        panel = _panel_from_series(np.abs(np.sin(np.arange(30))) * 10 + 1)
        a = annotate_rising(panel, window=5, alpha=0.1)
        b = annotate_rising(panel, window=5, alpha=0.1)
        assert a == b


class TestLoadAnnotations:
    def test_single_row(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         [f"r0,{d[3]},{d[5]}"])
        ann = load_annotations(path, daily_panel)
        assert len(ann.intervals) == 1
        assert ann.source == "ingested"

    def test_overlap_merged(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         [f"r0,{d[1]},{d[4]}", f"r0,{d[3]},{d[6]}"])
        ann = load_annotations(path, daily_panel)
        assert len(ann.intervals) == 1
        assert (ann.intervals[0].start, ann.intervals[0].end) == (d[1], d[6])

    def test_end_before_start(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         [f"r0,{d[5]},{d[3]}"])
        with pytest.raises(ValueError, match="precedes start"):
            load_annotations(path, daily_panel)

    def test_outside_date_range(self, tmp_path, daily_panel):
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         ["r0,2030-01-01,2030-01-05"])
        with pytest.raises(ValueError, match="not on the panel's date axis"):
            load_annotations(path, daily_panel)

    def test_unknown_region(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         [f"zz,{d[0]},{d[1]}"])
        with pytest.raises(ValueError, match="unknown region"):
            load_annotations(path, daily_panel)

    def test_save_round_trip(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end",
                         [f"r0,{d[3]},{d[5]}", f"r1,{d[0]},{d[2]}"])
        ann = load_annotations(path, daily_panel)
        save_annotations(ann, tmp_path / "out.csv")
        again = load_annotations(tmp_path / "out.csv", daily_panel)
        assert set(again.intervals) == set(ann.intervals)


def _record(origin, horizon, region="r0"):
    return ForecastRecord(origin=origin, horizon=horizon, region=region,
                          prediction=1.0, truth=2.0, naive_reference=3.0)


class TestStratify:
    def test_containment(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end", [f"r0,{d[3]},{d[5]}"])
        ann = load_annotations(path, daily_panel)
        rec = _record(d[3], 1)  # target d[4], inside
        outbreak, non = stratify([rec], ann, "daily")
        assert outbreak == [rec] and non == []

    def test_empty_annotations(self, daily_panel):
        from rollcast.outbreaks import AnnotationSet

        rec = _record(daily_panel.dates[3], 1)
        outbreak, non = stratify([rec], AnnotationSet((), "computed"), "daily")
        assert outbreak == [] and non == [rec]

    def test_inclusive_end_boundary(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end", [f"r0,{d[3]},{d[5]}"])
        ann = load_annotations(path, daily_panel)
        rec = _record(d[4], 1)  # target d[5] == interval end
        outbreak, _ = stratify([rec], ann, "daily")
        assert outbreak == [rec]

    def test_partition_exhaustive(self, tmp_path, daily_panel):
        d = daily_panel.dates
        path = write_csv(tmp_path / "ann.csv", "region,start,end", [f"r1,{d[2]},{d[9]}"])
        ann = load_annotations(path, daily_panel)
        records = [_record(d[i], 1, region) for i in range(8) for region in ("r0", "r1")]
        outbreak, non = stratify(records, ann, "daily")
        assert len(outbreak) + len(non) == len(records)
        assert set(outbreak) | set(non) == set(records)
        assert all(r.region == "r1" for r in outbreak)
