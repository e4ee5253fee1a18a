import math
import statistics
from dataclasses import replace
from datetime import date, timedelta

import numpy as np
import pytest

from rollcast.metrics import (
    ForecastRecord,
    IntervalEstimate,
    bootstrap_by_month,
    build_filter_mask,
    filtered_metrics,
    mean_signed_error,
    meta_across_horizons,
    point_metrics,
    read_prediction_rows,
    relative_rmse,
    win_rate,
    write_records,
)


def records_from(preds, truths, naive=None, start=date(2021, 1, 4), horizon=1):
    naive = naive if naive is not None else truths
    return [
        ForecastRecord(origin=start + timedelta(days=i), horizon=horizon, region="r0",
                       prediction=float(p), truth=float(t), naive_reference=float(nv))
        for i, (p, t, nv) in enumerate(zip(preds, truths, naive))
    ]


def random_records(rng, max_count=20):
    count = int(rng.integers(1, max_count + 1))
    preds = rng.normal(0, 5, count)
    truths = rng.normal(0, 5, count)
    naive = rng.normal(0, 5, count)
    return records_from(preds, truths, naive)


# --- definition-level reimplementation, pure python, used as the oracle ----

def oracle_metrics(records):
    err = [r.prediction - r.truth for r in records]
    sq = [e * e for e in err]
    ab = [abs(e) for e in err]
    return {
        "mse": statistics.fmean(sq),
        "mae": statistics.fmean(ab),
        "rmse": math.sqrt(statistics.fmean(sq)),
        "med_ae": statistics.median(ab),
        "med_se": statistics.median(sq),
        "win_rate": statistics.fmean(
            1.0 if abs(r.prediction - r.truth) < abs(r.naive_reference - r.truth) else 0.0
            for r in records
        ),
        "mean_signed_error": statistics.fmean(err),
    }


class TestPointMetrics:
    def test_hand_arithmetic(self):
        recs = records_from([1, 2, 3], [1, 2, 4])
        m = point_metrics(recs)
        assert m.mae == pytest.approx(1 / 3, abs=1e-15)
        assert m.mse == pytest.approx(1 / 3, abs=1e-15)
        assert m.rmse == pytest.approx(math.sqrt(1 / 3), abs=1e-15)
        assert m.med_ae == 0.0
        assert m.med_se == 0.0

    def test_perfect_forecast(self):
        recs = records_from([2, 4], [2, 4])
        m = point_metrics(recs)
        assert (m.mse, m.mae, m.rmse, m.med_ae, m.med_se) == (0, 0, 0, 0, 0)

    def test_single_record(self):
        recs = records_from([5], [3])
        m = point_metrics(recs)
        assert (m.mae, m.mse, m.med_ae, m.med_se) == (2, 4, 2, 4)

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="no records"):
            point_metrics([])

    def test_rmse_consistency(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = point_metrics(random_records(rng))
            assert abs(m.rmse - math.sqrt(m.mse)) <= 1e-12


class TestBruteForceEquivalence:
    def test_1000_random_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(1000):
            recs = random_records(rng)
            m = point_metrics(recs)
            expect = oracle_metrics(recs)
            for name in ("mse", "mae", "rmse", "med_ae", "med_se"):
                assert abs(getattr(m, name) - expect[name]) <= 1e-12
            assert abs(win_rate(recs) - expect["win_rate"]) <= 1e-12
            assert abs(mean_signed_error(recs) - expect["mean_signed_error"]) <= 1e-12

    def test_scale_equivariance(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            recs = random_records(rng)
            k = float(rng.uniform(0.1, 9))
            scaled = [replace(r, prediction=k * r.prediction, truth=k * r.truth,
                              naive_reference=k * r.naive_reference) for r in recs]
            m, ms = point_metrics(recs), point_metrics(scaled)
            assert ms.mae == pytest.approx(k * m.mae, rel=1e-12)
            assert ms.med_ae == pytest.approx(k * m.med_ae, rel=1e-12)
            assert ms.mse == pytest.approx(k * k * m.mse, rel=1e-12)
            assert ms.med_se == pytest.approx(k * k * m.med_se, rel=1e-12)
            assert win_rate(scaled) == win_rate(recs)


class TestFilterMask:
    def test_normal_exclusion_rate(self):
        # For a normal distribution the c=1.5 fence excludes ~0.7%.
        rng = np.random.default_rng(123)
        truths = rng.standard_normal(10**6) + 5.0
        mask = build_filter_mask(truths, 1.5)
        excluded = 1.0 - mask.kept_count / truths.size
        assert excluded == pytest.approx(0.007, abs=0.001)

    def test_only_zero_removed_with_infinite_fence(self):
        mask = build_filter_mask([0.0, 1.0, 2.0, 3.0], math.inf)
        assert list(mask.keep) == [False, True, True, True]

    def test_brute_force_fences(self):
        # [1,1,1,1000]: brute-force the pinned quartile convention.
        truths = np.array([1.0, 1.0, 1.0, 1000.0])
        c = 1.5
        srt = np.sort(truths)

        def quantile(q):
            pos = q * (len(srt) - 1)
            lo, frac = int(math.floor(pos)), pos - math.floor(pos)
            hi = min(lo + 1, len(srt) - 1)
            return srt[lo] * (1 - frac) + srt[hi] * frac

        q1, q3 = quantile(0.25), quantile(0.75)
        mask = build_filter_mask(truths, c)
        assert mask.q1 == pytest.approx(q1, abs=1e-12)
        assert mask.q3 == pytest.approx(q3, abs=1e-12)
        assert mask.upper_fence == pytest.approx(q3 + c * (q3 - q1), abs=1e-12)
        assert list(mask.keep) == [True, True, True, False]

    def test_monotone_in_c(self):
        rng = np.random.default_rng(5)
        truths = rng.normal(3, 2, size=200)
        kept = [build_filter_mask(truths, c).kept_count for c in (0.0, 0.5, 1.0, 1.5, 3.0)]
        assert kept == sorted(kept)


class TestFilteredMetrics:
    def test_identity_mask(self):
        recs = records_from([1, 2, 3], [1.5, 2.5, 3.5])
        mask = build_filter_mask([r.truth for r in recs], 10.0)
        assert filtered_metrics(recs, mask) == point_metrics(recs)

    def test_masked_error_invisible(self):
        recs = records_from([9.0, 2.0, 3.0], [0.0, 2.0, 3.0])
        mask = build_filter_mask([r.truth for r in recs], math.inf)
        m = filtered_metrics(recs, mask)
        assert m.mse == 0.0 and m.count == 2

    def test_oracle_equality_on_subset(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            recs = random_records(rng)
            if rng.uniform() < 0.3:
                idx = int(rng.integers(len(recs)))
                recs[idx] = replace(recs[idx], truth=0.0)
            c = float(rng.uniform(0.5, 3.0))
            mask = build_filter_mask([r.truth for r in recs], c)
            kept = [r for r, k in zip(recs, mask.keep) if k]
            if not kept:
                with pytest.raises(ValueError, match="empty after filtering"):
                    filtered_metrics(recs, mask)
                continue
            a, b = filtered_metrics(recs, mask), point_metrics(kept)
            for name in ("mse", "mae", "rmse", "med_ae", "med_se"):
                assert abs(getattr(a, name) - getattr(b, name)) <= 1e-12


class TestWinRate:
    def test_self_comparison_is_zero(self):
        recs = records_from([4, 5], [3, 9], naive=[4, 5])
        assert win_rate(recs) == 0.0

    def test_perfect_vs_imperfect_naive(self):
        recs = records_from([3, 9], [3, 9], naive=[4, 5])
        assert win_rate(recs) == 1.0

    def test_tie_counts_as_loss(self):
        # one strictly better, one exactly tied -> 0.5 by enumeration
        recs = records_from([3.0, 5.0], [3.0, 4.0], naive=[2.0, 3.0])
        assert abs(recs[1].prediction - recs[1].truth) == abs(recs[1].naive_reference - recs[1].truth)
        assert win_rate(recs) == 0.5


class TestSignedError:
    def test_systematic_under_prediction(self):
        recs = records_from([1, 2, 3], [3, 4, 5])
        assert mean_signed_error(recs) == -2.0

    def test_symmetric_cancellation(self):
        recs = records_from([1, 3], [2, 2])
        assert mean_signed_error(recs) == 0.0

    def test_over_prediction(self):
        assert mean_signed_error(records_from([5], [3])) == 2.0


class TestRelativeRmse:
    def test_naive_is_exactly_one(self):
        rng = np.random.default_rng(3)
        truths = rng.normal(0, 4, 30)
        naive = rng.normal(0, 4, 30)
        recs = records_from(naive, truths, naive)
        assert relative_rmse(recs) == 1.0


class TestBootstrap:
    def _monthly_records(self, months=6, per_month=10, seed=0):
        rng = np.random.default_rng(seed)
        recs = []
        for m in range(months):
            base = date(2021, 1 + m, 1)
            for i in range(per_month):
                recs.append(ForecastRecord(
                    origin=base + timedelta(days=i), horizon=1, region="r0",
                    prediction=float(rng.normal(0, 1 + m)), truth=float(rng.normal()),
                    naive_reference=float(rng.normal())))
        return recs

    def test_determinism(self):
        recs = self._monthly_records()
        a = bootstrap_by_month(recs, "rmse", replicates=300, seed=9, frequency="daily")
        b = bootstrap_by_month(recs, "rmse", replicates=300, seed=9, frequency="daily")
        assert a == b

    def test_identical_months_degenerate(self):
        # every month holds records with identical error structure
        recs = []
        for m in range(4):
            base = date(2021, 1 + m, 10)
            recs.extend(records_from([1.0, 2.0], [1.5, 2.5], naive=[0.0, 0.0],
                                     start=base))
        est = bootstrap_by_month(recs, "rmse", replicates=200, seed=1, frequency="daily")
        assert est.lower == est.point == est.upper

    def test_interval_contains_point(self):
        recs = self._monthly_records(months=12, per_month=8, seed=4)
        est = bootstrap_by_month(recs, "rmse", replicates=1000, seed=2, frequency="daily")
        assert est.lower <= est.point <= est.upper

    def test_insufficient_months(self):
        recs = records_from([1, 2], [2, 3])
        with pytest.raises(ValueError, match="insufficient blocks"):
            bootstrap_by_month(recs, "rmse", replicates=200, seed=0, frequency="daily")

    def test_target_month_grouping(self):
        # Origins share January but one target crosses into February, so
        # grouping by *target* month finds 2 blocks where origin-month
        # grouping would find 1.
        recs = records_from([1, 2], [2, 3], start=date(2021, 1, 28), horizon=3)
        assert all(r.origin.month == 1 for r in recs)
        est = bootstrap_by_month(recs, "mae", replicates=150, seed=0, frequency="daily")
        assert est.replicates == 150


class TestMetaAcrossHorizons:
    def _est(self, point, sigma):
        half = 1.959963984540054 * sigma
        return IntervalEstimate(point=point, lower=point - half, upper=point + half,
                                replicates=100, seed=0)

    def test_single_horizon_identity(self):
        est = self._est(2.0, 0.5)
        assert meta_across_horizons([est]) == est

    def test_equal_variance_symmetry(self):
        pooled = meta_across_horizons([self._est(1.0, 1.0), self._est(3.0, 1.0)])
        assert pooled.point == pytest.approx(2.0, abs=1e-12)

    def test_inverse_variance_hand_example(self):
        # variances 1 and 4, points 0 and 5: (1*0 + 0.25*5) / 1.25 = 1.0
        pooled = meta_across_horizons([self._est(0.0, 1.0), self._est(5.0, 2.0)])
        assert pooled.point == pytest.approx(1.0, abs=1e-12)

    def test_zero_width_interval_capped(self):
        degenerate = IntervalEstimate(point=1.0, lower=1.0, upper=1.0, replicates=100, seed=0)
        pooled = meta_across_horizons([degenerate, self._est(5.0, 1.0)])
        assert pooled.point == pytest.approx(1.0, abs=1e-6)  # floored sigma dominates
        assert math.isfinite(pooled.lower) and math.isfinite(pooled.upper)


class TestRecordsIo:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = random_records(rng, max_count=15)
        write_records(recs, tmp_path / "records.csv")
        rows, has_truth = read_prediction_rows(tmp_path / "records.csv")
        assert has_truth and len(rows) == len(recs)
        assert rows[0]["prediction"] == recs[0].prediction
        assert rows[0]["truth"] == recs[0].truth

    def test_nan_prediction_rejected_with_rows(self, tmp_path):
        path = tmp_path / "records.csv"
        path.write_text("origin,horizon,region,prediction\n"
                        "2021-01-04,1,r0,nan\n2021-01-05,1,r0,2.0\n")
        with pytest.raises(ValueError, match=r"non-finite predictions at rows \[2\]"):
            read_prediction_rows(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "records.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError, match="expected header"):
            read_prediction_rows(path)
