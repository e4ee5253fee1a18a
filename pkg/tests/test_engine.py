import json
import math
from dataclasses import replace

import numpy as np
import pytest

from rollcast.engine import (
    RunConfig,
    apply_grid_point,
    grid_search,
    load_run_config,
    plan_rounds,
    plans_to_json,
    run_benchmark,
    score_external,
)
from rollcast.forecasters import ModelSpec, TrainConfig
from rollcast.graph import row_normalize
from rollcast.metrics import write_records
from rollcast.outbreaks import AnnotationSet, annotate_rising
from rollcast.patches import EpiConfig, PatchConfig, TidConfig
from tests.conftest import make_panel


def enumerate_rounds_oracle(T, lookback, cadence, train_size, horizons):
    """Independent brute-force enumeration of the round geometry.

    Scans every candidate retraining time and keeps those where a full
    window exists and at least one evaluation (origin, horizon) pair has an
    observable target; origins are filtered one by one.
    """
    h_min = min(horizons)
    rounds = []
    for window_end in range(T):
        window_start = window_end - train_size + 1
        if window_start < 0:
            continue
        if (window_end - (train_size - 1)) % cadence != 0:
            continue
        origins = []
        for t in range(window_end, window_end + cadence):
            if t <= T - 1 and any(t + h <= T - 1 for h in horizons):
                origins.append(t)
        if not origins:
            continue
        assert all(t + h_min <= T - 1 for t in origins)
        rounds.append((window_start, window_end, tuple(origins)))
    return rounds


class TestPlanRounds:
    def test_matches_enumeration_oracle(self):
        lookback, cadence, train_size = 12, 8, 100
        horizons = (1, 2, 3, 4)
        for T in range(113, 161):
            panel = make_panel(T=T, n=2)
            plans = plan_rounds(panel, lookback, cadence, train_size, horizons)
            oracle = enumerate_rounds_oracle(T, lookback, cadence, train_size, horizons)
            assert len(plans) == len(oracle), T
            for plan, (ws, we, origins) in zip(plans, oracle):
                assert plan.window_start == ws
                assert plan.window_end == we
                assert plan.eval_origins == origins

    def test_minimal_series_single_round(self):
        horizons = (1, 2)
        T = 100 + 2  # train_size + max horizon
        panel = make_panel(T=T, n=1)
        plans = plan_rounds(panel, 12, 8, 100, horizons)
        oracle = enumerate_rounds_oracle(T, 12, 8, 100, horizons)
        assert len(plans) == len(oracle) == 1

    def test_too_short_reports_minimum(self):
        panel = make_panel(T=105, n=1)
        with pytest.raises(ValueError, match="need at least 128"):
            plan_rounds(panel, 12, 8, 100, tuple(range(1, 29)))

    def test_weekly_default_horizons(self):
        panel = make_panel(T=110, n=1, frequency="weekly")
        plans = plan_rounds(panel)
        assert plans[0].horizons == (1, 2, 3, 4)

    def test_cadence_between_rounds(self):
        panel = make_panel(T=140, n=1)
        plans = plan_rounds(panel, 12, 8, 100, (1,))
        ends = [p.window_end for p in plans]
        assert all(b - a == 8 for a, b in zip(ends, ends[1:]))

    def test_split_is_chronological_and_inside_window(self):
        panel = make_panel(T=130, n=1)
        plans = plan_rounds(panel, 12, 8, 100, (1, 7))
        for plan in plans:
            for h, (train_origins, val_origins) in plan.splits.items():
                assert len(train_origins) == math.ceil(0.8 * (len(train_origins) + len(val_origins)))
                assert max(train_origins) < min(val_origins)
                assert min(train_origins) - 12 + 1 >= plan.window_start
                assert max(val_origins) + h <= plan.window_end

    def test_prospective_purity(self):
        panel = make_panel(T=140, n=1)
        plans = plan_rounds(panel, 12, 8, 100, (1, 3))
        for plan in plans:
            for h, (train_origins, val_origins) in plan.splits.items():
                max_train_ts = max(max(train_origins), max(val_origins)) + h
                assert max_train_ts <= plan.window_end
                for t in plan.eval_origins:
                    assert plan.window_end < t + h or t + h > panel.num_steps - 1 or \
                        plan.window_end < t + min(plan.horizons)


def _config(tmp_path, paths, **overrides) -> RunConfig:
    base = dict(
        panel_path=paths["panel"], frequency="daily",
        spec=ModelSpec(kind="naive"),
        adjacency_path=paths.get("adjacency"), population_path=paths.get("population"),
        horizons=(1, 3), seed=5, bootstrap_replicates=150,
        train=TrainConfig(epochs=40, learning_rate=1e-4, seed=5),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def fixture_paths(tmp_path_factory):
    from rollcast.synthetic import write_fixture

    return write_fixture(tmp_path_factory.mktemp("data"), "epidemic", seed=3, T=130, n=4)


@pytest.fixture(scope="module")
def fixture_panel(fixture_paths):
    from rollcast.panel import load_panel

    return load_panel(fixture_paths["panel"], "daily")


class TestRunBenchmark:
    def test_naive_fixed_point(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, fixture_panel)
        assert run.records
        for row in run.score_table.rows:
            assert row.win_rate == 0.0
            assert row.relative_rmse_vs_naive == 1.0

    def test_determinism_byte_identical(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        runs = [run_benchmark(config, fixture_panel) for _ in range(2)]
        outs = []
        for i, run in enumerate(runs):
            p = tmp_path / f"records{i}.csv"
            write_records(run.records, p)
            outs.append(p.read_bytes())
        assert outs[0] == outs[1]
        assert runs[0].score_table.to_json() == runs[1].score_table.to_json()

    def test_record_conservation(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, fixture_panel)
        expected = 0
        for plan in run.plans:
            for h in plan.horizons:
                expected += sum(1 for t in plan.eval_origins
                                if t + h <= fixture_panel.num_steps - 1)
        assert len(run.records) == expected * fixture_panel.num_regions
        assert not run.diagnostics["failures"]

    def test_every_origin_in_exactly_one_plan(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, fixture_panel)
        origin_to_plan = {}
        for plan in run.plans:
            for t in plan.eval_origins:
                assert t not in origin_to_plan
                origin_to_plan[t] = plan.round_index
        for rec in run.records:
            assert fixture_panel.index_of(rec.origin) in origin_to_plan

    def test_trained_model_runs_and_strata_reconcile(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(
            tmp_path, fixture_paths,
            spec=ModelSpec(kind="graph_linear"),
            train=TrainConfig(epochs=30, learning_rate=1e-6, seed=5),
            horizons=(1,),
        )
        run = run_benchmark(config, fixture_panel,
                            mixing=_mixing(fixture_paths, fixture_panel))
        table = run.score_table
        for h in (1,):
            all_row = table.cell(h, "all")
            outbreak = table.cell(h, "outbreak")
            non_outbreak = table.cell(h, "non_outbreak")
            counts = (outbreak.count if outbreak else 0) + (non_outbreak.count if non_outbreak else 0)
            assert counts == all_row.count

    def test_patches_rejected_on_naive_and_ar1(self, tmp_path, fixture_paths, fixture_panel):
        for kind in ("naive", "ar1"):
            config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind=kind),
                             patches=PatchConfig(tid=TidConfig()))
            with pytest.raises(ValueError, match="patches apply only to trainable"):
                run_benchmark(config, fixture_panel,
                              mixing=_mixing(fixture_paths, fixture_panel))

    def test_ar1_runs(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="ar1"), horizons=(1, 2))
        run = run_benchmark(config, fixture_panel)
        assert run.records
        assert any(row.stratum == "all" for row in run.score_table.rows)

    def test_external_kind_rejected_in_process(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="external"))
        with pytest.raises(ValueError, match="export-tasks"):
            run_benchmark(config, fixture_panel)

    def test_worker_pool_output_stable(self, tmp_path, fixture_paths, fixture_panel):
        base = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="ar1"), horizons=(1, 2))
        sequential = run_benchmark(base, fixture_panel)
        parallel = run_benchmark(replace(base, workers=2), fixture_panel)
        assert sequential.records == parallel.records
        assert sequential.score_table.to_json() == parallel.score_table.to_json()

    def test_weekly_panel_end_to_end(self, tmp_path):
        from rollcast.panel import PanelDataset

        rng = np.random.default_rng(0)
        T, n = 110, 3
        template = make_panel(T=T, n=n, frequency="weekly")
        values = np.abs(np.cumsum(rng.normal(0.3, 1.0, (T, n)), axis=0)) + 1.0
        panel = PanelDataset(template.dates, template.regions, values, "weekly",
                             np.zeros((T, n), dtype=bool))
        config = RunConfig(panel_path="unused", frequency="weekly",
                           spec=ModelSpec(kind="naive"), seed=1,
                           bootstrap_replicates=150)
        run = run_benchmark(config, panel)
        horizons = {r.horizon for r in run.score_table.rows if r.horizon != "pooled"}
        assert horizons == {1, 2, 3, 4}
        for row in run.score_table.rows:
            assert row.win_rate == 0.0

    def test_weekly_calendar_head_spans_iso_weeks(self, tmp_path):
        # A weekly panel crossing the year boundary exercises week-of-year
        # indicators near both ends of the 53-category table.
        from rollcast.panel import PanelDataset

        rng = np.random.default_rng(1)
        T, n = 104, 2
        template = make_panel(T=T, n=n, frequency="weekly", start=__import__("datetime").date(2020, 9, 7))
        values = rng.uniform(1, 5, (T, n))
        panel = PanelDataset(template.dates, template.regions, values, "weekly",
                             np.zeros((T, n), dtype=bool))
        config = RunConfig(panel_path="unused", frequency="weekly",
                           spec=ModelSpec(kind="dlinear"),
                           patches=PatchConfig(tid=TidConfig()),
                           train=TrainConfig(epochs=20, learning_rate=1e-4, seed=0),
                           horizons=(1,), seed=1, bootstrap_replicates=150)
        plans = plan_rounds(panel, config.lookback, config.cadence, config.train_size,
                            config.horizons)
        train_weeks = {panel.calendar_indicator(t + 1)
                       for t in plans[0].splits[1][0]}
        assert max(train_weeks) >= 50 and min(train_weeks) <= 5  # crosses the year boundary
        run = run_benchmark(config, panel)
        assert not run.diagnostics["failures"]
        assert run.records

    def test_missing_cells_skipped_and_reported(self, tmp_path, fixture_paths):
        from rollcast.panel import PanelDataset, load_panel

        base = load_panel(fixture_paths["panel"], "daily")
        values = base.values.copy()
        mask = base.missing_mask.copy()
        # one hole inside the evaluation span, one inside a training window
        hole_eval = base.num_steps - 10
        mask[hole_eval, 0] = True
        values[hole_eval, 0] = np.nan
        mask[40, 1] = True
        values[40, 1] = np.nan
        panel = PanelDataset(base.dates, base.regions, values, "daily", mask)
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, panel)
        assert not run.diagnostics["failures"]
        skipped_eval = sum(d["skipped_eval_origins"] for d in run.diagnostics["fits"])
        assert skipped_eval > 0
        full = run_benchmark(config, base)
        assert len(run.records) < len(full.records)


def _mixing(paths, panel):
    from rollcast.graph import load_adjacency

    return row_normalize(load_adjacency(paths["adjacency"], panel.regions))


class TestGridSearch:
    def test_singleton_grid_identity(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="graph_linear"),
                         grid={"l2": [0.0]},
                         train=TrainConfig(epochs=20, learning_rate=1e-6, seed=1))
        selected, report = grid_search(config, fixture_panel,
                                       mixing=_mixing(fixture_paths, fixture_panel))
        assert report["selected"] == {"l2": 0.0}
        assert selected.train.l2 == 0.0

    def test_selects_generating_configuration(self):
        # Panel follows x[t+1] = 0.9 P x[t] + c: the unregularized model can
        # represent it, so crushing l2 must lose on validation.
        rng = np.random.default_rng(0)
        n, T = 4, 130
        P = row_normalize(np.roll(np.eye(n), 1, axis=1) + np.roll(np.eye(n), -1, axis=1)).matrix
        values = np.zeros((T, n))
        x = rng.uniform(10, 12, n)
        for t in range(T):
            values[t] = x
            x = 0.9 * (P @ x) + 1.0 + rng.normal(0, 0.05, n)
        panel = make_panel(T=T, n=n)
        from rollcast.panel import PanelDataset

        panel = PanelDataset(panel.dates, panel.regions, values, "daily",
                             np.zeros((T, n), dtype=bool))
        config = RunConfig(
            panel_path="unused", frequency="daily", spec=ModelSpec(kind="graph_linear"),
            horizons=(1,), grid={"l2": [0.0, 100.0]},
            train=TrainConfig(epochs=150, learning_rate=0.001, seed=0),
        )
        selected, report = grid_search(config, panel, mixing=P)
        assert report["selected"] == {"l2": 0.0}

    def test_deterministic(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="graph_linear"),
                         grid={"l2": [0.0, 0.1], "learning_rate": [1e-6, 1e-5]},
                         train=TrainConfig(epochs=15, learning_rate=1e-6, seed=2))
        mixing = _mixing(fixture_paths, fixture_panel)
        a = grid_search(config, fixture_panel, mixing=mixing)
        b = grid_search(config, fixture_panel, mixing=mixing)
        assert a[1] == b[1]

    def test_dotted_patch_keys(self, tmp_path, fixture_paths):
        config = _config(tmp_path, fixture_paths, spec=ModelSpec(kind="graph_linear"),
                         patches=PatchConfig(epi=EpiConfig(variant="sir_incidence")))
        out = apply_grid_point(config, {"epi.lambda_epi": 0.7})
        assert out.patches.epi.lambda_epi == 0.7
        with pytest.raises(ValueError, match="inactive patch"):
            apply_grid_point(config, {"einn.lambda_dyn": 0.1})


class TestScoreExternal:
    def test_round_trip_identical(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, fixture_panel)
        records_path = tmp_path / "records.csv"
        write_records(run.records, records_path)
        annotations = annotate_rising(fixture_panel)
        table = score_external(records_path, fixture_panel, annotations, config)
        ours = run.score_table
        assert len(table.rows) == len(ours.rows)
        for a, b in zip(table.rows, ours.rows):
            assert a.to_dict() == b.to_dict()

    def test_tampered_truth_rejected(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        run = run_benchmark(config, fixture_panel)
        records_path = tmp_path / "records.csv"
        write_records(run.records, records_path)
        text = records_path.read_text().splitlines()
        parts = text[1].split(",")
        parts[4] = repr(float(parts[4]) + 1.0)
        text[1] = ",".join(parts)
        records_path.write_text("\n".join(text) + "\n")
        with pytest.raises(ValueError, match="truth mismatch"):
            score_external(records_path, fixture_panel, annotate_rising(fixture_panel), config)

    def test_origin_outside_plans_rejected(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        records_path = tmp_path / "bad.csv"
        day = fixture_panel.dates[5]  # long before the first eval origin
        records_path.write_text(
            "origin,horizon,region,prediction\n"
            f"{day.isoformat()},1,{fixture_panel.regions[0]},1.0\n"
        )
        with pytest.raises(ValueError, match="not an evaluation origin"):
            score_external(records_path, fixture_panel, AnnotationSet((), "computed"), config)

    def test_prediction_only_schema_accepted(self, tmp_path, fixture_paths, fixture_panel):
        config = _config(tmp_path, fixture_paths)
        plans = plan_rounds(fixture_panel, config.lookback, config.cadence,
                            config.train_size, config.horizons)
        t = plans[0].eval_origins[0]
        day = fixture_panel.dates[t]
        records_path = tmp_path / "preds.csv"
        lines = ["origin,horizon,region,prediction"]
        for region in fixture_panel.regions:
            lines.append(f"{day.isoformat()},1,{region},2.5")
        records_path.write_text("\n".join(lines) + "\n")
        table = score_external(records_path, fixture_panel, AnnotationSet((), "computed"),
                               replace(config, bootstrap_replicates=150))
        row = table.cell(1, "all")
        assert row.count == fixture_panel.num_regions


class TestRunConfigIo:
    def test_load_and_defaults(self, tmp_path, fixture_paths):
        cfg = {
            "dataset": {"panel": fixture_paths["panel"], "frequency": "daily"},
            "model": {"kind": "naive"},
            "seed": 9,
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(cfg))
        config = load_run_config(path)
        assert config.spec.kind == "naive"
        assert config.lookback == 12 and config.cadence == 8 and config.train_size == 100
        assert config.train.seed == 9

    def test_relative_paths_resolve_against_config_dir(self, tmp_path):
        from rollcast.synthetic import write_fixture

        write_fixture(tmp_path / "cfg" / "data", "epidemic", seed=1, T=110, n=2)
        cfg_path = tmp_path / "cfg" / "run.json"
        cfg_path.write_text(json.dumps({
            "dataset": {"panel": "data/panel.csv", "frequency": "daily"},
            "model": {"kind": "naive"},
            "output_dir": "out",
        }))
        config = load_run_config(cfg_path)
        assert config.panel_path == str(tmp_path / "cfg" / "data" / "panel.csv")
        assert config.output_dir == str(tmp_path / "cfg" / "out")
        from rollcast.panel import load_panel

        assert load_panel(config.panel_path, "daily").num_steps == 110

    def test_missing_model_rejected(self, tmp_path, fixture_paths):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"dataset": {"panel": "x", "frequency": "daily"}}))
        with pytest.raises(ValueError, match="model.kind"):
            load_run_config(path)

    def test_plans_json_serializable(self, fixture_panel):
        plans = plan_rounds(fixture_panel, 12, 8, 100, (1, 2))
        doc = plans_to_json(plans, fixture_panel)
        text = json.dumps(doc)
        assert "eval_origins" in text
