import json
from dataclasses import replace

import numpy as np
import pytest

from longtail import budgetnas, nets, persist, pipeline
from longtail.pipeline import StrategyReport

from conftest import tiny_experiment


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return pipeline.run_experiment(tiny_experiment(), out), out


def test_every_strategy_reports_every_scenario(full_run):
    report, _ = full_run
    assert not report.partial
    assert report.strategies() == list(pipeline.STRATEGIES)
    for s in pipeline.STRATEGIES:
        assert sorted(r["scenario_id"] for r in report.rows if r["strategy"] == s) == [0, 1, 2]
    for r in report.rows:
        assert set(r) == set(pipeline.ROW_FIELDS)
        assert 0 <= r["auc"] <= 1 and r["latency_p95_ms"] >= 0


def test_averages_recomputable_from_rows(full_run):
    report, _ = full_run
    for s, avg in report.averages().items():
        rows = [r for r in report.rows if r["strategy"] == s]
        assert avg["n"] == len(rows)
        assert avg["auc"] == pytest.approx(sum(r["auc"] for r in rows) / len(rows), abs=1e-12)


def test_searched_models_fit_the_budget(full_run):
    report, _ = full_run
    ours = [r for r in report.rows if r["strategy"] == "Ours"]
    assert ours and all(r["encoder_flops"] <= report.budget for r in ours)
    heavy = [r for r in report.rows if r["strategy"] == "MeH"]
    assert max(r["flops"] for r in ours) < min(r["flops"] for r in heavy)


def test_outputs_written(full_run):
    report, out = full_run
    assert StrategyReport.read_jsonl(out / "report.jsonl").rows == report.rows
    assert (out / "report.txt").read_text().startswith("Test AUC")
    summary = json.loads((out / "summary.json").read_text())
    assert summary["partial"] is False and summary["budget"] == report.budget
    art = persist.load_artifact(out / "seed_0" / "artifacts" / "Ours" / "scenario_001")
    assert art.arch.encoder_kind == "searched"
    state = persist.load_meta_state(out / "seed_0" / "meta_state")
    assert state.version == 3 and sorted(state.archive_ids) == [0, 1, 2]


def test_saved_artifacts_reproduce_reported_auc(full_run):
    report, out = full_run
    from longtail.synthgen import generate_scenarios

    scenarios = generate_scenarios(tiny_experiment().universe, 0)
    for r in report.rows:
        art = persist.load_artifact(out / "seed_0" / "artifacts" / r["strategy"] / f"scenario_{r['scenario_id']:03d}")
        assert nets.evaluate_auc(art, scenarios[r["scenario_id"]]) == r["auc"]


def test_same_seed_same_aucs(full_run):
    report, _ = full_run
    again = pipeline.run_experiment(tiny_experiment())
    assert [(r["strategy"], r["scenario_id"], r["auc"]) for r in again.rows] == [
        (r["strategy"], r["scenario_id"], r["auc"]) for r in report.rows
    ]


def test_heavy_only_run_skips_meta_state(tmp_path):
    report = pipeline.run_experiment(tiny_experiment(strategies=("SinH",)), tmp_path)
    assert len(report.rows) == 3 and report.strategies() == ["SinH"]
    assert not (tmp_path / "seed_0" / "meta_state").exists()
    assert "initial_scenarios" not in report.info["seed_0"]


def test_failures_make_a_partial_report(tmp_path, monkeypatch):
    real = budgetnas.search_light

    def flaky(ds, *a, **kw):
        if ds.scenario_id == 1:
            raise RuntimeError("search diverged")
        return real(ds, *a, **kw)

    monkeypatch.setattr(budgetnas, "search_light", flaky)
    report = pipeline.run_experiment(tiny_experiment(strategies=("MeH", "Ours")), tmp_path)
    assert report.partial
    assert report.failures == [{"seed": 0, "scenario_id": 1, "strategy": "Ours", "error": "RuntimeError: search diverged"}]
    assert len(report.rows) == 5
    assert "PARTIAL RUN" in report.render_table()
    assert json.loads((tmp_path / "summary.json").read_text())["partial"] is True


def test_budget_check_rejects_oversized_rows():
    report = StrategyReport(rows=[{"strategy": "Ours", "encoder_flops": 11}], budget=10)
    with pytest.raises(AssertionError, match="over the FLOPs budget"):
        report.check_budget()
    StrategyReport(rows=[{"strategy": "MeL", "encoder_flops": 11}], budget=10).check_budget()


def test_render_table_lists_averages():
    rows = [
        {"seed": 0, "scenario_id": i, "strategy": s, "auc": a, "flops": 10, "encoder_flops": 5, "n_params": 3, "latency_mean_ms": 1.0, "latency_p95_ms": 2.0}
        for i, (s, a) in enumerate([("SinH", 0.6), ("SinH", 0.8), ("MeH", 0.9)])
    ]
    text = StrategyReport(rows, budget=7).render_table()
    avg_line = [l for l in text.splitlines() if "AVG" in l][0]
    assert "0.7000" in avg_line and "0.9000" in avg_line
    assert "budget for searched models: 7" in text


# ---------------------------------------------------------------------------
# serving


def _artifact(arch_fn, kind="attention"):
    cfg = pipeline.ExperimentConfig()
    return nets.build_model(cfg.arch_for(arch_fn(kind)), 0)


@pytest.fixture(scope="module")
def requests_():
    from longtail.synthgen import UniverseConfig, generate_scenarios

    ds = generate_scenarios(replace(UniverseConfig(), n_scenarios=1, size_profile=(300,)), 0)[0]
    return pipeline.request_batch(ds.part("test"), 128)


def test_serve_batch_matches_predict(requests_):
    art = _artifact(nets.light_arch)
    preds, lat = pipeline.serve_batch(art, requests_, reps=3)
    assert np.array_equal(preds, nets.predict(art, requests_))
    assert len(lat.samples_ms) == 3
    assert lat.mean_ms == pytest.approx(np.mean(lat.samples_ms))
    with pytest.raises(ValueError, match="reps"):
        pipeline.serve_batch(art, requests_, reps=2)


def test_light_model_serves_faster_than_heavy(requests_):
    _, heavy = pipeline.serve_batch(_artifact(nets.heavy_arch), requests_, reps=5)
    _, light = pipeline.serve_batch(_artifact(nets.light_arch), requests_, reps=5)
    assert light.mean_ms < heavy.mean_ms


def test_request_batch_cycles(requests_):
    small = requests_.take(np.arange(3))
    batch = pipeline.request_batch(small, 7)
    assert len(batch) == 7
    np.testing.assert_array_equal(batch.labels, small.labels[[0, 1, 2, 0, 1, 2, 0]])


# ---------------------------------------------------------------------------
# configuration


def test_initial_scenarios_deterministic():
    a = pipeline.initial_scenarios(6, 3, 5)
    assert a == pipeline.initial_scenarios(6, 3, 5) == sorted(set(a)) and len(a) == 3


@pytest.mark.parametrize(
    "change, path",
    [
        (dict(strategies=("SinH", "Best")), "strategies"),
        (dict(n_initial_scenarios=9), "n_initial_scenarios"),
        (dict(serve=pipeline.ServeConfig(reps=2)), "serve.reps"),
        (dict(seeds=()), "seeds"),
    ],
)
def test_validate_names_the_field(change, path):
    with pytest.raises(ValueError, match=f"^{path}:"):
        tiny_experiment(**change).validate()


def test_default_budget_is_light_encoder_clipped_to_space():
    from longtail.flopsmeter import space_max_flops

    cfg = pipeline.ExperimentConfig()
    light_enc = nets.ModelArtifact(cfg.arch_for(cfg.light), {}).flops()["encoder"]
    assert cfg.flops_budget() == min(light_enc, space_max_flops(cfg.space(), cfg.universe.max_seq_len))
    assert replace(cfg, nas=replace(cfg.nas, flops_budget=12345)).flops_budget() == 12345
