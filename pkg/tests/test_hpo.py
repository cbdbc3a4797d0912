import json
import math
import time

import numpy as np
import pytest

from longtail import hpo
from longtail.hpo import Param, SearchSpaceSpec, TrialBudget

OPTIMUM = (1.3, -0.7)
PLANE = SearchSpaceSpec((Param("x", "uniform", (-5.0, 5.0)), Param("y", "uniform", (-5.0, 5.0))))


def neg_sq_dist(config, trial):
    return -((config["x"] - OPTIMUM[0]) ** 2 + (config["y"] - OPTIMUM[1]) ** 2)


def quadratic_runs(seeds=range(10), n_trials=200):
    """Per seed: (distance of the racos best to the optimum, racos best metric, random best metric)."""
    out = []
    for s in seeds:
        best, _ = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(n_trials), "racos", s)
        rand, _ = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(n_trials), "random", s)
        out.append((math.dist((best.config["x"], best.config["y"]), OPTIMUM), best.metric, rand.metric))
    return out


def test_quadratic_optimum_found_and_random_beaten():
    runs = quadratic_runs()
    assert sum(d <= 1e-2 for d, _, _ in runs) >= 9, [round(d, 4) for d, _, _ in runs]
    assert sum(r > q for _, r, q in runs) >= 7


# ---------------------------------------------------------------------------
# search space


def test_param_validation():
    with pytest.raises(ValueError, match="unknown kind"):
        Param("a", "normal", (0, 1))
    with pytest.raises(ValueError, match="positive"):
        Param("lr", "loguniform", (0.0, 1.0))
    with pytest.raises(ValueError, match="low <= high"):
        Param("u", "uniform", (2.0, 1.0))
    with pytest.raises(ValueError, match="duplicate"):
        SearchSpaceSpec((Param("a", "uniform", (0, 1)), Param("a", "int", (0, 3))))


def test_unit_round_trip():
    for p, v in [(Param("lr", "loguniform", (1e-4, 1e-1)), 3e-3), (Param("u", "uniform", (-2, 6)), 1.25), (Param("n", "int", (1, 6)), 4)]:
        assert p.from_unit(p.to_unit(v)) == pytest.approx(v, rel=1e-12)


def test_space_dict_round_trip():
    space = hpo.default_space()
    assert SearchSpaceSpec.from_dict(space.to_dict()) == space


def test_suggestions_stay_in_domain():
    space = SearchSpaceSpec((
        Param("lr", "loguniform", (1e-4, 1e-1)),
        Param("n", "int", (1, 6)),
        Param("act", "categorical", ("relu", "tanh")),
        Param("u", "uniform", (0.0, 1.0)),
    ))

    def objective(c, t):
        return -abs(math.log10(c["lr"]) + 2.5) - 0.1 * c["n"] + (c["act"] == "tanh") + c["u"]

    _, history = hpo.optimize(objective, space, TrialBudget(60), "racos", 0)
    assert all(space.contains(t.config) for t in history)


# ---------------------------------------------------------------------------
# suggestion rules


def _record(i, config, metric):
    return hpo.TrialRecord(i, config, metric, "done", 0.0)


def test_empty_history_samples_full_space():
    rng = np.random.default_rng(0)
    pts = [hpo.racos_suggest([], PLANE, rng) for _ in range(200)]
    xs = np.array([p["x"] for p in pts])
    assert xs.min() < -4 and xs.max() > 4


def test_eps_one_is_uniform_sampling():
    history = [_record(i, {"x": float(i) / 10, "y": 0.0}, -i) for i in range(20)]
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    for _ in range(50):
        got = hpo.racos_suggest(history, PLANE, a, eps=1.0)
        b.random()
        assert got == PLANE.sample(b)


def test_shared_categorical_of_top_configs_is_kept():
    space = SearchSpaceSpec((Param("c", "categorical", ("a", "b", "c", "d")), Param("x", "uniform", (0.0, 1.0))))
    history = [_record(i, {"c": "b", "x": 0.5}, 1.0 - 0.01 * i) for i in range(4)]
    history += [_record(4 + i, {"c": "acd"[i % 3], "x": 0.5}, -1.0 - i) for i in range(16)]
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert hpo.racos_suggest(history, space, rng, eps=0.0)["c"] == "b"


def test_region_excludes_every_negative():
    rng = np.random.default_rng(1)
    history = [_record(i, PLANE.sample(rng), float(rng.normal())) for i in range(30)]
    best = sorted(history, key=lambda t: -t.metric)
    worst = best[6:]
    for _ in range(20):
        s = hpo.racos_suggest(history, PLANE, rng, eps=0.0)
        assert PLANE.contains(s)
        assert all(s != t.config for t in worst)


# ---------------------------------------------------------------------------
# driver


def test_single_trial_budget():
    best, history = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(1), "racos", 0)
    assert len(history) == 1 and best is history[0]


def test_best_so_far_is_monotone():
    _, history = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(40), "racos", 3)
    running = np.maximum.accumulate([t.metric for t in history])
    assert np.all(np.diff(running) >= 0)


def test_failures_are_recorded_and_search_continues():
    def flaky(c, t):
        if c["x"] < 0:
            raise RuntimeError("boom")
        return neg_sq_dist(c, t)

    best, history = hpo.optimize(flaky, PLANE, TrialBudget(30), "racos", 0)
    failed = [t for t in history if t.status == "failed"]
    assert failed and all("boom" in t.error and t.metric is None for t in failed)
    assert best.status == "done" and len(history) == 30


def test_all_failed_raises():
    def broken(c, t):
        raise ValueError("nope")

    with pytest.raises(RuntimeError, match="all 5 trials failed"):
        hpo.optimize(broken, PLANE, TrialBudget(5), "random", 0)


def test_non_finite_metric_counts_as_failure():
    _, history = hpo.optimize(lambda c, t: float("nan") if c["x"] > 0 else 1.0, PLANE, TrialBudget(20), "random", 0)
    assert {t.status for t in history} == {"done", "failed"}


def test_per_trial_deadline_is_cooperative():
    def slow(c, t):
        for step in range(1000):
            time.sleep(0.002)
            t.check()
        return 1.0

    start = time.monotonic()
    best, history = hpo.optimize(
        lambda c, t: slow(c, t) if t.trial_id % 2 else 0.5, PLANE, TrialBudget(4, per_trial_seconds=0.05), "random", 0
    )
    assert time.monotonic() - start < 1.0
    assert [t.status for t in history] == ["done", "timed-out", "done", "timed-out"]
    assert all(t.wall_time < 0.05 + 0.05 for t in history)
    assert best.metric == 0.5


def test_total_time_budget_halts_loop():
    start = time.monotonic()
    _, history = hpo.optimize(lambda c, t: time.sleep(0.02) or 1.0, PLANE, TrialBudget(1000, max_total_seconds=0.2), "random", 0)
    assert time.monotonic() - start < 0.5
    assert len(history) < 20


def test_median_rule_stops_poor_trials():
    def curve(c, t):
        quality = -abs(c["x"])
        for step in range(5):
            t.report(step, quality + step)
        return quality + 5

    _, history = hpo.optimize(curve, PLANE, TrialBudget(40), "random", 0)
    stopped = [t for t in history if t.status == "early-stopped"]
    assert stopped
    assert all(t.trial_id >= 3 for t in stopped)
    for t in stopped:
        assert t.metric == t.intermediate[-1][1]
    _, history = hpo.optimize(curve, PLANE, TrialBudget(40), "random", 0, early_stopping=False)
    assert all(t.status == "done" for t in history)


def test_history_file_is_append_only(tmp_path):
    path = tmp_path / "hpo" / "history.jsonl"
    _, first = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(5), "racos", 0, history_path=path)
    _, second = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(3), "racos", 1, history_path=path)
    lines = path.read_text().splitlines()
    assert len(lines) == 8
    rows = [json.loads(line) for line in lines]
    assert [r["trial_id"] for r in rows] == [0, 1, 2, 3, 4, 0, 1, 2]
    loaded = hpo.load_history(path)
    assert [t.config for t in loaded[:5]] == [t.config for t in first]
    assert loaded[5].metric == second[0].metric


def test_parallel_workers_match_serial_order():
    a = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(12), "racos", 2, n_workers=3)[1]
    b = hpo.optimize(neg_sq_dist, PLANE, TrialBudget(12), "racos", 2, n_workers=3)[1]
    assert [t.config for t in a] == [t.config for t in b]


def test_bad_method_rejected():
    with pytest.raises(ValueError, match="method"):
        hpo.optimize(neg_sq_dist, PLANE, TrialBudget(2), "grid", 0)


def test_apply_config_maps_fields():
    from longtail import nets

    arch, cfg = hpo.apply_config(nets.heavy_arch("attention"), nets.TrainConfig(), {"learning_rate": 0.01, "profile_mlp_dims": "64,32", "n_encoder_layers": 2, "head_mlp_dims": "32"})
    assert arch.profile_mlp_dims == (64, 32) and arch.n_encoder_layers == 2 and arch.head_mlp_dims == (32,)
    assert cfg.learning_rate == 0.01


def test_tune_predesigned_writes_history(tmp_path, tiny_scenarios):
    from longtail import nets
    from longtail.budgetnas import split_train_val
    from longtail.synthgen import Batch

    from conftest import tiny_arch

    pooled = Batch.concat([d.part("train") for d in tiny_scenarios])
    fit, val = split_train_val(pooled, 0.25, 0)
    space = SearchSpaceSpec((Param("learning_rate", "categorical", (0.001, 0.01)), Param("n_encoder_layers", "int", (1, 2))))
    arch, cfg, info = hpo.tune_predesigned(
        tiny_arch("attention"), nets.TrainConfig(0.01, 32, 2, 0), fit, val, 4, "racos", 0, space=space, history_path=tmp_path / "h.jsonl"
    )
    assert info["n_trials"] == 4 and len((tmp_path / "h.jsonl").read_text().splitlines()) == 4
    assert cfg.learning_rate == info["best_config"]["learning_rate"]
    assert arch.n_encoder_layers == info["best_config"]["n_encoder_layers"]
