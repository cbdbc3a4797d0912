"""End-to-end comparison of four per-scenario training strategies.

* ``SinH``: the heavy model trained on the scenario alone.
* ``MeH``: the shared heavy model fine-tuned on the scenario's support rows;
  its query gradient is fed back to the shared model.
* ``MeL``: the hand-designed light model distilled from the MeH model.
* ``Ours``: a searched light model under the FLOPs budget, distilled from
  the MeH model.

The FLOPs budget bounds the sequence-encoder FLOPs; by default it equals
the hand-designed light encoder's count, clipped to the search space's
largest genotype.
"""

from __future__ import annotations

import json
import logging
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import budgetnas, metaengine, nets, persist
from .budgetnas import NasConfig
from .flopsmeter import space_max_flops
from .metaengine import InitConfig
from .nets import ArchConfig, LossSpec, ModelArtifact, TrainConfig
from .space import SpaceSpec
from .synthgen import Batch, ScenarioDataset, UniverseConfig, generate_scenarios

log = logging.getLogger(__name__)

STRATEGIES = ("SinH", "MeH", "MeL", "Ours")
META_STRATEGIES = ("MeH", "MeL", "Ours")


@dataclass(frozen=True)
class MetaConfig:
    gamma: float = 0.05
    eta: float | None = None
    inner_steps: int = 1
    inner_batch_size: int = 64
    staleness_bound: int = 4
    second_order: bool = False
    refresh_every: int = 0  # scenarios between archive refreshes; 0 disables
    refresh_epochs: int = 1


@dataclass(frozen=True)
class ServeConfig:
    batch_size: int = 256
    reps: int = 5


@dataclass(frozen=True)
class ExperimentConfig:
    universe: UniverseConfig = UniverseConfig()
    n_initial_scenarios: int = 3
    strategies: tuple[str, ...] = STRATEGIES
    heavy: ArchConfig = nets.heavy_arch("attention")
    light: ArchConfig = nets.light_arch("attention")
    train: TrainConfig = TrainConfig(learning_rate=0.003, batch_size=64, epochs=5)
    light_train: TrainConfig = TrainConfig(learning_rate=0.003, batch_size=64, epochs=15)
    meta: MetaConfig = MetaConfig()
    init: InitConfig = InitConfig()
    nas: NasConfig = NasConfig(arch_lr=0.05, epochs=12, warmup_epochs=6)
    serve: ServeConfig = ServeConfig()
    seeds: tuple[int, ...] = (0,)
    save_artifacts: bool = True

    def validate(self) -> None:
        """Raise ValueError whose message starts with the offending key path."""

        def wrap(path, fn):
            try:
                fn()
            except ValueError as exc:
                raise ValueError(f"{path}: {exc}") from exc

        wrap("universe", self.universe.validate)
        if not self.strategies:
            raise ValueError("strategies: must not be empty")
        bad = [s for s in self.strategies if s not in STRATEGIES]
        if bad:
            raise ValueError(f"strategies: unknown values {bad}; expected a subset of {STRATEGIES}")
        if not 1 <= self.n_initial_scenarios <= self.universe.n_scenarios:
            raise ValueError(
                f"n_initial_scenarios: {self.n_initial_scenarios} must lie in 1..{self.universe.n_scenarios}"
            )
        for name in ("heavy", "light"):
            wrap(name, self.arch_for(getattr(self, name)).validate)
        if self.light.encoder_kind == "searched":
            raise ValueError("light.encoder_kind: the hand-designed light model must be recurrent or attention")
        wrap("train", self.train.validate)
        wrap("light_train", self.light_train.validate)
        if self.serve.reps < 3:
            raise ValueError("serve.reps: must be >= 3")
        if self.serve.batch_size < 1:
            raise ValueError("serve.batch_size: must be >= 1")
        if not self.seeds:
            raise ValueError("seeds: must not be empty")
        if self.meta.gamma < 0 or (self.meta.eta is not None and not 0 <= self.meta.eta <= self.meta.gamma):
            raise ValueError("meta.eta: need 0 <= eta <= gamma")
        wrap("nas", lambda: self.nas.validate(self.space(), self.universe.max_seq_len))

    def arch_for(self, arch: ArchConfig) -> ArchConfig:
        """Bind an architecture to the universe's input dimensions."""
        u = self.universe
        return replace(arch, profile_dim=u.profile_dim, vocab_size=u.vocab_size, seq_len=u.max_seq_len)

    def space(self) -> SpaceSpec:
        return SpaceSpec(n_layers=self.light.n_encoder_layers, channels=self.light.embed)

    def flops_budget(self) -> int:
        """Encoder FLOPs bound for searched models."""
        if self.nas.flops_budget is not None:
            return self.nas.flops_budget
        light = self.arch_for(self.light)
        enc = nets.ModelArtifact(light, {}).flops()["encoder"]
        return min(enc, space_max_flops(self.space(), self.universe.max_seq_len))


# ---------------------------------------------------------------------------
# reports

ROW_FIELDS = ("seed", "scenario_id", "strategy", "auc", "flops", "encoder_flops", "n_params", "latency_mean_ms", "latency_p95_ms")


@dataclass
class StrategyReport:
    rows: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    budget: int | None = None
    info: dict = field(default_factory=dict)

    @property
    def partial(self) -> bool:
        return bool(self.failures)

    def strategies(self) -> list[str]:
        seen = dict.fromkeys(r["strategy"] for r in self.rows)
        return [s for s in STRATEGIES if s in seen] + [s for s in seen if s not in STRATEGIES]

    def averages(self) -> dict[str, dict]:
        out = {}
        for s in self.strategies():
            rows = [r for r in self.rows if r["strategy"] == s]
            out[s] = {k: float(np.mean([r[k] for r in rows])) for k in ROW_FIELDS[3:]}
            out[s]["n"] = len(rows)
        return out

    def check_budget(self) -> None:
        if self.budget is None:
            return
        over = [r for r in self.rows if r["strategy"] == "Ours" and r["encoder_flops"] > self.budget]
        if over:
            raise AssertionError(f"searched models over the FLOPs budget {self.budget}: {over}")

    def write_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for r in self.rows:
                f.write(json.dumps(r, sort_keys=True) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path) -> "StrategyReport":
        with open(path) as f:
            rows = [json.loads(line) for line in f if line.strip()]
        return cls(rows)

    def render_table(self) -> str:
        strategies = self.strategies()
        scen = sorted({(r["seed"], r["scenario_id"]) for r in self.rows})
        cell = {(r["seed"], r["scenario_id"], r["strategy"]): r for r in self.rows}
        head = f"{'seed':>4} {'scenario':>8} " + " ".join(f"{s:>8}" for s in strategies)
        lines = ["Test AUC", head, "-" * len(head)]
        for seed, sid in scen:
            vals = []
            for s in strategies:
                r = cell.get((seed, sid, s))
                vals.append(f"{r['auc']:8.4f}" if r else f"{'-':>8}")
            lines.append(f"{seed:>4} {sid:>8} " + " ".join(vals))
        avg = self.averages()
        lines.append("-" * len(head))
        lines.append(f"{'':>4} {'AVG':>8} " + " ".join(f"{avg[s]['auc']:8.4f}" for s in strategies))
        lines += ["", "Averages", f"{'strategy':<8} {'AUC':>8} {'FLOPs':>10} {'enc FLOPs':>10} {'params':>8} {'mean ms':>8} {'p95 ms':>8}"]
        for s in strategies:
            a = avg[s]
            lines.append(
                f"{s:<8} {a['auc']:8.4f} {a['flops']:10.0f} {a['encoder_flops']:10.0f} {a['n_params']:8.0f} "
                f"{a['latency_mean_ms']:8.3f} {a['latency_p95_ms']:8.3f}"
            )
        if self.budget is not None:
            lines.append(f"encoder FLOPs budget for searched models: {self.budget}")
        if self.failures:
            lines.append(f"PARTIAL RUN: {len(self.failures)} failure(s)")
            lines += [f"  seed {f['seed']} scenario {f['scenario_id']} {f['strategy']}: {f['error']}" for f in self.failures]
        return "\n".join(lines)

    def save(self, out) -> None:
        out = Path(out)
        self.write_jsonl(out / "report.jsonl")
        (out / "report.txt").write_text(self.render_table() + "\n")
        summary = {"averages": self.averages(), "budget": self.budget, "partial": self.partial, "failures": self.failures, **self.info}
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# serving stub


@dataclass(frozen=True)
class LatencyStats:
    mean_ms: float
    p95_ms: float
    samples_ms: tuple[float, ...]


def request_batch(data: Batch, size: int) -> Batch:
    """The first ``size`` rows of ``data``, cycling when it is shorter."""
    idx = np.arange(size) % len(data)
    return data.take(idx)


def serve_batch(artifact: ModelArtifact, requests: Batch, reps: int = 5) -> tuple[np.ndarray, LatencyStats]:
    """Time ``reps`` forward passes over ``requests`` after one warm-up pass."""
    if reps < 3:
        raise ValueError("reps must be >= 3")
    module = nets.to_module(artifact)
    nets.module_predict(module, requests)
    samples, preds = [], None
    for _ in range(reps):
        t = time.perf_counter()
        out = nets.module_predict(module, requests)
        samples.append((time.perf_counter() - t) * 1e3)
        if preds is not None and not np.array_equal(preds, out):
            raise RuntimeError("predictions changed between repetitions")
        preds = out
    s = np.asarray(samples)
    return preds, LatencyStats(float(s.mean()), float(np.percentile(s, 95)), tuple(samples))


# ---------------------------------------------------------------------------
# experiment


def _row(seed, ds, strategy, artifact, cfg: ExperimentConfig) -> dict:
    test = ds.part("test")
    _, lat = serve_batch(artifact, request_batch(test, cfg.serve.batch_size), cfg.serve.reps)
    fl = artifact.flops()
    return {
        "seed": int(seed),
        "scenario_id": int(ds.scenario_id),
        "strategy": strategy,
        "auc": nets.evaluate_auc(artifact, test),
        "flops": int(fl["total"]),
        "encoder_flops": int(fl["encoder"]),
        "n_params": artifact.n_params(),
        "latency_mean_ms": lat.mean_ms,
        "latency_p95_ms": lat.p95_ms,
    }


def initial_scenarios(n_scenarios: int, n_initial: int, seed: int) -> list[int]:
    rng = np.random.default_rng([seed, 0x1717])
    return sorted(int(i) for i in rng.choice(n_scenarios, size=n_initial, replace=False))


def make_meta_state(cfg: ExperimentConfig, scenarios: list[ScenarioDataset], seed: int):
    heavy = cfg.arch_for(cfg.heavy)
    ids = initial_scenarios(len(scenarios), cfg.n_initial_scenarios, seed)
    pooled = [scenarios[i] for i in ids]
    m = cfg.meta
    init = cfg.init
    if init.use_nas and init.nas is None:
        init = replace(init, nas=replace(cfg.nas, delta=0.0, seed=seed))
    state, cands = metaengine.init_agnostic(
        pooled,
        heavy,
        replace(cfg.train, seed=seed),
        init,
        seed=seed,
        gamma=m.gamma,
        eta=m.eta,
        inner_steps=m.inner_steps,
        inner_batch_size=m.inner_batch_size,
        staleness_bound=m.staleness_bound,
        second_order=m.second_order,
        refresh_epochs=m.refresh_epochs,
        refresh_lr=cfg.train.learning_rate,
        refresh_batch_size=cfg.train.batch_size,
    )
    for ds in pooled:
        state = metaengine.archive_scenario(state, ds)
    return state, cands, ids


def run_seed(cfg: ExperimentConfig, seed: int, out=None) -> StrategyReport:
    """All requested strategies on every scenario of one generated universe."""
    scenarios = generate_scenarios(cfg.universe, seed)
    budget = cfg.flops_budget()
    report = StrategyReport(budget=budget)
    out = Path(out) / f"seed_{seed}" if out is not None else None
    heavy, light = cfg.arch_for(cfg.heavy), cfg.arch_for(cfg.light)
    train = replace(cfg.train, seed=seed)
    light_train = replace(cfg.light_train, seed=seed)
    nas = replace(cfg.nas, flops_budget=budget, seed=seed)
    space = cfg.space()

    def keep(strategy, ds, art):
        report.rows.append(_row(seed, ds, strategy, art, cfg))
        if out is not None and cfg.save_artifacts:
            persist.save_artifact(art, out / "artifacts" / strategy / f"scenario_{ds.scenario_id:03d}")

    def fail(strategy, ds, exc):
        log.error("seed %d scenario %d %s failed: %s", seed, ds.scenario_id, strategy, exc)
        log.debug("%s", traceback.format_exc())
        report.failures.append(
            {"seed": seed, "scenario_id": ds.scenario_id, "strategy": strategy, "error": f"{type(exc).__name__}: {exc}"}
        )

    coordinator = None
    if any(s in cfg.strategies for s in META_STRATEGIES):
        state, cands, ids = make_meta_state(cfg, scenarios, seed)
        report.info["initial_scenarios"] = ids
        report.info["init_candidates"] = {c.name: c.val_auc for c in cands}
        coordinator = metaengine.MetaCoordinator(state)

    genotypes = {}
    for ds in scenarios:
        if "SinH" in cfg.strategies:
            try:
                model = nets.build_model(heavy, seed, {"strategy": "SinH", "scenario_id": ds.scenario_id})
                keep("SinH", ds, nets.train_model(model, ds, train))
            except Exception as exc:
                fail("SinH", ds, exc)
        if coordinator is None:
            continue
        try:
            theta_u, packet = metaengine.fine_tune(coordinator.snapshot(), ds, seed=seed + ds.scenario_id)
            state = coordinator.commit([packet])
            if ds.scenario_id not in state.archive_ids:
                state = coordinator.apply(lambda s: metaengine.archive_scenario(s, ds))
            if cfg.meta.refresh_every and (ds.scenario_id + 1) % cfg.meta.refresh_every == 0:
                coordinator.apply(metaengine.periodic_refresh)
        except Exception as exc:
            for s in META_STRATEGIES:
                if s in cfg.strategies:
                    fail(s, ds, exc)
            continue
        if "MeH" in cfg.strategies:
            try:
                keep("MeH", ds, theta_u)
            except Exception as exc:
                fail("MeH", ds, exc)
        if "MeL" in cfg.strategies:
            try:
                model = nets.build_model(light, seed, {"strategy": "MeL", "scenario_id": ds.scenario_id})
                loss = LossSpec("distill", theta_u, cfg.nas.delta)
                keep("MeL", ds, nets.train_model(model, ds, light_train, loss))
            except Exception as exc:
                fail("MeL", ds, exc)
        if "Ours" in cfg.strategies:
            try:
                g, art, _ = budgetnas.search_light(
                    ds, theta_u, light, nas, light_train, space, {"strategy": "Ours", "scenario_id": ds.scenario_id}
                )
                genotypes[ds.scenario_id] = g.describe()
                keep("Ours", ds, art)
            except Exception as exc:
                fail("Ours", ds, exc)
    if genotypes:
        report.info["genotypes"] = {str(k): v for k, v in genotypes.items()}
    if coordinator is not None and out is not None:
        persist.save_meta_state(coordinator.snapshot(), out / "meta_state")
    report.check_budget()
    return report


def run_experiment(cfg: ExperimentConfig, out=None) -> StrategyReport:
    """Run every seed in ``cfg.seeds``; rows from all seeds go into one report."""
    cfg.validate()
    total = StrategyReport(budget=cfg.flops_budget())
    t0 = time.perf_counter()
    for seed in cfg.seeds:
        r = run_seed(cfg, seed, out)
        total.rows += r.rows
        total.failures += r.failures
        total.info[f"seed_{seed}"] = r.info
    total.info["wall_seconds"] = time.perf_counter() - t0
    if out is not None:
        total.save(out)
    return total
