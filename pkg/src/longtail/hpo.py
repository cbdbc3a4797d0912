"""Hyperparameter search: a classification-based region optimizer (RACOS) and random search.

Each parameter is mapped to a unit coordinate (log scale for log-uniform
reals, an index for categoricals).  RACOS ranks the finished trials, takes
the top ``pos_frac`` as positives, and grows an axis-aligned region around
one positive by cutting away dimensions until no negative is left inside.
New configs are drawn from that region with probability ``1 - eps`` and
from the whole space otherwise.  The positive/negative split is made over
the best ``train_size`` distinct trials rather than the whole history, so
the negatives crowd around the optimum as the search goes on and the
region keeps shrinking.

Objectives take ``(config, trial)``.  ``trial.report(step, value)`` records
an intermediate metric and raises ``TrialPruned`` when the value is below
the median of earlier trials at the same step; ``trial.check()`` raises
``TrialTimeout`` once the trial's deadline passes.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

PARAM_KINDS = ("categorical", "loguniform", "uniform", "int")
STATUSES = ("done", "early-stopped", "timed-out", "failed")


@dataclass(frozen=True)
class Param:
    name: str
    kind: str
    domain: tuple

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValueError(f"param {self.name!r}: unknown kind {self.kind!r}; expected one of {PARAM_KINDS}")
        dom = tuple(self.domain)
        object.__setattr__(self, "domain", dom)
        if not dom:
            raise ValueError(f"param {self.name!r}: empty domain")
        if self.kind == "categorical":
            return
        if len(dom) != 2 or not dom[0] <= dom[1]:
            raise ValueError(f"param {self.name!r}: domain must be (low, high) with low <= high, got {dom}")
        if self.kind == "loguniform" and dom[0] <= 0:
            raise ValueError(f"param {self.name!r}: log-uniform domain must be positive")
        if self.kind == "int" and any(int(v) != v for v in dom):
            raise ValueError(f"param {self.name!r}: int domain bounds must be integers")

    @property
    def continuous(self) -> bool:
        return self.kind != "categorical"

    def from_unit(self, u: float):
        lo, hi = self.domain[0], self.domain[-1]
        if self.kind == "uniform":
            return lo + u * (hi - lo)
        if self.kind == "loguniform":
            return math.exp(math.log(lo) + u * (math.log(hi) - math.log(lo)))
        # int: equal-width bins over [lo, hi]
        return int(min(hi, lo + math.floor(u * (hi - lo + 1))))

    def to_unit(self, value) -> float:
        lo, hi = self.domain[0], self.domain[-1]
        if self.kind == "uniform":
            return 0.0 if hi == lo else (value - lo) / (hi - lo)
        if self.kind == "loguniform":
            return 0.0 if hi == lo else (math.log(value) - math.log(lo)) / (math.log(hi) - math.log(lo))
        return (value - lo + 0.5) / (hi - lo + 1)

    def contains(self, value) -> bool:
        if self.kind == "categorical":
            return value in self.domain
        if self.kind == "int" and int(value) != value:
            return False
        return self.domain[0] <= value <= self.domain[1]


@dataclass(frozen=True)
class SearchSpaceSpec:
    params: tuple[Param, ...]

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))
        if not self.params:
            raise ValueError("search space has no parameters")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceSpec":
        return cls(tuple(Param(name, spec["kind"], tuple(spec["domain"])) for name, spec in d.items()))

    def to_dict(self) -> dict:
        return {p.name: {"kind": p.kind, "domain": list(p.domain)} for p in self.params}

    def contains(self, config: dict) -> bool:
        return set(config) == {p.name for p in self.params} and all(p.contains(config[p.name]) for p in self.params)

    def sample(self, rng: np.random.Generator) -> dict:
        out = {}
        for p in self.params:
            if p.kind == "categorical":
                out[p.name] = p.domain[int(rng.integers(len(p.domain)))]
            else:
                out[p.name] = p.from_unit(float(rng.random()))
        return out


def default_space() -> SearchSpaceSpec:
    """Learning rate, profile/head MLP widths and encoder depth for the hand-designed model."""
    return SearchSpaceSpec(
        (
            Param("learning_rate", "categorical", (0.0003, 0.001, 0.003, 0.01)),
            Param("profile_mlp_dims", "categorical", ("32,32", "64,32", "32")),
            Param("n_encoder_layers", "int", (1, 6)),
            Param("head_mlp_dims", "categorical", ("32", "64,32", "32,16")),
        )
    )


@dataclass(frozen=True)
class TrialBudget:
    max_trials: int = 50
    max_total_seconds: float = math.inf
    per_trial_seconds: float = math.inf

    def __post_init__(self):
        if self.max_trials < 1:
            raise ValueError("max_trials must be >= 1")
        if self.max_total_seconds <= 0 or self.per_trial_seconds <= 0:
            raise ValueError("time limits must be positive")


@dataclass
class TrialRecord:
    trial_id: int
    config: dict
    metric: float | None
    status: str
    wall_time: float
    intermediate: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class TrialPruned(Exception):
    """Raised by ``Trial.report`` when the median-stopping rule fires."""


class TrialTimeout(Exception):
    """Raised by ``Trial.check`` once the trial deadline has passed."""


class _MedianRule:
    def __init__(self, min_trials: int = 3):
        self.min_trials = min_trials
        self.values: dict[int, list[float]] = {}
        self.lock = threading.Lock()

    def should_stop(self, step: int, value: float) -> bool:
        with self.lock:
            seen = self.values.get(step, [])
            return len(seen) >= self.min_trials and value < float(np.median(seen))

    def commit(self, intermediate: Sequence[tuple[int, float]]) -> None:
        with self.lock:
            for step, value in intermediate:
                self.values.setdefault(step, []).append(value)


class Trial:
    """Handle passed to the objective: intermediate reports and the deadline token."""

    def __init__(self, trial_id: int, deadline: float, rule: _MedianRule | None):
        self.trial_id = trial_id
        self.deadline = deadline
        self._rule = rule
        self.intermediate: list[tuple[int, float]] = []

    def check(self) -> None:
        if time.monotonic() > self.deadline:
            raise TrialTimeout(f"trial {self.trial_id} exceeded its deadline")

    def report(self, step: int, value: float) -> None:
        self.intermediate.append((int(step), float(value)))
        self.check()
        if self._rule is not None and self._rule.should_stop(step, value):
            raise TrialPruned(f"trial {self.trial_id} below median at step {step}")


# ---------------------------------------------------------------------------
# suggestion rules


def _unit_point(space: SearchSpaceSpec, config: dict) -> list:
    return [config[p.name] if p.kind == "categorical" else p.to_unit(config[p.name]) for p in space.params]


def _distinct(order, pts, space, limit, tol=1e-6):
    """First ``limit`` entries of ``order`` that are not within ``tol`` of an earlier kept point."""
    kept = []
    for i in order:
        if limit is not None and len(kept) >= limit:
            break
        if all(not _close(pts[i], pts[j], space, tol) for j in kept):
            kept.append(i)
    return kept


def _close(a, b, space, tol) -> bool:
    return all(x == y if p.kind == "categorical" else abs(x - y) <= tol for p, x, y in zip(space.params, a, b))


def racos_suggest(
    history: Sequence[TrialRecord],
    space: SearchSpaceSpec,
    rng: np.random.Generator,
    eps: float = 0.1,
    pos_frac: float = 0.2,
    train_size: int | None = 30,
) -> dict:
    """Sample from a region that holds one good trial and none of the poor ones.

    ``train_size=None`` classifies the whole history.
    """
    scored = [t for t in history if t.metric is not None and math.isfinite(t.metric)]
    if len(scored) < 2 or rng.random() < eps:
        return space.sample(rng)
    order = sorted(range(len(scored)), key=lambda i: (-scored[i].metric, scored[i].trial_id))
    order = _distinct(order, [_unit_point(space, t.config) for t in scored], space, train_size)
    n_pos = max(1, int(math.ceil(pos_frac * len(order))))
    if n_pos >= len(order):
        return space.sample(rng)
    pts = [_unit_point(space, scored[i].config) for i in order]
    positive = pts[int(rng.integers(n_pos))]
    negatives = pts[n_pos:]

    lo = [0.0] * len(space.params)
    hi = [1.0] * len(space.params)
    pinned = [False] * len(space.params)

    def inside(x) -> bool:
        for d, p in enumerate(space.params):
            if p.kind == "categorical":
                if pinned[d] and x[d] != positive[d]:
                    return False
            elif not lo[d] <= x[d] <= hi[d]:
                return False
        return True

    remaining = [x for x in negatives if inside(x)]
    while remaining:
        x = remaining[int(rng.integers(len(remaining)))]
        differ = [d for d in range(len(space.params)) if x[d] != positive[d]]
        if not differ:
            remaining.remove(x)  # a duplicate of the positive cannot be cut away
            continue
        # cut where the negative is farthest so the region stays wide on the other axes
        gap = np.array([1.0 if space.params[d].kind == "categorical" else abs(x[d] - positive[d]) for d in differ])
        d = differ[int(rng.choice(len(differ), p=gap / gap.sum()))]
        if space.params[d].kind == "categorical":
            pinned[d] = True
        elif x[d] < positive[d]:
            lo[d] = max(lo[d], float(rng.uniform(x[d], positive[d])))
        else:
            hi[d] = min(hi[d], float(rng.uniform(positive[d], x[d])))
        remaining = [y for y in remaining if inside(y)]

    out = {}
    for d, p in enumerate(space.params):
        if p.kind == "categorical":
            out[p.name] = positive[d] if pinned[d] else p.domain[int(rng.integers(len(p.domain)))]
        else:
            out[p.name] = p.from_unit(float(rng.uniform(lo[d], hi[d])))
    return out


def random_suggest(history, space: SearchSpaceSpec, rng: np.random.Generator, **_) -> dict:
    return space.sample(rng)


# ---------------------------------------------------------------------------
# driver


def _run_trial(objective, config: dict, trial: Trial) -> TrialRecord:
    start = time.monotonic()
    metric, status, error = None, "done", None
    try:
        metric = float(objective(config, trial))
        if not math.isfinite(metric):
            raise ValueError(f"objective returned {metric}")
        if time.monotonic() > trial.deadline:
            metric, status = None, "timed-out"
    except TrialPruned:
        status = "early-stopped"
        metric = trial.intermediate[-1][1]
    except TrialTimeout:
        status = "timed-out"
    except Exception as exc:  # objective failures are recorded, not fatal
        status, error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("trial %d failed: %s", trial.trial_id, error)
    return TrialRecord(trial.trial_id, config, metric, status, time.monotonic() - start, list(trial.intermediate), error)


def _jsonable(x):
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    raise TypeError(f"cannot serialize {type(x).__name__}")


def load_history(path) -> list[TrialRecord]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                d["intermediate"] = [tuple(v) for v in d.get("intermediate", [])]
                out.append(TrialRecord(**d))
    return out


def optimize(
    objective: Callable[[dict, Trial], float],
    space: SearchSpaceSpec,
    budget: TrialBudget = TrialBudget(),
    method: str = "racos",
    seed: int = 0,
    n_workers: int = 1,
    history_path=None,
    eps: float = 0.1,
    pos_frac: float = 0.2,
    early_stopping: bool = True,
) -> tuple[TrialRecord, list[TrialRecord]]:
    """Run trials until ``max_trials`` or ``max_total_seconds``; returns (best, history).

    With ``n_workers > 1`` configs are suggested in rounds of ``n_workers``
    and committed in trial order, so the trial sequence does not depend on
    thread timing.  Every committed trial is appended to ``history_path``
    as one JSON line.
    """
    if method not in ("racos", "random"):
        raise ValueError(f"method must be 'racos' or 'random', got {method!r}")
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    suggest = racos_suggest if method == "racos" else random_suggest
    rng = np.random.default_rng(seed)
    rule = _MedianRule() if early_stopping else None
    history: list[TrialRecord] = []
    t0 = time.monotonic()
    end = t0 + budget.max_total_seconds
    sink = None
    if history_path is not None:
        Path(history_path).parent.mkdir(parents=True, exist_ok=True)
        sink = open(history_path, "a")
    pool = ThreadPoolExecutor(n_workers) if n_workers > 1 else None
    try:
        while len(history) < budget.max_trials and time.monotonic() < end:
            n = min(n_workers, budget.max_trials - len(history))
            configs = [suggest(history, space, rng, eps=eps, pos_frac=pos_frac) for _ in range(n)]
            now = time.monotonic()
            trials = [
                Trial(len(history) + i, min(now + budget.per_trial_seconds, end), rule) for i in range(n)
            ]
            if pool is None:
                records = [_run_trial(objective, c, t) for c, t in zip(configs, trials)]
            else:
                records = list(pool.map(lambda ct: _run_trial(objective, *ct), zip(configs, trials)))
            for rec in records:
                history.append(rec)
                if rule is not None and rec.status == "done":
                    rule.commit(rec.intermediate)
                if sink is not None:
                    sink.write(json.dumps(rec.to_dict(), sort_keys=True, default=_jsonable) + "\n")
                    sink.flush()
    finally:
        if pool is not None:
            pool.shutdown()
        if sink is not None:
            sink.close()
    finished = [t for t in history if t.metric is not None]
    if not finished:
        raise RuntimeError(f"all {len(history)} trials failed or timed out")
    best = max(finished, key=lambda t: (t.metric, -t.trial_id))
    return best, history


# ---------------------------------------------------------------------------
# tuning the hand-designed model


def _dims(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(s).split(",") if v.strip())


def apply_config(arch, train_cfg, config: dict):
    """Map a config from ``default_space`` onto (ArchConfig, TrainConfig)."""
    from dataclasses import replace

    arch_kw, train_kw = {}, {}
    if "profile_mlp_dims" in config:
        arch_kw["profile_mlp_dims"] = _dims(config["profile_mlp_dims"])
    if "head_mlp_dims" in config:
        arch_kw["head_mlp_dims"] = _dims(config["head_mlp_dims"])
    if "n_encoder_layers" in config:
        arch_kw["n_encoder_layers"] = int(config["n_encoder_layers"])
    if "learning_rate" in config:
        train_kw["learning_rate"] = float(config["learning_rate"])
    return replace(arch, **arch_kw), replace(train_cfg, **train_kw)


def tune_predesigned(
    arch,
    train_cfg,
    fit,
    val,
    n_trials: int,
    method: str = "racos",
    seed: int = 0,
    max_seconds: float = math.inf,
    space: SearchSpaceSpec | None = None,
    history_path=None,
):
    """Tune the hand-designed model on ``fit``, scoring validation AUC after every epoch."""
    from . import nets

    space = space or default_space()

    def objective(config, trial):
        a, c = apply_config(arch, train_cfg, config)
        model = nets.build_model(a, seed)
        scores = []

        def on_epoch(epoch, module):
            score = nets.auc(nets.module_predict(module, val), val.labels)
            scores.append(score)
            trial.report(epoch, score)

        nets.train_model(model, fit, c, on_epoch=on_epoch)
        return scores[-1]

    best, history = optimize(
        objective, space, TrialBudget(n_trials, max_seconds), method, seed, history_path=history_path
    )
    a, c = apply_config(arch, train_cfg, best.config)
    info = {"best_config": best.config, "best_val_auc": best.metric, "n_trials": len(history)}
    return a, c, info
