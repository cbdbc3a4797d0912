"""Scenario-agnostic heavy model lifecycle.

``fine_tune`` copies the agnostic parameters, takes plain gradient steps on
a scenario's support set and returns the adapted model together with a
feedback packet: the gradient of the query-set loss.  ``meta_update`` folds
one or more packets into the agnostic model with a small outer rate,

    theta_0 <- theta_0 - eta * sum_u grad L(query_u, theta_u)

using the first-order approximation (gradient taken at the adapted
parameters) unless ``second_order`` is set, in which case the gradient is
differentiated through the inner steps.
"""

from __future__ import annotations

import logging
import threading
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch
from torch.func import functional_call

from . import nets
from .nets import DTYPE, ModelArtifact, TrainConfig
from .synthgen import Batch, ScenarioDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaState:
    agnostic: ModelArtifact
    gamma: float = 0.05
    eta: float | None = None  # defaults to 0.1 * gamma
    inner_steps: int = 1
    inner_batch_size: int = 128
    version: int = 0
    staleness_bound: int = 4
    second_order: bool = False
    refresh_epochs: int = 1
    refresh_lr: float = 0.001
    refresh_batch_size: int = 128
    archive: tuple[Batch, ...] = ()
    archive_ids: tuple = ()
    last_dropped: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.eta is None:
            object.__setattr__(self, "eta", 0.1 * self.gamma)
        if self.gamma < 0 or self.eta < 0:
            raise ValueError("gamma and eta must be >= 0")
        if self.eta > self.gamma:
            raise ValueError(f"eta={self.eta} exceeds gamma={self.gamma}; the outer rate must stay conservative")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")

    def metadata(self) -> dict:
        return {
            "gamma": self.gamma,
            "eta": self.eta,
            "inner_steps": self.inner_steps,
            "inner_batch_size": self.inner_batch_size,
            "version": self.version,
            "staleness_bound": self.staleness_bound,
            "second_order": self.second_order,
            "refresh_epochs": self.refresh_epochs,
            "refresh_lr": self.refresh_lr,
            "refresh_batch_size": self.refresh_batch_size,
            "archive_ids": list(self.archive_ids),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class FeedbackPacket:
    scenario_id: object
    query_gradient: dict[str, np.ndarray]
    query_loss: float
    base_version: int


# ---------------------------------------------------------------------------
# fine-tuning


def _trainable(module) -> dict[str, torch.Tensor]:
    return {k: v for k, v in module.named_parameters()}


def _loss_at(module, params, tensors):
    P, S, M, Y = tensors
    return nets.ce_loss(functional_call(module, params, (P, S, M)), Y)


def fine_tune(state: MetaState, ds, seed: int | None = None) -> tuple[ModelArtifact, FeedbackPacket]:
    """Adapt a copy of the agnostic model on the support rows; report the query gradient.

    Each of ``inner_steps`` passes walks the support set in shuffled
    mini-batches of ``inner_batch_size`` with plain gradient steps at rate
    ``gamma``.
    """
    if isinstance(ds, ScenarioDataset):
        support, query, sid = ds.part("support"), ds.part("query"), ds.scenario_id
    else:
        support, query, sid = ds[0], ds[1], None
    if len(query) == 0:
        raise ValueError(f"scenario {sid}: no query rows; run split_support_query first")
    if len(support) == 0:
        raise ValueError(f"scenario {sid}: no support rows")

    module = nets.to_module(state.agnostic)
    module.train()
    theta0 = {k: v.detach().clone().requires_grad_(True) for k, v in _trainable(module).items()}
    buffers = {k: v for k, v in module.named_buffers()}
    sup = nets.batch_tensors(support)
    rng = np.random.default_rng(state.seed if seed is None else seed)

    params = dict(theta0)
    for _ in range(state.inner_steps):
        perm = torch.as_tensor(rng.permutation(len(support)))
        for start in range(0, len(support), state.inner_batch_size):
            idx = perm[start : start + state.inner_batch_size]
            loss = _loss_at(module, {**params, **buffers}, tuple(t[idx] for t in sup))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"scenario {sid}: non-finite support loss at batch {start // state.inner_batch_size}")
            grads = torch.autograd.grad(loss, list(params.values()), create_graph=state.second_order)
            params = {k: p - state.gamma * g for (k, p), g in zip(params.items(), grads)}

    qry = nets.batch_tensors(query)
    if state.second_order:
        q_loss = _loss_at(module, {**params, **buffers}, qry)
        grads = torch.autograd.grad(q_loss, list(theta0.values()))
    else:
        adapted = {k: v.detach().requires_grad_(True) for k, v in params.items()}
        q_loss = _loss_at(module, {**adapted, **buffers}, qry)
        grads = torch.autograd.grad(q_loss, list(adapted.values()))
    gradient = {k: g.detach().numpy().copy() for k, g in zip(params.keys(), grads)}

    new_params = {k: v.copy() for k, v in state.agnostic.params.items()}
    for k, v in params.items():
        new_params[k] = v.detach().numpy().copy()
    prov = dict(state.agnostic.provenance)
    prov.update({"scenario_id": sid, "fine_tuned_from": state.version, "gamma": state.gamma})
    theta_u = ModelArtifact(state.agnostic.arch, new_params, prov, state.agnostic.history)
    packet = FeedbackPacket(sid, gradient, float(q_loss.detach()), state.version)
    return theta_u, packet


# ---------------------------------------------------------------------------
# outer update


def meta_update(state: MetaState, packets: Sequence[FeedbackPacket]) -> MetaState:
    """Apply ``theta_0 -= eta * sum(query gradients)`` and bump the version.

    Packets older than ``staleness_bound`` versions are dropped (listed in
    ``last_dropped``); if every packet is stale the state is returned as is.
    """
    if not packets:
        raise ValueError("meta_update needs at least one packet")
    fresh, dropped = [], []
    for p in packets:
        (dropped if state.version - p.base_version > state.staleness_bound else fresh).append(p)
    if dropped:
        ids = [p.scenario_id for p in dropped]
        log.warning("dropping %d stale packet(s) for scenarios %s", len(dropped), ids)
    if not fresh:
        warnings.warn("all feedback packets are stale; agnostic model unchanged", RuntimeWarning, stacklevel=2)
        return replace(state, last_dropped=tuple(p.scenario_id for p in dropped))

    params = state.agnostic.params
    for p in fresh:
        for k, g in p.query_gradient.items():
            if k not in params or g.shape != params[k].shape:
                raise ValueError(f"packet from scenario {p.scenario_id}: gradient {k!r} does not match the model")
            if not np.all(np.isfinite(g)):
                raise ValueError(f"packet from scenario {p.scenario_id}: non-finite gradient in {k!r}")

    new_params = {}
    for k, v in params.items():
        total = None
        for p in fresh:
            if k in p.query_gradient:
                total = p.query_gradient[k].copy() if total is None else total + p.query_gradient[k]
        new_params[k] = v.copy() if total is None else v - state.eta * total
    prov = dict(state.agnostic.provenance)
    prov["meta_version"] = state.version + 1
    agnostic = ModelArtifact(state.agnostic.arch, new_params, prov, state.agnostic.history)
    return replace(
        state, agnostic=agnostic, version=state.version + 1, last_dropped=tuple(p.scenario_id for p in dropped)
    )


def archive_scenario(state: MetaState, ds: ScenarioDataset) -> MetaState:
    return replace(state, archive=state.archive + (ds.part("train"),), archive_ids=state.archive_ids + (ds.scenario_id,))


def periodic_refresh(state: MetaState, epochs: int | None = None) -> MetaState:
    """Retrain the agnostic model over every archived training set."""
    epochs = state.refresh_epochs if epochs is None else epochs
    if not state.archive:
        warnings.warn("refresh skipped: the archive is empty", RuntimeWarning, stacklevel=2)
        return state
    if epochs == 0:
        return state
    cfg = TrainConfig(state.refresh_lr, state.refresh_batch_size, epochs, state.seed + state.version)
    agnostic = nets.train_model(state.agnostic, Batch.concat(list(state.archive)), cfg, provenance={"refreshed_at": state.version})
    return replace(state, agnostic=agnostic, version=state.version + 1)


class MetaCoordinator:
    """Thread-safe holder: concurrent fine-tunes read snapshots, commits are serialized."""

    def __init__(self, state: MetaState):
        self._state = state
        self._lock = threading.Lock()

    def snapshot(self) -> MetaState:
        with self._lock:
            return self._state

    def commit(self, packets: Sequence[FeedbackPacket]) -> MetaState:
        with self._lock:
            self._state = meta_update(self._state, packets)
            return self._state

    def apply(self, fn: Callable[[MetaState], MetaState]) -> MetaState:
        with self._lock:
            self._state = fn(self._state)
            return self._state


# ---------------------------------------------------------------------------
# initialization


@dataclass
class Candidate:
    name: str
    artifact: ModelArtifact
    val_auc: float
    flops: int
    info: dict = field(default_factory=dict)


def select_candidate(candidates: Sequence[Candidate], tol: float = 1e-6) -> Candidate:
    """Highest validation AUC; within ``tol`` of the best, the lower-FLOPs one."""
    if not candidates:
        raise ValueError("no candidates to choose from")
    best = max(c.val_auc for c in candidates)
    close = [c for c in candidates if c.val_auc >= best - tol]
    return min(close, key=lambda c: (c.flops, -c.val_auc))


@dataclass(frozen=True)
class InitConfig:
    use_predesigned: bool = True
    use_nas: bool = False
    hpo_trials: int = 0
    hpo_method: str = "racos"
    hpo_seconds: float = 600.0
    val_frac: float = 0.2
    hpo_history_path: str | None = None
    nas: object = None  # budgetnas.NasConfig; None uses its defaults with delta=0


def _pooled_split(pooled: Sequence[ScenarioDataset], val_frac: float, seed: int) -> tuple[Batch, Batch]:
    from .budgetnas import split_train_val

    train = Batch.concat([d.part("train") for d in pooled])
    return split_train_val(train, val_frac, seed)


def init_agnostic(
    pooled: Sequence[ScenarioDataset],
    arch: nets.ArchConfig,
    train_cfg: TrainConfig,
    init: InitConfig = InitConfig(),
    seed: int = 0,
    **state_kw,
) -> tuple[MetaState, list[Candidate]]:
    """Build both candidate pipelines on pooled data and keep the better one as theta_0.

    Returns the new state and every evaluated candidate.
    """
    if not pooled:
        raise ValueError("init_agnostic needs at least one scenario")
    if not (init.use_predesigned or init.use_nas):
        raise ValueError("both initialization pipelines are disabled")
    fit, val = _pooled_split(pooled, init.val_frac, seed)
    candidates = []

    if init.use_predesigned:
        chosen_arch, chosen_cfg, info = arch, train_cfg, {}
        if init.hpo_trials > 0:
            from .hpo import tune_predesigned

            chosen_arch, chosen_cfg, info = tune_predesigned(
                arch,
                train_cfg,
                fit,
                val,
                init.hpo_trials,
                init.hpo_method,
                seed,
                init.hpo_seconds,
                history_path=init.hpo_history_path,
            )
        model = nets.build_model(chosen_arch, seed, {"strategy": "agnostic-predesigned"})
        model = nets.train_model(model, fit, chosen_cfg)
        candidates.append(
            Candidate("predesigned", model, nets.evaluate_auc(model, val), model.flops()["total"], info)
        )

    if init.use_nas:
        from . import budgetnas
        from .space import SpaceSpec

        nas_cfg = init.nas or budgetnas.NasConfig(delta=0.0, seed=seed)
        space = SpaceSpec(n_layers=3, channels=arch.embed)
        state = budgetnas.run_search(space, arch, fit, replace(nas_cfg, delta=0.0))
        budget = nas_cfg.flops_budget or budgetnas.space_max_flops(space, arch.seq_len)
        g = budgetnas.derive_genotype(state.aw, space, budget, arch.seq_len)
        model = budgetnas.train_light(g, fit, None, train_cfg, arch, delta=0.0, provenance={"strategy": "agnostic-nas"})
        candidates.append(
            Candidate("nas", model, nets.evaluate_auc(model, val), model.flops()["total"], {"genotype": g.to_dict()})
        )

    best = select_candidate(candidates)
    log.info("agnostic init: %s", ", ".join(f"{c.name}={c.val_auc:.4f}" for c in candidates))
    return MetaState(agnostic=best.artifact, seed=seed, **state_kw), candidates
