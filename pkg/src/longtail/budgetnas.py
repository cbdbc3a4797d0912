"""Budget-limited differentiable search over the layered sequence-encoder space.

The supernet holds every candidate op of every layer.  Each forward pass
draws one candidate per decision (layer input, layer op, each residual edge)
with the Gumbel-Softmax trick, evaluates only the drawn branches and scales
each drawn branch by ``1 - detach(P) + P`` so the forward value is the plain
sub-network output while the drawn probability still carries gradient to
the logits.

Search alternates a weight step on a train split (hard-label CE plus
``delta`` times CE against the teacher) with an architecture step on a
validation split that adds ``lambda * expected_flops / space_max_flops``.
After search, each decision gets probability ``softmax(logits)`` and the
selected genotype is the most probable joint choice whose FLOPs fit the
budget.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn as nn

from . import nets
from .flopsmeter import (
    aggregation_flops,
    expected_flops,
    genotype_flops,
    op_flops,
    residual_flops,
    space_max_flops,
    space_min_flops,
)
from .nets import DTYPE, MLP, ArchConfig, LossSpec, ModelArtifact, TrainConfig
from .space import ArchWeights, Genotype, SpaceSpec, build_op
from .synthgen import Batch, ScenarioDataset

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class NasConfig:
    lam: float | None = None  # None: calibrated on the first batch
    lam_ratio: float = 0.1
    delta: float = 1.0
    beta: float = 0.003
    arch_lr: float = 0.01
    tau_start: float = 5.0
    tau_end: float = 0.1
    epochs: int = 6
    warmup_epochs: int = 0  # weight-only epochs before the logits start moving
    batch_size: int = 64
    flops_budget: int | None = None
    weight_optimizer: str = "adam"
    val_frac: float = 0.5
    seed: int = 0

    def validate(self, space: SpaceSpec | None = None, seq_len: int | None = None) -> None:
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.delta < 0 or self.beta <= 0 or self.arch_lr < 0:
            raise ValueError("delta must be >= 0, beta > 0 and arch_lr >= 0")
        if not 0 < self.tau_end <= self.tau_start:
            raise ValueError(f"need 0 < tau_end <= tau_start, got {self.tau_end}, {self.tau_start}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs must lie in 0..epochs-1, got {self.warmup_epochs}")
        if self.weight_optimizer not in ("adam", "sgd"):
            raise ValueError("weight_optimizer must be 'adam' or 'sgd'")
        if self.flops_budget is not None:
            if self.flops_budget < 1:
                raise ValueError("flops_budget must be positive")
            if space is not None and seq_len is not None and self.flops_budget > space_max_flops(space, seq_len):
                raise ValueError(
                    f"flops_budget {self.flops_budget} exceeds the space maximum {space_max_flops(space, seq_len)}"
                )

    def tau_at(self, epoch: int) -> float:
        if self.epochs == 1:
            return self.tau_start
        return self.tau_start * (self.tau_end / self.tau_start) ** (epoch / (self.epochs - 1))


def gumbel_sample(logits: torch.Tensor, tau: float, rng: torch.Generator | None = None, noise=None):
    """Gumbel-Softmax draw: returns (argmax index, relaxed probabilities).

    ``noise`` overrides the Gumbel(0, 1) draw (e.g. zeros for the noiseless case).
    """
    if tau <= 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if noise is None:
        u = torch.rand(logits.shape, generator=rng, dtype=logits.dtype)
        u = u.clamp(torch.finfo(logits.dtype).tiny, 1.0 - torch.finfo(logits.dtype).eps)
        noise = -torch.log(-torch.log(u))
    else:
        noise = torch.as_tensor(noise, dtype=logits.dtype)
    probs = torch.softmax((logits + noise) / tau, dim=-1)
    return int(torch.argmax(probs).item()), probs


def _st(p: torch.Tensor) -> torch.Tensor:
    return 1.0 - p.detach() + p


class _Cell(nn.Module):
    def __init__(self, space: SpaceSpec):
        super().__init__()
        self.ops = nn.ModuleList(build_op(op) for op in space.ops)


class Supernet(nn.Module):
    """Shared profile/head modules around one cell of all candidate ops per layer."""

    def __init__(self, space: SpaceSpec, base: ArchConfig):
        super().__init__()
        if base.embed != space.channels:
            raise ValueError(f"space channels {space.channels} differ from embed_dim {base.embed}")
        self.space = space
        self.base = base
        self.embedding = nn.Embedding(base.vocab_size, space.channels, padding_idx=0)
        self.profile = MLP(base.profile_dim, base.profile_mlp_dims)
        self.cells = nn.ModuleList(_Cell(space) for _ in range(space.n_layers))
        head_in = self.profile.out_dim + space.channels
        self.head = MLP(head_in, base.head_mlp_dims)
        self.out = nn.Linear(self.head.out_dim, 1)

    def forward(self, profiles, sequences, mask, aw: ArchWeights, rng=None, decisions=None):
        """Returns (probabilities, decision values) for one sampled sub-network.

        ``decisions`` pins the choices (still scaled by the relaxed
        probabilities) instead of drawing them.
        """
        x = self.embedding(sequences)
        nodes = [x]
        chosen = []
        pinned = list(decisions) if decisions is not None else None

        def draw(logits):
            idx, probs = gumbel_sample(logits, aw.tau, rng)
            if pinned is not None:
                idx = pinned[len(chosen)]
            chosen.append(idx)
            return idx, probs[idx]

        for L, cell in enumerate(self.cells):
            op_idx, p_op = draw(aw.op_logits[L])
            in_idx, p_in = draw(aw.input_logits[L])
            h = cell.ops[op_idx](nodes[in_idx] * _st(p_in), mask) * _st(p_op)
            for j in range(L + 1):
                inc, p_edge = draw(aw.res_logits[L][j])
                if inc == 1:
                    h = h + nodes[j] * _st(p_edge)
            nodes.append(h)
        w = torch.softmax(aw.agg_scores, dim=0)
        enc = sum(w[i] * nodes[i + 1] for i in range(len(self.cells)))
        m = mask.unsqueeze(-1)
        pooled = (enc * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)
        z = torch.cat([self.profile(profiles), pooled], dim=-1)
        return torch.sigmoid(self.out(self.head(z))).squeeze(-1), tuple(chosen)

    def weight_parameters(self):
        return list(self.parameters())

    def extract(self, genotype: Genotype, aw: ArchWeights) -> ModelArtifact:
        """Plain model for ``genotype`` carrying the supernet's current weights."""
        arch = replace(self.base, encoder_kind="searched", n_encoder_layers=genotype.n_layers, genotype=genotype)
        module = nets.module_from_arch(arch)
        state = module.state_dict()
        mine = self.state_dict()
        for k in state:
            if k.startswith("encoder.ops."):
                L, rest = k[len("encoder.ops.") :].split(".", 1)
                src = f"cells.{L}.ops.{genotype.layers[int(L)].op_index}.{rest}"
                state[k] = mine[src].clone()
            elif k == "encoder.agg_scores":
                state[k] = aw.agg_scores.detach().clone()
            else:
                state[k] = mine[k].clone()
        module.load_state_dict(state)
        return ModelArtifact(arch, nets._state_to_params(module), {"strategy": "supernet-extract"})


def build_supernet(space: SpaceSpec, base: ArchConfig, seed: int, tau: float = 1.0) -> tuple[Supernet, ArchWeights]:
    net = Supernet(space, base).to(DTYPE)
    nets._init_module(net, torch.Generator().manual_seed(int(seed)))
    return net, ArchWeights.zeros(space, tau=tau)


def _penalty(aw: ArchWeights, space: SpaceSpec, seq_len: int) -> torch.Tensor:
    return expected_flops(aw, space, seq_len) / space_max_flops(space, seq_len)


@dataclass
class SearchState:
    net: Supernet
    aw: ArchWeights
    cfg: NasConfig
    lam: float | None
    rng: torch.Generator
    w_opt: torch.optim.Optimizer
    a_opt: torch.optim.Optimizer
    steps: int = 0
    history: list = field(default_factory=list)


def _task_loss(probs, labels, teacher_probs, delta):
    if delta > 0 and teacher_probs is not None:
        return nets.distill_loss(probs, teacher_probs, labels, delta)
    return nets.ce_loss(probs, labels)


def new_search(space: SpaceSpec, base: ArchConfig, cfg: NasConfig) -> SearchState:
    cfg.validate(space, base.seq_len)
    net, aw = build_supernet(space, base, cfg.seed, tau=cfg.tau_start)
    if cfg.weight_optimizer == "adam":
        w_opt = torch.optim.Adam(net.weight_parameters(), lr=cfg.beta)
    else:
        w_opt = torch.optim.SGD(net.weight_parameters(), lr=cfg.beta)
    a_opt = torch.optim.Adam(aw.parameters(), lr=cfg.arch_lr)
    rng = torch.Generator().manual_seed(int(cfg.seed) + 1)
    return SearchState(net, aw, cfg, cfg.lam, rng, w_opt, a_opt)


def _dump(state: SearchState, decisions) -> str:
    logits = [v.detach().numpy().round(4).tolist() for v in state.aw.logit_vectors()]
    return f"decisions={decisions} logits={logits}"


def search_step(
    state: SearchState, train_batch, val_batch, teacher_train=None, teacher_val=None, update_arch: bool = True
) -> SearchState:
    """One alternating bilevel step: weights on ``train_batch``, then arch logits on ``val_batch``.

    Batches are tensor tuples ``(profiles, sequences, mask, labels)``.  With
    ``update_arch=False`` only the weight step runs.
    """
    cfg, net, aw = state.cfg, state.net, state.aw
    space, seq_len = net.space, net.base.seq_len
    P, S, M, Y = train_batch
    probs, dec = net(P, S, M, aw, state.rng)
    loss_w = _task_loss(probs, Y, teacher_train, cfg.delta)
    if not torch.isfinite(loss_w):
        raise FloatingPointError(f"non-finite weight loss at step {state.steps}: {_dump(state, dec)}")
    state.w_opt.zero_grad()
    loss_w.backward()
    state.w_opt.step()
    for p in aw.parameters():
        p.grad = None
    if not update_arch:
        state.steps += 1
        state.history.append((float(loss_w.detach()), float("nan"), float("nan")))
        return state

    P, S, M, Y = val_batch
    probs, dec = net(P, S, M, aw, state.rng)
    task = _task_loss(probs, Y, teacher_val, cfg.delta)
    pen = _penalty(aw, space, seq_len)
    if state.lam is None:
        state.lam = cfg.lam_ratio * float(task.detach()) / max(float(pen.detach()), 1e-12)
    loss_a = task + state.lam * pen
    if not torch.isfinite(loss_a):
        raise FloatingPointError(f"non-finite arch loss at step {state.steps}: {_dump(state, dec)}")
    state.a_opt.zero_grad()
    net.zero_grad(set_to_none=True)
    loss_a.backward()
    state.a_opt.step()
    net.zero_grad(set_to_none=True)
    state.steps += 1
    state.history.append((float(loss_w.detach()), float(task.detach()), float(pen.detach())))
    return state


def split_train_val(batch: Batch, val_frac: float, seed: int) -> tuple[Batch, Batch]:
    perm = np.random.default_rng(seed).permutation(len(batch))
    n_val = int(np.floor(val_frac * len(batch) + 0.5))
    return batch.take(np.sort(perm[n_val:])), batch.take(np.sort(perm[:n_val]))


def run_search(
    space: SpaceSpec,
    base: ArchConfig,
    data,
    cfg: NasConfig,
    teacher: ModelArtifact | None = None,
) -> SearchState:
    """Full search over ``cfg.epochs`` with an exponentially decaying temperature."""
    batch = nets._coerce_data(data)
    train, val = split_train_val(batch, cfg.val_frac, cfg.seed)
    state = new_search(space, base, cfg)
    tt = tv = None
    if teacher is not None and cfg.delta > 0:
        tt = torch.as_tensor(nets.predict(teacher, train), dtype=DTYPE)
        tv = torch.as_tensor(nets.predict(teacher, val), dtype=DTYPE)
    T_train, T_val = nets.batch_tensors(train), nets.batch_tensors(val)
    rng = np.random.default_rng(cfg.seed)
    state.net.train()
    for epoch in range(cfg.epochs):
        state.aw.tau = cfg.tau_at(epoch)
        perm_t = torch.as_tensor(rng.permutation(len(train)))
        perm_v = torch.as_tensor(rng.permutation(len(val)))
        n_batches = max(1, math.ceil(len(train) / cfg.batch_size))
        for b in range(n_batches):
            it = perm_t[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            start = (b * cfg.batch_size) % max(len(val), 1)
            iv = perm_v[start : start + cfg.batch_size]
            if len(iv) == 0:
                iv = perm_v[: cfg.batch_size]
            search_step(
                state,
                tuple(t[it] for t in T_train),
                tuple(t[iv] for t in T_val),
                tt[it] if tt is not None else None,
                tv[iv] if tv is not None else None,
                update_arch=epoch >= cfg.warmup_epochs,
            )
    log.debug("search finished after %d steps, lambda=%.4g", state.steps, state.lam or 0.0)
    return state


# ---------------------------------------------------------------------------
# constrained genotype derivation


def decision_probs(aw: ArchWeights) -> list[np.ndarray]:
    """Temperature-free softmax of every decision's logits."""
    return [torch.softmax(v.detach(), dim=-1).numpy() for v in aw.logit_vectors()]


def _ranked(probs: list[np.ndarray]):
    order = [np.argsort(-np.log(p), kind="stable") for p in probs]
    logp = [np.log(p)[o] for p, o in zip(probs, order)]
    return order, logp


def iter_by_joint_probability(probs: list[np.ndarray]):
    """Yield (log joint prob, decision values) in non-increasing joint probability."""
    order, logp = _ranked(probs)
    n = len(probs)
    start = (0,) * n
    heap = [(-float(sum(lp[0] for lp in logp)), start, 0)]
    while heap:
        neg, state, last = heapq.heappop(heap)
        yield -neg, tuple(int(order[d][state[d]]) for d in range(n))
        for d in range(last, n):
            if state[d] + 1 < len(order[d]):
                nxt = state[:d] + (state[d] + 1,) + state[d + 1 :]
                delta = logp[d][state[d] + 1] - logp[d][state[d]]
                heapq.heappush(heap, (neg - float(delta), nxt, d))


def _cost_table(space: SpaceSpec, seq_len: int):
    op_cost = [op_flops(op, seq_len) for op in space.ops]
    edge = residual_flops(space.channels, seq_len)
    fixed = aggregation_flops(space.n_layers, space.channels, seq_len)

    def cost(values) -> int:
        total, pos = fixed, 0
        for L in range(1, space.n_layers + 1):
            total += op_cost[values[pos]] + edge * sum(values[pos + 2 : pos + 2 + L])
            pos += 2 + L
        return total

    return cost


def derive_genotype(aw: ArchWeights, space: SpaceSpec, budget: int, seq_len: int) -> Genotype:
    """Most probable genotype with ``genotype_flops <= budget``.

    Ties in joint probability go to lower FLOPs, then to the lexicographically
    smaller decision vector.
    """
    floor = space_min_flops(space, seq_len)
    if budget < floor:
        raise ValueError(f"no genotype fits budget {budget}; the space minimum is {floor} FLOPs")
    cost = _cost_table(space, seq_len)
    best_lp, candidates = None, []
    for lp, values in iter_by_joint_probability(decision_probs(aw)):
        if best_lp is not None and lp < best_lp - TIE_TOL * max(1.0, abs(best_lp)):
            break
        flops = cost(values)
        if flops <= budget:
            if best_lp is None:
                best_lp = lp
            candidates.append((flops, values))
    _, values = min(candidates)
    return Genotype.from_decisions(space, values)


# ---------------------------------------------------------------------------
# final light model


def light_arch_from(base: ArchConfig, genotype: Genotype) -> ArchConfig:
    return replace(base, encoder_kind="searched", n_encoder_layers=genotype.n_layers, genotype=genotype)


def train_light(
    genotype: Genotype,
    data,
    teacher: ModelArtifact | None,
    cfg: TrainConfig,
    base: ArchConfig,
    delta: float = 1.0,
    budget: int | None = None,
    provenance: dict | None = None,
) -> ModelArtifact:
    """Train the derived architecture from fresh initialization with the distillation loss."""
    arch = light_arch_from(base, genotype)
    if budget is not None:
        total = genotype_flops(genotype, arch.seq_len).total
        if total > budget:
            raise ValueError(f"genotype needs {total} FLOPs, above the budget {budget}")
    model = nets.build_model(arch, cfg.seed, provenance)
    if delta > 0:
        loss = LossSpec("distill", teacher, delta)
    else:
        loss = LossSpec("ce")
    return nets.train_model(model, data, cfg, loss)


def search_light(
    data,
    teacher: ModelArtifact | None,
    base: ArchConfig,
    nas: NasConfig,
    train_cfg: TrainConfig,
    space: SpaceSpec | None = None,
    provenance: dict | None = None,
) -> tuple[Genotype, ModelArtifact, SearchState]:
    """Search, derive under ``nas.flops_budget`` and retrain with distillation."""
    space = space or SpaceSpec(n_layers=3, channels=base.embed)
    state = run_search(space, base, data, nas, teacher)
    budget = nas.flops_budget if nas.flops_budget is not None else space_max_flops(space, base.seq_len)
    g = derive_genotype(state.aw, space, budget, base.seq_len)
    art = train_light(g, data, teacher, train_cfg, base, nas.delta, budget, provenance)
    return g, art, state
