"""Profile + behavior-sequence CTR-style models, training, losses and AUC.

A model concatenates a profile MLP embedding with a masked-mean summary of
an encoded event sequence and feeds both through a prediction MLP ending in
a sigmoid.  Three sequence encoders are available: stacked LSTM
(``recurrent``), post-norm transformer blocks (``attention``) and a searched
layered encoder (``searched``, built from a ``Genotype``).

Parameter initialization (``build_model``) is deterministic per seed:

* linear / conv weights and biases ``~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
  with ``fan_in = in_features * kernel``;
* LSTM weights and biases ``~ U(-1/sqrt(H), 1/sqrt(H))``;
* event embeddings ``~ N(0, 1/E)`` with the padding row zeroed;
* layer norms start at identity; positional table and aggregation scores at 0.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from scipy.stats import rankdata

from .space import Genotype, SelfAttentionOp, OpSpec, build_op
from .synthgen import Batch, ScenarioDataset

DTYPE = torch.float64
EPS = 1e-7
ENCODER_KINDS = ("recurrent", "attention", "searched")


@dataclass(frozen=True)
class ArchConfig:
    encoder_kind: str = "recurrent"
    n_encoder_layers: int = 6
    hidden_dim: int = 15
    intermediate_dim: int = 32
    n_heads: int = 3
    profile_mlp_dims: tuple[int, ...] = (32, 32)
    head_mlp_dims: tuple[int, ...] = (32,)
    embed_dim: int | None = None
    profile_dim: int = 16
    vocab_size: int = 50
    seq_len: int = 32
    genotype: Genotype | None = None

    def __post_init__(self):
        object.__setattr__(self, "profile_mlp_dims", tuple(self.profile_mlp_dims))
        object.__setattr__(self, "head_mlp_dims", tuple(self.head_mlp_dims))

    @property
    def embed(self) -> int:
        return self.embed_dim if self.embed_dim is not None else self.hidden_dim

    @property
    def seq_out_dim(self) -> int:
        return self.hidden_dim if self.encoder_kind == "recurrent" else self.embed

    @property
    def head_in_dim(self) -> int:
        prof = self.profile_mlp_dims[-1] if self.profile_mlp_dims else self.profile_dim
        return prof + self.seq_out_dim

    def validate(self) -> None:
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}, got {self.encoder_kind!r}")
        dims = {
            "n_encoder_layers": self.n_encoder_layers,
            "hidden_dim": self.hidden_dim,
            "intermediate_dim": self.intermediate_dim,
            "n_heads": self.n_heads,
            "embed_dim": self.embed,
            "profile_dim": self.profile_dim,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
        }
        for name, v in dims.items():
            if v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")
        for name in ("profile_mlp_dims", "head_mlp_dims"):
            if any(d < 1 for d in getattr(self, name)):
                raise ValueError(f"{name} entries must be >= 1, got {getattr(self, name)}")
        if self.encoder_kind == "attention" and self.embed % self.n_heads:
            raise ValueError(f"embed_dim {self.embed} is not divisible by n_heads {self.n_heads}")
        if self.encoder_kind == "searched":
            if self.genotype is None:
                raise ValueError("encoder_kind='searched' requires a genotype")
            for L, layer in enumerate(self.genotype.layers, start=1):
                if layer.op.channels_in != self.embed or layer.op.channels_out != self.embed:
                    raise ValueError(
                        f"genotype layer {L} op {layer.op.name} has channels "
                        f"{layer.op.channels_in}->{layer.op.channels_out} but embed_dim is {self.embed}"
                    )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["profile_mlp_dims"] = list(self.profile_mlp_dims)
        d["head_mlp_dims"] = list(self.head_mlp_dims)
        d["genotype"] = self.genotype.to_dict() if self.genotype is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if d.get("genotype") is not None:
            d["genotype"] = Genotype.from_dict(d["genotype"])
        return cls(**d)


def heavy_arch(kind: str = "recurrent", **kw) -> ArchConfig:
    return ArchConfig(encoder_kind=kind, n_encoder_layers=6, **kw)


def light_arch(kind: str = "recurrent", **kw) -> ArchConfig:
    return ArchConfig(encoder_kind=kind, n_encoder_layers=3, **kw)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    epochs: int = 5
    seed: int = 0

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    teacher: "ModelArtifact | None" = None
    delta: float = 1.0

    def __post_init__(self):
        if self.kind not in ("ce", "distill"):
            raise ValueError(f"loss kind must be 'ce' or 'distill', got {self.kind!r}")
        if self.kind == "distill" and self.delta > 0 and self.teacher is None:
            raise ValueError("distill loss with delta > 0 needs a teacher")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass
class ModelArtifact:
    arch: ArchConfig
    params: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)
    history: tuple[float, ...] = ()

    def copy(self) -> "ModelArtifact":
        return ModelArtifact(
            self.arch, {k: v.copy() for k, v in self.params.items()}, copy.deepcopy(self.provenance), self.history
        )

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def flops(self) -> dict:
        from .flopsmeter import arch_flops

        return arch_flops(self.arch)


# ---------------------------------------------------------------------------
# modules


class MLP(nn.Module):
    def __init__(self, d_in: int, dims: Sequence[int]):
        super().__init__()
        layers, prev = [], d_in
        for d in dims:
            layers += [nn.Linear(prev, d), nn.ReLU()]
            prev = d
        self.net = nn.Sequential(*layers)
        self.out_dim = prev

    def forward(self, x):
        return self.net(x)


class TransformerBlock(nn.Module):
    def __init__(self, channels: int, intermediate: int, heads: int):
        super().__init__()
        self.attn = SelfAttentionOp(OpSpec("self_attention", 1, 1, channels, channels, heads))
        self.norm1 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, intermediate), nn.ReLU(), nn.Linear(intermediate, channels))
        self.norm2 = nn.LayerNorm(channels)

    def forward(self, x, mask):
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ff(x))


class GenotypeEncoder(nn.Module):
    def __init__(self, genotype: Genotype):
        super().__init__()
        self.genotype = genotype
        self.ops = nn.ModuleList(build_op(layer.op) for layer in genotype.layers)
        self.agg_scores = nn.Parameter(torch.zeros(genotype.n_layers))

    def forward(self, x, mask):
        nodes = [x]
        for layer, op in zip(self.genotype.layers, self.ops):
            h = op(nodes[layer.input_index], mask)
            for j in layer.residual:
                h = h + nodes[j]
            nodes.append(h)
        w = torch.softmax(self.agg_scores, dim=0)
        return sum(w[i] * nodes[i + 1] for i in range(len(self.ops)))


class SequenceModel(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        E = arch.embed
        self.embedding = nn.Embedding(arch.vocab_size, E, padding_idx=0)
        self.profile = MLP(arch.profile_dim, arch.profile_mlp_dims)
        if arch.encoder_kind == "recurrent":
            self.encoder = nn.LSTM(E, arch.hidden_dim, num_layers=arch.n_encoder_layers, batch_first=True)
        elif arch.encoder_kind == "attention":
            self.pos = nn.Parameter(torch.zeros(arch.seq_len, E))
            self.encoder = nn.ModuleList(
                TransformerBlock(E, arch.intermediate_dim, arch.n_heads) for _ in range(arch.n_encoder_layers)
            )
        else:
            self.encoder = GenotypeEncoder(arch.genotype)
        self.head = MLP(arch.head_in_dim, arch.head_mlp_dims)
        self.out = nn.Linear(self.head.out_dim, 1)

    def encode(self, sequences, mask):
        x = self.embedding(sequences)
        kind = self.arch.encoder_kind
        if kind == "recurrent":
            h = self.encoder(x)[0]
        elif kind == "attention":
            h = x + self.pos[: x.shape[1]]
            for block in self.encoder:
                h = block(h, mask)
        else:
            h = self.encoder(x, mask)
        m = mask.unsqueeze(-1)
        return (h * m).sum(dim=1) / m.sum(dim=1).clamp_min(1.0)

    def forward(self, profiles, sequences, mask):
        z = torch.cat([self.profile(profiles), self.encode(sequences, mask)], dim=-1)
        return torch.sigmoid(self.out(self.head(z))).squeeze(-1)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    def uniform_(t, bound):
        with torch.no_grad():
            t.copy_((torch.rand(t.shape, generator=gen, dtype=t.dtype) * 2 - 1) * bound)

    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = 1.0 / math.sqrt(m.in_features)
            uniform_(m.weight, bound)
            uniform_(m.bias, bound)
        elif isinstance(m, nn.Conv1d):
            bound = 1.0 / math.sqrt(m.in_channels * m.kernel_size[0])
            uniform_(m.weight, bound)
            uniform_(m.bias, bound)
        elif isinstance(m, nn.LSTM):
            bound = 1.0 / math.sqrt(m.hidden_size)
            for p in m.parameters():
                uniform_(p, bound)
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                w = torch.randn(m.weight.shape, generator=gen, dtype=m.weight.dtype) / math.sqrt(m.embedding_dim)
                w[0] = 0.0
                m.weight.copy_(w)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def module_from_arch(arch: ArchConfig) -> SequenceModel:
    return SequenceModel(arch).to(DTYPE)


def _state_to_params(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def to_module(artifact: ModelArtifact) -> SequenceModel:
    module = module_from_arch(artifact.arch)
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in artifact.params.items()}
    module.load_state_dict(state, strict=True)
    return module


def build_model(arch: ArchConfig, seed: int, provenance: dict | None = None) -> ModelArtifact:
    module = module_from_arch(arch)
    gen = torch.Generator().manual_seed(int(seed))
    _init_module(module, gen)
    prov = {"strategy": None, "scenario_id": "agnostic", "seed": int(seed), "train_config": None}
    prov.update(provenance or {})
    return ModelArtifact(arch, _state_to_params(module), prov)


# ---------------------------------------------------------------------------
# losses and metrics


def _as_tensor(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def _bce(p, q):
    p = p.clamp(EPS, 1.0 - EPS)
    return -(q * torch.log(p) + (1.0 - q) * torch.log(1.0 - p)).mean()


def _maybe_float(out, *inputs):
    return out if any(torch.is_tensor(x) for x in inputs) else float(out)


def ce_loss(probs, labels):
    """Mean binary cross-entropy with probabilities clamped to [eps, 1 - eps]."""
    return _maybe_float(_bce(_as_tensor(probs), _as_tensor(labels)), probs, labels)


def distill_loss(student_probs, teacher_probs, labels, delta: float):
    """Hard-label CE plus ``delta`` times CE against the teacher's soft labels."""
    p = _as_tensor(student_probs)
    hard = _bce(p, _as_tensor(labels))
    q = _as_tensor(teacher_probs).clamp(EPS, 1.0 - EPS)
    soft = _bce(p, q)
    return _maybe_float(hard + delta * soft, student_probs, teacher_probs, labels)


def auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ in shape")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------------------
# forward / training


def _coerce_data(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, ScenarioDataset):
        return data.part("train")
    if isinstance(data, (list, tuple)) and data and isinstance(data[0], (ScenarioDataset, Batch)):
        return Batch.concat([_coerce_data(d) for d in data])
    raise TypeError(f"cannot train on {type(data).__name__}")


def batch_tensors(b: Batch):
    return (
        torch.as_tensor(np.asarray(b.profiles, dtype=np.float64), dtype=DTYPE),
        torch.as_tensor(np.asarray(b.sequences), dtype=torch.long),
        torch.as_tensor(np.asarray(b.mask, dtype=np.float64), dtype=DTYPE),
        torch.as_tensor(np.asarray(b.labels, dtype=np.float64), dtype=DTYPE),
    )


def module_predict(module: nn.Module, data: Batch, chunk: int = 4096) -> np.ndarray:
    tensors = batch_tensors(data)
    out = []
    module.eval()
    with torch.no_grad():
        for i in range(0, len(data), chunk):
            out.append(module(*(t[i : i + chunk] for t in tensors[:3])))
    return torch.cat(out).numpy() if out else np.zeros(0)


def predict(artifact: ModelArtifact, data) -> np.ndarray:
    data = data.part("test") if isinstance(data, ScenarioDataset) else data
    return module_predict(to_module(artifact), data)


def evaluate_auc(artifact: ModelArtifact, data) -> float:
    data = data.part("test") if isinstance(data, ScenarioDataset) else data
    return auc(predict(artifact, data), data.labels)


def fit_module(
    module: nn.Module, data: Batch, cfg: TrainConfig, loss: LossSpec, teacher_probs=None, on_epoch=None
) -> list[float]:
    """Adam over shuffled mini-batches; returns the mean batch loss of every epoch.

    ``on_epoch(epoch, module)`` runs after every epoch; it may raise to stop training.
    """
    cfg.validate()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    P, S, M, Y = batch_tensors(data)
    Q = _as_tensor(teacher_probs) if teacher_probs is not None else None
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)
    history = []
    module.train()
    step = 0
    for epoch in range(cfg.epochs):
        perm = torch.as_tensor(rng.permutation(len(data)))
        total = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            probs = module(P[idx], S[idx], M[idx])
            if loss.kind == "distill":
                value = distill_loss(probs, Q[idx] if Q is not None else probs.detach(), Y[idx], loss.delta)
            else:
                value = ce_loss(probs, Y[idx])
            if not torch.isfinite(value):
                raise FloatingPointError(f"non-finite training loss {value.item()} at batch {step}")
            opt.zero_grad()
            value.backward()
            opt.step()
            total += value.item() * len(idx)
            step += 1
        history.append(total / len(data))
        if on_epoch is not None:
            on_epoch(epoch, module)
            module.train()
    return history


def train_model(
    model: ModelArtifact,
    data,
    cfg: TrainConfig,
    loss: LossSpec | None = None,
    provenance: dict | None = None,
    on_epoch=None,
) -> ModelArtifact:
    """Train a copy of ``model``; the input artifact is never modified."""
    loss = loss or LossSpec()
    batch = _coerce_data(data)
    module = to_module(model)
    teacher_probs = None
    if loss.kind == "distill" and loss.teacher is not None:
        teacher_probs = predict(loss.teacher, batch)
    history = fit_module(module, batch, cfg, loss, teacher_probs, on_epoch)
    prov = dict(model.provenance)
    prov.update({"train_config": cfg.digest(), "loss": loss.kind, "delta": loss.delta if loss.kind == "distill" else 0.0})
    prov.update(provenance or {})
    return ModelArtifact(model.arch, _state_to_params(module), prov, model.history + tuple(history))
