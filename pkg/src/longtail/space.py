"""Layered sequence-encoder search space: candidate ops, genotypes, arch logits.

Node 0 is the embedded input sequence; node ``L`` is the output of layer
``L`` (1-based).  Layer ``L`` reads one of nodes ``0..L-1`` as input, applies
one candidate op, and adds any subset of nodes ``0..L-1`` as residual inputs.
Every op maps ``[B, T, C] -> [B, T, C]`` (stride 1, SAME padding).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

OP_KINDS = ("conv1d", "dilated_conv1d", "avg_pool1d", "max_pool1d", "recurrent", "self_attention")


@dataclass(frozen=True)
class OpSpec:
    kind: str
    kernel: int = 1
    dilation: int = 1
    channels_in: int = 1
    channels_out: int = 1
    heads: int = 1

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ValueError(f"unknown op kind {self.kind!r}; expected one of {OP_KINDS}")
        if self.kind in ("conv1d", "dilated_conv1d", "avg_pool1d", "max_pool1d"):
            if self.kernel < 1 or self.kernel % 2 == 0:
                raise ValueError(f"{self.kind} kernel must be a positive odd integer, got {self.kernel}")
        if self.dilation < 1 or self.channels_in < 1 or self.channels_out < 1 or self.heads < 1:
            raise ValueError(f"non-positive field in {self}")
        if self.kind in ("avg_pool1d", "max_pool1d", "self_attention") and self.channels_in != self.channels_out:
            raise ValueError(f"{self.kind} needs channels_in == channels_out, got {self.channels_in}/{self.channels_out}")
        if self.kind == "self_attention" and self.channels_in % self.heads:
            raise ValueError(f"self_attention: channels {self.channels_in} not divisible by heads {self.heads}")

    @property
    def name(self) -> str:
        return {
            "conv1d": f"conv{self.kernel}",
            "dilated_conv1d": f"dconv{self.kernel}d{self.dilation}",
            "avg_pool1d": f"avgpool{self.kernel}",
            "max_pool1d": f"maxpool{self.kernel}",
            "recurrent": "lstm",
            "self_attention": f"attn{self.heads}h",
        }[self.kind]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("kind", "kernel", "dilation", "channels_in", "channels_out", "heads")}

    @classmethod
    def from_dict(cls, d: dict) -> "OpSpec":
        return cls(**d)


def default_ops(channels: int, heads: int = 3) -> tuple[OpSpec, ...]:
    """Experiment candidate set: conv / dilated conv k in {1,3,5,7}, pools k=3, LSTM, attention."""
    if channels % heads:
        heads = 1
    ops = [OpSpec("conv1d", k, 1, channels, channels) for k in (1, 3, 5, 7)]
    ops += [OpSpec("dilated_conv1d", k, 2, channels, channels) for k in (1, 3, 5, 7)]
    ops += [OpSpec("avg_pool1d", 3, 1, channels, channels), OpSpec("max_pool1d", 3, 1, channels, channels)]
    ops += [OpSpec("recurrent", 1, 1, channels, channels), OpSpec("self_attention", 1, 1, channels, channels, heads)]
    return tuple(ops)


@dataclass(frozen=True)
class SpaceSpec:
    n_layers: int = 3
    channels: int = 15
    ops: tuple[OpSpec, ...] = ()

    def __post_init__(self):
        if not self.ops:
            object.__setattr__(self, "ops", default_ops(self.channels))
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        for op in self.ops:
            if op.channels_in != self.channels or op.channels_out != self.channels:
                raise ValueError(f"op {op.name} is not shape-preserving at {self.channels} channels")

    def decision_sizes(self) -> list[int]:
        """Cardinality of every decision, in lexicographic decision order."""
        sizes = []
        for L in range(1, self.n_layers + 1):
            sizes += [len(self.ops), L] + [2] * L
        return sizes

    def n_genotypes(self) -> int:
        return math.prod(self.decision_sizes())

    def to_dict(self) -> dict:
        return {"n_layers": self.n_layers, "channels": self.channels, "ops": [o.to_dict() for o in self.ops]}

    @classmethod
    def from_dict(cls, d: dict) -> "SpaceSpec":
        return cls(d["n_layers"], d["channels"], tuple(OpSpec.from_dict(o) for o in d["ops"]))


@dataclass(frozen=True)
class LayerChoice:
    input_index: int
    op_index: int
    op: OpSpec
    residual: tuple[int, ...] = ()


@dataclass(frozen=True)
class Genotype:
    layers: tuple[LayerChoice, ...]

    def __post_init__(self):
        for L, layer in enumerate(self.layers, start=1):
            if not 0 <= layer.input_index < L:
                raise ValueError(f"layer {L}: input_index {layer.input_index} outside 0..{L - 1}")
            if any(not 0 <= j < L for j in layer.residual) or len(set(layer.residual)) != len(layer.residual):
                raise ValueError(f"layer {L}: bad residual set {layer.residual}")

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def decisions(self) -> tuple[int, ...]:
        """Decision values in the order of ``SpaceSpec.decision_sizes``."""
        out = []
        for L, layer in enumerate(self.layers, start=1):
            out += [layer.op_index, layer.input_index]
            out += [1 if j in layer.residual else 0 for j in range(L)]
        return tuple(out)

    @classmethod
    def from_decisions(cls, space: SpaceSpec, values) -> "Genotype":
        values = list(values)
        layers, pos = [], 0
        for L in range(1, space.n_layers + 1):
            op_index, input_index = values[pos], values[pos + 1]
            res = tuple(j for j in range(L) if values[pos + 2 + j])
            pos += 2 + L
            layers.append(LayerChoice(int(input_index), int(op_index), space.ops[op_index], res))
        return cls(tuple(layers))

    def describe(self) -> str:
        """Text rendering: one line per layer, solid input edge and dotted residual edges."""
        lines = []
        for L, layer in enumerate(self.layers, start=1):
            src = "input" if layer.input_index == 0 else f"layer{layer.input_index}"
            res = ", ".join("input" if j == 0 else f"layer{j}" for j in layer.residual) or "-"
            lines.append(f"layer{L}: {layer.op.name:<10} <- {src:<7} residual: {res}")
        lines.append("output: attentive sum of " + ", ".join(f"layer{L}" for L in range(1, self.n_layers + 1)))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "layers": [
                {"input": l.input_index, "op_index": l.op_index, "op": l.op.to_dict(), "residual": list(l.residual)}
                for l in self.layers
            ]
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        return cls(
            tuple(
                LayerChoice(l["input"], l["op_index"], OpSpec.from_dict(l["op"]), tuple(l["residual"]))
                for l in d["layers"]
            )
        )


@dataclass
class ArchWeights:
    """Architecture logits for every decision plus the output-aggregation scores."""

    op_logits: list[torch.Tensor]
    input_logits: list[torch.Tensor]
    res_logits: list[torch.Tensor]  # layer L: [L, 2], column 1 = include
    agg_scores: torch.Tensor
    tau: float = 1.0

    @classmethod
    def zeros(cls, space: SpaceSpec, tau: float = 1.0, dtype=torch.float64) -> "ArchWeights":
        N = space.n_layers
        return cls(
            op_logits=[torch.zeros(len(space.ops), dtype=dtype, requires_grad=True) for _ in range(N)],
            input_logits=[torch.zeros(L, dtype=dtype, requires_grad=True) for L in range(1, N + 1)],
            res_logits=[torch.zeros(L, 2, dtype=dtype, requires_grad=True) for L in range(1, N + 1)],
            agg_scores=torch.zeros(N, dtype=dtype, requires_grad=True),
            tau=tau,
        )

    def parameters(self) -> list[torch.Tensor]:
        return [*self.op_logits, *self.input_logits, *self.res_logits, self.agg_scores]

    def logit_vectors(self) -> list[torch.Tensor]:
        """Per-decision logit vectors in lexicographic decision order."""
        out = []
        for L in range(len(self.op_logits)):
            out += [self.op_logits[L], self.input_logits[L]] + list(self.res_logits[L])
        return out

    def clone(self) -> "ArchWeights":
        def c(t):
            return t.detach().clone().requires_grad_(True)

        return ArchWeights(
            [c(t) for t in self.op_logits],
            [c(t) for t in self.input_logits],
            [c(t) for t in self.res_logits],
            c(self.agg_scores),
            self.tau,
        )


# ---------------------------------------------------------------------------
# candidate op modules; all take (x [B,T,C], mask [B,T] float) and return [B,T,C]


class ConvOp(nn.Module):
    def __init__(self, spec: OpSpec):
        super().__init__()
        pad = spec.dilation * (spec.kernel - 1) // 2
        self.conv = nn.Conv1d(spec.channels_in, spec.channels_out, spec.kernel, dilation=spec.dilation, padding=pad)

    def forward(self, x, mask):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)


class PoolOp(nn.Module):
    def __init__(self, spec: OpSpec):
        super().__init__()
        self.kind, self.k = spec.kind, spec.kernel

    def forward(self, x, mask):
        xt = x.transpose(1, 2)
        if self.kind == "avg_pool1d":
            y = F.avg_pool1d(xt, self.k, stride=1, padding=self.k // 2, count_include_pad=True)
        else:
            y = F.max_pool1d(xt, self.k, stride=1, padding=self.k // 2)
        return y.transpose(1, 2)


class RecurrentOp(nn.Module):
    def __init__(self, spec: OpSpec):
        super().__init__()
        self.lstm = nn.LSTM(spec.channels_in, spec.channels_out, batch_first=True)

    def forward(self, x, mask):
        return self.lstm(x)[0]


class SelfAttentionOp(nn.Module):
    """Multi-head scaled dot-product self-attention with padded keys masked out."""

    def __init__(self, spec: OpSpec):
        super().__init__()
        C = spec.channels_in
        self.heads = spec.heads
        self.q, self.k, self.v, self.o = (nn.Linear(C, C) for _ in range(4))

    def forward(self, x, mask):
        B, T, C = x.shape
        h, dh = self.heads, C // self.heads

        def split(t):
            return t.view(B, T, h, dh).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores.masked_fill(mask[:, None, None, :] == 0, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, T, C)
        return self.o(out)


def build_op(spec: OpSpec) -> nn.Module:
    if spec.kind in ("conv1d", "dilated_conv1d"):
        return ConvOp(spec)
    if spec.kind in ("avg_pool1d", "max_pool1d"):
        return PoolOp(spec)
    if spec.kind == "recurrent":
        return RecurrentOp(spec)
    return SelfAttentionOp(spec)

