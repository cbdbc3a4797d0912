"""Closed-form FLOPs accounting.

Conventions (used everywhere in the package):

* one multiply-accumulate = 2 FLOPs; every other scalar add, multiply,
  divide, compare, ``exp``/``sigmoid``/``tanh`` = 1 FLOP;
* softmax over ``n`` entries = ``3 n`` (exp, running sum, divide);
* pooling = ``k`` per output element, padding positions included;
* embedding lookups, masking and reshapes are free;
* convolution and pooling ops in the search space carry no activation.

Per-op formulas for sequence length ``T``, channels ``C_in``/``C_out``
(``C`` when equal), ``h`` heads:

=================  ==========================================================
conv1d / dilated   ``2 k C_in C_out T + C_out T``
avg/max pool       ``k C T``
recurrent (LSTM)   ``T (8 H (C_in + H) + 17 H)`` with ``H = C_out``
self_attention     ``8 T C^2 + 4 T C + 4 T^2 C + 4 h T^2``
=================  ==========================================================

A genotype adds ``T C`` per residual edge and ``3 N + (2 N - 1) T C`` for the
attentive sum over its ``N`` layer outputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .space import ArchWeights, Genotype, LayerChoice, OpSpec, SpaceSpec

LAYERNORM_PER_ELEMENT = 7
LAYERNORM_PER_ROW = 4


def op_flops(op: OpSpec, seq_len: int) -> int:
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    T, cin, cout, k = seq_len, op.channels_in, op.channels_out, op.kernel
    if op.kind in ("conv1d", "dilated_conv1d"):
        return 2 * k * cin * cout * T + cout * T
    if op.kind in ("avg_pool1d", "max_pool1d"):
        return k * cin * T
    if op.kind == "recurrent":
        H = cout
        return T * (8 * H * (cin + H) + 17 * H)
    C, h = cin, op.heads
    return 8 * T * C * C + 4 * T * C + 4 * T * T * C + 4 * h * T * T


def dense_flops(d_in: int, d_out: int, rows: int = 1) -> int:
    return rows * (2 * d_in * d_out + d_out)


def residual_flops(channels: int, seq_len: int) -> int:
    return channels * seq_len


def aggregation_flops(n_layers: int, channels: int, seq_len: int) -> int:
    return 3 * n_layers + (2 * n_layers - 1) * channels * seq_len


@dataclass(frozen=True)
class FlopsReport:
    layer_ops: tuple[int, ...]
    residual: int
    aggregation: int
    total: int
    reference: int
    normalized: float

    def to_dict(self) -> dict:
        return {
            "layer_ops": list(self.layer_ops),
            "residual": self.residual,
            "aggregation": self.aggregation,
            "total": self.total,
            "reference": self.reference,
            "normalized": self.normalized,
        }


def _genotype_total(layers, channels: int, seq_len: int) -> tuple[tuple[int, ...], int, int]:
    ops = tuple(op_flops(l.op, seq_len) for l in layers)
    res = sum(len(l.residual) for l in layers) * residual_flops(channels, seq_len)
    agg = aggregation_flops(len(layers), channels, seq_len)
    return ops, res, agg


def space_max_genotype(space: SpaceSpec, seq_len: int) -> Genotype:
    best = max(range(len(space.ops)), key=lambda i: (op_flops(space.ops[i], seq_len), -i))
    return Genotype(
        tuple(LayerChoice(0, best, space.ops[best], tuple(range(L))) for L in range(1, space.n_layers + 1))
    )


def space_min_flops(space: SpaceSpec, seq_len: int) -> int:
    cheapest = min(op_flops(op, seq_len) for op in space.ops)
    return space.n_layers * cheapest + aggregation_flops(space.n_layers, space.channels, seq_len)


def space_max_flops(space: SpaceSpec, seq_len: int) -> int:
    ops, res, agg = _genotype_total(space_max_genotype(space, seq_len).layers, space.channels, seq_len)
    return sum(ops) + res + agg


def genotype_flops(g: Genotype, seq_len: int, space: SpaceSpec | None = None) -> FlopsReport:
    """Total FLOPs of a genotype, normalized by the space's maximum-FLOPs genotype.

    Without ``space`` the reference is the all-max genotype of a space made of
    the genotype's own ops, which is only meaningful for reporting.
    """
    channels = g.layers[0].op.channels_in
    ops, res, agg = _genotype_total(g.layers, channels, seq_len)
    total = sum(ops) + res + agg
    if space is None:
        space = SpaceSpec(g.n_layers, channels, tuple(dict.fromkeys(l.op for l in g.layers)))
    reference = space_max_flops(space, seq_len)
    return FlopsReport(ops, res, agg, total, reference, total / reference)


def expected_flops(aw: ArchWeights, space: SpaceSpec, seq_len: int) -> torch.Tensor:
    """Probability-weighted FLOPs under softmax(logits); differentiable in the logits."""
    dtype = aw.op_logits[0].dtype
    per_op = torch.tensor([float(op_flops(op, seq_len)) for op in space.ops], dtype=dtype)
    edge = float(residual_flops(space.channels, seq_len))
    total = torch.tensor(float(aggregation_flops(space.n_layers, space.channels, seq_len)), dtype=dtype)
    for L in range(space.n_layers):
        total = total + torch.softmax(aw.op_logits[L], dim=0) @ per_op
        total = total + edge * torch.softmax(aw.res_logits[L], dim=1)[:, 1].sum()
    return total


# ---------------------------------------------------------------------------
# whole-model accounting for the hand-designed encoders


def lstm_stack_flops(d_in: int, hidden: int, n_layers: int, seq_len: int) -> int:
    total = 0
    for i in range(n_layers):
        total += op_flops(OpSpec("recurrent", 1, 1, d_in if i == 0 else hidden, hidden), seq_len)
    return total


def layernorm_flops(channels: int, seq_len: int) -> int:
    return LAYERNORM_PER_ELEMENT * channels * seq_len + LAYERNORM_PER_ROW * seq_len


def transformer_block_flops(channels: int, intermediate: int, heads: int, seq_len: int) -> int:
    T, C, Fd = seq_len, channels, intermediate
    attn = op_flops(OpSpec("self_attention", 1, 1, C, C, heads), T)
    ffn = dense_flops(C, Fd, T) + Fd * T + dense_flops(Fd, C, T)
    return attn + ffn + 2 * C * T + 2 * layernorm_flops(C, T)


def mlp_flops(d_in: int, dims, rows: int = 1) -> int:
    """Dense layers with a ReLU after each."""
    total, prev = 0, d_in
    for d in dims:
        total += dense_flops(prev, d, rows) + d * rows
        prev = d
    return total


def masked_mean_flops(channels: int, seq_len: int) -> int:
    return 2 * channels * seq_len + channels


def arch_flops(arch) -> dict:
    """Per-sample FLOPs breakdown of a model built from ``nets.ArchConfig``."""
    T, E, H = arch.seq_len, arch.embed, arch.hidden_dim
    profile = mlp_flops(arch.profile_dim, arch.profile_mlp_dims)
    if arch.encoder_kind == "recurrent":
        encoder = lstm_stack_flops(E, H, arch.n_encoder_layers, T)
        seq_out = H
    elif arch.encoder_kind == "attention":
        encoder = E * T + arch.n_encoder_layers * transformer_block_flops(E, arch.intermediate_dim, arch.n_heads, T)
        seq_out = E
    else:
        encoder = genotype_flops(arch.genotype, T).total
        seq_out = E
    pooling = masked_mean_flops(seq_out, T)
    head_in = (arch.profile_mlp_dims[-1] if arch.profile_mlp_dims else arch.profile_dim) + seq_out
    head = mlp_flops(head_in, arch.head_mlp_dims)
    last = arch.head_mlp_dims[-1] if arch.head_mlp_dims else head_in
    head += dense_flops(last, 1) + 1
    return {
        "profile": profile,
        "encoder": encoder,
        "pooling": pooling,
        "head": head,
        "total": profile + encoder + pooling + head,
    }
