"""Synthetic families of related scenarios.

Each universe plants one shared labeling function and one private function
per scenario.  A sample's click/default probability is

    p(y=1 | x) = sigmoid(scale * (s * f_shared(x) + (1 - s) * f_scenario(x)))

where ``s`` is ``shared_strength`` and ``x`` is the profile vector joined with
a bag-of-events summary of the behavior sequence.  Labels are then flipped
with probability ``noise_rate``.  Sequences are Markov chains whose
transition matrix is tilted per scenario, so scenarios also differ in their
input distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

TEST, SUPPORT, QUERY = 0, 1, 2
PART_NAMES = {"test": (TEST,), "train": (SUPPORT, QUERY), "support": (SUPPORT,), "query": (QUERY,)}

MIN_SCENARIO_SIZE = 20
_MAX_SPLIT_RETRIES = 10


@dataclass(frozen=True)
class UniverseConfig:
    profile_dim: int = 16
    vocab_size: int = 50
    max_seq_len: int = 32
    n_scenarios: int = 6
    shared_strength: float = 0.9
    noise_rate: float = 0.0
    size_profile: tuple[int, ...] = (2000, 1400, 1000, 800, 600, 500)
    min_seq_len: int = 4
    hidden_units: int = 32
    map_gain: float = 1.5
    label_scale: float = 5.0
    transition_tilt: float = 0.7
    profile_shift: float = 0.3
    test_frac: float = 0.2
    support_frac: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "size_profile", tuple(int(n) for n in self.size_profile))

    def validate(self) -> None:
        for name in ("profile_dim", "vocab_size", "max_seq_len", "n_scenarios", "min_seq_len", "hidden_units"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (id 0 is padding)")
        if self.min_seq_len > self.max_seq_len:
            raise ValueError("min_seq_len exceeds max_seq_len")
        if not 0.0 <= self.shared_strength <= 1.0:
            raise ValueError(f"shared_strength must lie in [0, 1], got {self.shared_strength}")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError(f"noise_rate must lie in [0, 1), got {self.noise_rate}")
        if len(self.size_profile) != self.n_scenarios:
            raise ValueError(
                f"size_profile has {len(self.size_profile)} entries but n_scenarios={self.n_scenarios}"
            )
        small = [n for n in self.size_profile if n < MIN_SCENARIO_SIZE]
        if small:
            raise ValueError(f"size_profile entries must be >= {MIN_SCENARIO_SIZE}, got {small}")
        if not 0.0 < self.test_frac < 1.0 or not 0.0 < self.support_frac < 1.0:
            raise ValueError("test_frac and support_frac must lie in (0, 1)")


class Batch(NamedTuple):
    profiles: np.ndarray
    sequences: np.ndarray
    mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def replace(self, **kw) -> "Batch":
        # namedtuple._replace checks len(result), which __len__ above redefines as the row count
        return Batch(*(kw.pop(f, a) for f, a in zip(self._fields, self)))

    def take(self, idx) -> "Batch":
        return Batch(*(a[idx] for a in self))

    @staticmethod
    def concat(batches: Sequence["Batch"]) -> "Batch":
        if not batches:
            raise ValueError("nothing to concatenate")
        return Batch(*(np.concatenate(cols, axis=0) for cols in zip(*batches)))


@dataclass
class ScenarioDataset:
    scenario_id: int
    profiles: np.ndarray
    sequences: np.ndarray
    seq_mask: np.ndarray
    labels: np.ndarray
    partition: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def rows(self, part: str = "all") -> np.ndarray:
        if part == "all":
            return np.arange(len(self))
        return np.flatnonzero(np.isin(self.partition, PART_NAMES[part]))

    def part(self, name: str = "all") -> Batch:
        return self.as_batch().take(self.rows(name))

    def as_batch(self) -> Batch:
        return Batch(self.profiles, self.sequences, self.seq_mask, self.labels)

    def counts(self) -> dict:
        return {name: int(self.rows(name).size) for name in ("train", "test", "support", "query")}


def bag_of_events(sequences: np.ndarray, vocab_size: int) -> np.ndarray:
    """Per-row event frequencies over ids 1..vocab_size-1 (padding excluded)."""
    n = sequences.shape[0]
    counts = np.zeros((n, vocab_size), dtype=np.float64)
    rows = np.repeat(np.arange(n), sequences.shape[1])
    np.add.at(counts, (rows, sequences.ravel()), 1.0)
    counts = counts[:, 1:]
    lengths = np.maximum(counts.sum(axis=1, keepdims=True), 1.0)
    return counts / lengths


class _RandomMap:
    """Two-layer tanh map over standardized inputs, rescaled to unit variance."""

    def __init__(self, rng: np.random.Generator, in_dim: int, hidden: int, gain: float = 1.0):
        self.w1 = gain * rng.normal(size=(in_dim, hidden)) / np.sqrt(in_dim)
        self.b1 = rng.normal(scale=0.5, size=hidden)
        self.w2 = rng.normal(size=hidden) / np.sqrt(hidden)
        self.center = 0.0
        self.scale = 1.0

    def raw(self, z: np.ndarray) -> np.ndarray:
        return np.tanh(z @ self.w1 + self.b1) @ self.w2

    def calibrate(self, z_ref: np.ndarray) -> "_RandomMap":
        out = self.raw(z_ref)
        self.center = float(np.mean(out))
        self.scale = float(np.std(out)) or 1.0
        return self

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return (self.raw(z) - self.center) / self.scale


def _markov_sequences(rng, n, cfg: UniverseConfig, trans: np.ndarray, start: np.ndarray):
    """Right-padded Markov chains over ids 1..V-1; returns (sequences, mask)."""
    T = cfg.max_seq_len
    lengths = rng.integers(cfg.min_seq_len, T + 1, size=n)
    seq = np.zeros((n, T), dtype=np.int64)
    cum_start = np.cumsum(start)
    cum_trans = np.cumsum(trans, axis=1)
    state = np.minimum(np.searchsorted(cum_start, rng.random(n) * cum_start[-1]), len(start) - 1)
    u = rng.random((n, T))
    for t in range(T):
        seq[:, t] = state + 1
        row_cum = cum_trans[state]
        state = np.minimum((u[:, t, None] * row_cum[:, -1:] > row_cum).sum(axis=1), len(start) - 1)
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.int8)
    seq *= mask
    return seq, mask


def _stratified_test_rows(rng, labels, test_frac):
    test = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if idx.size < 2:
            raise ValueError(f"class {cls} has {idx.size} samples; need >= 2 for a train/test split")
        k = min(max(1, int(np.floor(test_frac * idx.size + 0.5))), idx.size - 1)
        test.append(rng.choice(idx, size=k, replace=False))
    return np.sort(np.concatenate(test))


def _features(profiles, sequences, vocab_size, bag_mu, bag_sd):
    bag = bag_of_events(sequences, vocab_size)
    return np.concatenate([profiles, (bag - bag_mu) / bag_sd], axis=1)


def generate_scenarios(cfg: UniverseConfig, seed: int) -> list[ScenarioDataset]:
    """Draw ``cfg.n_scenarios`` related scenarios; bit-identical for a fixed (cfg, seed)."""
    cfg.validate()
    root = np.random.SeedSequence(seed)
    universe_seq, *scenario_seqs = root.spawn(cfg.n_scenarios + 1)
    urng = np.random.default_rng(universe_seq)

    n_states = cfg.vocab_size - 1
    base_trans = urng.dirichlet(np.full(n_states, 0.3), size=n_states) + 1e-6
    base_start = urng.dirichlet(np.ones(n_states))
    in_dim = cfg.profile_dim + n_states

    # reference sample from the untilted base distribution fixes the shared scaling
    n_ref = 2000
    ref_prof = urng.normal(size=(n_ref, cfg.profile_dim))
    ref_seq, _ = _markov_sequences(urng, n_ref, cfg, base_trans / base_trans.sum(1, keepdims=True), base_start)
    ref_bag = bag_of_events(ref_seq, cfg.vocab_size)
    bag_mu, bag_sd = ref_bag.mean(axis=0), ref_bag.std(axis=0) + 1e-3
    z_ref = np.concatenate([ref_prof, (ref_bag - bag_mu) / bag_sd], axis=1)
    f_shared = _RandomMap(urng, in_dim, cfg.hidden_units, cfg.map_gain).calibrate(z_ref)

    out = []
    for sid, (n, sseq) in enumerate(zip(cfg.size_profile, scenario_seqs)):
        rng = np.random.default_rng(sseq)
        tilt = cfg.transition_tilt
        trans = base_trans * np.exp(tilt * rng.normal(size=base_trans.shape))
        trans /= trans.sum(axis=1, keepdims=True)
        start = base_start * np.exp(tilt * rng.normal(size=n_states))
        start /= start.sum()
        mu = cfg.profile_shift * rng.normal(size=cfg.profile_dim)

        f_private = _RandomMap(rng, in_dim, cfg.hidden_units, cfg.map_gain).calibrate(z_ref)

        profiles = mu + rng.normal(size=(n, cfg.profile_dim))
        sequences, mask = _markov_sequences(rng, n, cfg, trans, start)
        z = _features(profiles, sequences, cfg.vocab_size, bag_mu, bag_sd)
        s = cfg.shared_strength
        logit = cfg.label_scale * (s * f_shared(z) + (1.0 - s) * f_private(z))
        p = 1.0 / (1.0 + np.exp(-logit))
        labels = (rng.random(n) < p).astype(np.int8)
        flip = rng.random(n) < cfg.noise_rate
        labels = np.where(flip, 1 - labels, labels).astype(np.int8)

        partition = np.full(n, SUPPORT, dtype=np.int8)
        partition[_stratified_test_rows(rng, labels, cfg.test_frac)] = TEST
        ds = ScenarioDataset(
            scenario_id=sid,
            profiles=profiles,
            sequences=sequences,
            seq_mask=mask,
            labels=labels,
            partition=partition,
            seed=seed,
            meta={"label_mean": float(labels.mean())},
        )
        out.append(split_support_query(ds, cfg.support_frac, seed=int(rng.integers(2**31))))
    return out


def split_support_query(ds: ScenarioDataset, support_frac: float, seed: int) -> ScenarioDataset:
    """Re-tag the train rows of ``ds`` into support and query parts.

    Returns a new dataset; ``ds`` is left untouched.  Retries with a fresh
    internal seed when one part would miss a class, and gives up after ten
    attempts.
    """
    if not 0.0 < support_frac < 1.0:
        raise ValueError(f"support_frac must lie in (0, 1), got {support_frac}")
    train = ds.rows("train")
    n_support = int(np.floor(support_frac * train.size + 0.5))
    if n_support == 0 or n_support == train.size:
        raise ValueError(f"support_frac={support_frac} leaves an empty part of {train.size} train rows")
    labels = ds.labels[train]
    ss = np.random.SeedSequence(seed)
    for attempt_seq in ss.spawn(_MAX_SPLIT_RETRIES):
        perm = np.random.default_rng(attempt_seq).permutation(train.size)
        sup, qry = labels[perm[:n_support]], labels[perm[n_support:]]
        if 0 < sup.sum() < sup.size and 0 < qry.sum() < qry.size:
            partition = ds.partition.copy()
            partition[train[perm[:n_support]]] = SUPPORT
            partition[train[perm[n_support:]]] = QUERY
            return replace(ds, partition=partition)
    raise ValueError(
        f"scenario {ds.scenario_id}: no support/query split with both classes in each part "
        f"after {_MAX_SPLIT_RETRIES} attempts"
    )
