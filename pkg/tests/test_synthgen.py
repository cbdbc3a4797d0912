import numpy as np
import pytest
from scipy.optimize import minimize

from longtail.synthgen import (
    QUERY,
    SUPPORT,
    TEST,
    ScenarioDataset,
    UniverseConfig,
    bag_of_events,
    generate_scenarios,
    split_support_query,
)

from conftest import pairwise_auc, tiny_universe


def _features(ds, part, vocab):
    b = ds.part(part)
    return np.concatenate([b.profiles, bag_of_events(b.sequences, vocab)], axis=1), b.labels


def _logistic_probe(X, y):
    """Plain L2-regularized logistic regression fitted with BFGS."""
    mu, sd = X.mean(0), X.std(0) + 1e-9
    Z = np.concatenate([(X - mu) / sd, np.ones((len(X), 1))], axis=1)

    def f(w):
        s = Z @ w
        loss = np.mean(np.logaddexp(0, s) - y * s) + 1e-3 * w[:-1] @ w[:-1]
        grad = Z.T @ (1 / (1 + np.exp(-s)) - y) / len(y)
        grad[:-1] += 2e-3 * w[:-1]
        return loss, grad

    w = minimize(f, np.zeros(Z.shape[1]), jac=True, method="L-BFGS-B").x
    return lambda X2: np.concatenate([(X2 - mu) / sd, np.ones((len(X2), 1))], axis=1) @ w


def _cross_auc(shared, seed, noise=0.0):
    cfg = UniverseConfig(n_scenarios=2, size_profile=(3000, 1500), shared_strength=shared, noise_rate=noise)
    a, b = generate_scenarios(cfg, seed)
    probe = _logistic_probe(*_features(a, "all", cfg.vocab_size))
    X, y = _features(b, "all", cfg.vocab_size)
    return pairwise_auc(probe(X), y)


def test_deterministic_bit_identical():
    cfg = tiny_universe()
    a, b = generate_scenarios(cfg, 3), generate_scenarios(cfg, 3)
    for x, y in zip(a, b):
        for f in ("profiles", "sequences", "seq_mask", "labels", "partition"):
            assert getattr(x, f).tobytes() == getattr(y, f).tobytes()
    c = generate_scenarios(cfg, 4)
    assert not np.array_equal(a[0].labels, c[0].labels) or not np.array_equal(a[0].profiles, c[0].profiles)


def test_dataset_invariants():
    cfg = tiny_universe(n_scenarios=4, size_profile=(300, 100, 40, 20))
    for ds, n in zip(generate_scenarios(cfg, 1), cfg.size_profile):
        assert len(ds) == n
        assert ds.profiles.shape == (n, cfg.profile_dim)
        assert ds.sequences.shape == (n, cfg.max_seq_len)
        np.testing.assert_array_equal(ds.seq_mask, (ds.sequences != 0).astype(ds.seq_mask.dtype))
        assert ds.seq_mask.sum(axis=1).min() >= 1
        counts = ds.counts()
        assert counts["support"] + counts["query"] == counts["train"]
        assert counts["train"] + counts["test"] == n
        for part in ("train", "test", "support", "query"):
            labels = ds.part(part).labels
            assert 0 < labels.sum() < len(labels), part
        assert 0.2 <= ds.labels.mean() <= 0.8


def test_rejects_tiny_scenarios_and_bad_config():
    with pytest.raises(ValueError, match=">= 20"):
        generate_scenarios(tiny_universe(size_profile=(200, 150, 19)), 0)
    with pytest.raises(ValueError, match="size_profile"):
        generate_scenarios(tiny_universe(size_profile=(200, 150)), 0)
    with pytest.raises(ValueError, match="shared_strength"):
        generate_scenarios(tiny_universe(shared_strength=1.5), 0)


def test_fully_shared_transfers():
    assert _cross_auc(1.0, 0) > 0.9


def test_unshared_does_not_transfer():
    aucs = [_cross_auc(0.0, s) for s in range(5)]
    assert abs(np.mean(aucs) - 0.5) <= 0.05


def test_coin_flip_labels_are_unlearnable():
    cfg = UniverseConfig(n_scenarios=1, size_profile=(4000,), noise_rate=0.5)
    (ds,) = generate_scenarios(cfg, 0)
    probe = _logistic_probe(*_features(ds, "train", cfg.vocab_size))
    X, y = _features(ds, "test", cfg.vocab_size)
    assert abs(pairwise_auc(probe(X), y) - 0.5) <= 0.05


def test_transfer_monotone_in_shared_strength():
    means = [np.mean([_cross_auc(s, seed) for seed in range(5)]) for s in (0.0, 0.5, 1.0)]
    assert means[0] <= means[1] <= means[2]


def _toy_dataset(labels):
    n = len(labels)
    seq = np.ones((n, 3), dtype=np.int64)
    part = np.full(n, SUPPORT, dtype=np.int8)
    return ScenarioDataset(7, np.zeros((n, 2)), seq, np.ones((n, 3)), np.asarray(labels, np.int8), part)


def test_split_counts_and_determinism():
    ds = _toy_dataset(np.arange(100) % 2)
    a = split_support_query(ds, 0.8, seed=5)
    assert a.counts()["support"] == 80 and a.counts()["query"] == 20
    b = split_support_query(ds, 0.8, seed=5)
    np.testing.assert_array_equal(a.partition, b.partition)
    assert np.all(ds.partition == SUPPORT)  # input untouched


def test_split_keeps_test_rows():
    ds = _toy_dataset(np.arange(50) % 2)
    ds.partition[:10] = TEST
    out = split_support_query(ds, 0.5, seed=0)
    assert np.all(out.partition[:10] == TEST)
    assert set(np.unique(out.partition[10:])) == {SUPPORT, QUERY}


def test_split_single_class_fails():
    with pytest.raises(ValueError, match="both classes"):
        split_support_query(_toy_dataset(np.ones(20)), 0.8, seed=0)


def test_split_fraction_bounds():
    with pytest.raises(ValueError):
        split_support_query(_toy_dataset(np.arange(20) % 2), 1.0, seed=0)
