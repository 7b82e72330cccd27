import numpy as np
import pytest

from scfcrc.graph import MultiRelationGraph
from scfcrc.lga import (
    Group,
    SequenceCache,
    build_sequence,
    group_aggregate_hop,
    observed_labels,
    precompute_sequences,
    read_cache,
    sequence_length,
    token_meta,
    write_cache,
)

from .conftest import random_graph
from .oracles import brute_force_groups


def _random_instance(rng, n):
    g = random_graph(rng, n, num_relations=2, p=float(rng.uniform(0.1, 0.5)), d=3, labeled_frac=0.5)
    xf = rng.standard_normal((n, 3))
    hard = rng.integers(0, 2, n)
    return g, g.features, xf, g.labels.copy(), hard


@pytest.mark.parametrize("r", [1, 2, 3, 4])
@pytest.mark.parametrize("k", [1, 2, 3])
def test_sequence_length_formula(r, k):
    assert sequence_length(r, k) == r * ((2 * 2 + 1) * k + 2)
    assert token_meta(r, k).shape == (sequence_length(r, k), 3)


def test_sequence_length_examples():
    assert sequence_length(3, 2) == 36
    assert sequence_length(1, 1) == 7


def test_token_order_single_relation():
    groups = token_meta(1, 1)[:, 2].tolist()
    assert groups == [Group.TGT_RAW, Group.TGT_FILT, Group.NEG, Group.POS, Group.PSEUDO_NEG,
                      Group.PSEUDO_POS, Group.MASKED]
    meta = token_meta(3, 2)
    assert np.all(meta[meta[:, 2] <= Group.TGT_FILT, 1] == 0)
    assert np.all(meta[meta[:, 2] > Group.TGT_FILT, 1] >= 1)
    assert meta[:, 0].tolist() == sorted(meta[:, 0].tolist())


def test_two_pseudo_positive_neighbours():
    x = np.array([[9.0, 9.0], [1.0, 2.0], [3.0, 6.0]])
    xf = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    g = MultiRelationGraph.from_edges(x, np.array([-1, -1, -1]), [np.array([[0, 1], [0, 2]])])
    out = group_aggregate_hop(g, 0, 0, 1, x, xf, g.labels, np.array([0, 1, 1]))
    assert np.allclose(out[3], [0.5, 0.5])
    assert np.all(out[0] == 0) and np.all(out[1] == 0) and np.all(out[2] == 0)
    assert np.allclose(out[4], [2.0, 4.0])


def test_isolated_node_all_zero(rng):
    g = MultiRelationGraph.from_edges(rng.standard_normal((4, 2)), np.array([0, 1, 0, -1]),
                                      [np.array([[0, 1], [1, 2]])])
    for k in (1, 2, 3):
        assert np.all(group_aggregate_hop(g, 3, 0, k, g.features, g.features, g.labels, np.zeros(4, int)) == 0)


def test_matches_brute_force_on_random_graphs():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        n = int(rng.integers(2, 13))
        g, x, xf, labels, hard = _random_instance(rng, n)
        for v in range(n):
            for r in range(g.num_relations):
                k = int(rng.integers(1, 4)) if n <= 8 else int(rng.integers(1, 3))
                got = group_aggregate_hop(g, v, r, k, x, xf, labels, hard)
                assert np.allclose(got, brute_force_groups(g, v, r, k, x, xf, labels, hard), atol=1e-12)


def test_cache_matches_single_node_path(rng):
    for shells in (False, True):
        g, x, xf, labels, hard = _random_instance(rng, 12)
        cache = precompute_sequences(g, x, xf, labels, hard, hops=3, shells=shells)
        for v in range(12):
            fresh = build_sequence(g, v, x, xf, labels, hard, hops=3, shells=shells)
            assert np.allclose(cache[v].tokens, fresh.tokens, atol=1e-6)
            assert np.array_equal(cache[v].meta, fresh.meta)


def test_shells_exact_distance():
    # path 0-1-2: walks of length 2 from 0 revisit 0 (excluded) and reach 2
    x = np.eye(3)
    g = MultiRelationGraph.from_edges(x, np.array([-1, -1, -1]), [np.array([[0, 1], [1, 2]])])
    hard = np.zeros(3, dtype=int)
    walk = group_aggregate_hop(g, 1, 0, 2, x, x, g.labels, hard)
    shell = group_aggregate_hop(g, 1, 0, 2, x, x, g.labels, hard, shells=True)
    assert np.all(walk == 0) and np.all(shell == 0)
    assert np.allclose(group_aggregate_hop(g, 0, 0, 2, x, x, g.labels, hard, shells=True)[4], x[2])


def test_worker_count_invariance(rng):
    g, x, xf, labels, hard = _random_instance(rng, 40)
    a = precompute_sequences(g, x, xf, labels, hard, hops=2, workers=1)
    b = precompute_sequences(g, x, xf, labels, hard, hops=2, workers=4)
    assert np.array_equal(a.tokens, b.tokens)


def test_node_subset_order_free(rng):
    g, x, xf, labels, hard = _random_instance(rng, 20)
    full = precompute_sequences(g, x, xf, labels, hard, hops=2)
    ids = np.array([7, 3, 15])
    sub = precompute_sequences(g, x, xf, labels, hard, hops=2, node_set=ids)
    for v in ids:
        assert np.array_equal(sub[v].tokens, full[v].tokens)


def test_permutation_equivariance(rng):
    g, x, xf, labels, hard = _random_instance(rng, 15)
    perm = rng.permutation(15)
    gp = g.permute(perm)
    a = precompute_sequences(g, x, xf, labels, hard, hops=2)
    b = precompute_sequences(gp, x[perm], xf[perm], labels[perm], hard[perm], hops=2)
    assert np.allclose(a.tokens[perm], b.tokens, atol=1e-6)


def test_hygiene_changes_only_label_groups(rng):
    g, x, xf, _, hard = _random_instance(rng, 30)
    full_labels = g.labels
    train = np.flatnonzero(full_labels >= 0)[::2]
    masked = observed_labels(g, train)
    assert np.all(masked[train] == full_labels[train])
    a = precompute_sequences(g, x, xf, masked, hard, hops=2)
    b = precompute_sequences(g, x, xf, full_labels, hard, hops=2)
    meta = token_meta(g.num_relations, 2)
    fixed = ~np.isin(meta[:, 2], [Group.NEG, Group.POS, Group.MASKED])
    assert np.array_equal(a.tokens[:, fixed], b.tokens[:, fixed])
    assert not np.array_equal(a.tokens, b.tokens)


def test_cache_round_trip(tmp_path, rng):
    g, x, xf, labels, hard = _random_instance(rng, 10)
    for ids in (None, np.array([4, 1, 9])):
        cache = precompute_sequences(g, x, xf, labels, hard, hops=2, node_set=ids)
        back = read_cache(write_cache(cache, tmp_path / "seq.bin"))
        assert np.array_equal(back.tokens, cache.tokens)
        assert np.array_equal(back.meta, cache.meta)
        assert np.array_equal(back.node_ids, cache.node_ids)
        raw = (tmp_path / "seq.bin").read_bytes()
        assert raw[:8] == b"SCFCRCSQ"


def test_cache_errors(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"NOTACACHE" + bytes(40))
    with pytest.raises(ValueError):
        read_cache(tmp_path / "bad.bin")
    with pytest.raises(OSError, match="missing.bin"):
        read_cache(tmp_path / "missing.bin")
    cache = SequenceCache(np.arange(1), np.zeros((1, 7, 2), np.float32), np.zeros((1, 7, 3), np.uint8))
    with pytest.raises(OSError, match="nodir"):
        write_cache(cache, tmp_path / "nodir" / "x.bin")


def test_synthetic_cache_shape():
    from scfcrc.graph import SyntheticConfig, generate_synthetic

    g = generate_synthetic(SyntheticConfig(n_nodes=2000, seed=0))
    labels = observed_labels(g, np.arange(0, 2000, 3))
    cache = precompute_sequences(g, g.features, g.features, labels, np.zeros(2000, int), hops=2)
    assert cache.tokens.shape == (2000, 36, g.feature_dim)
    assert np.isfinite(cache.tokens).all()


def test_hop_bounds(rng):
    g, x, xf, labels, hard = _random_instance(rng, 5)
    with pytest.raises(ValueError):
        group_aggregate_hop(g, 0, 0, 0, x, xf, labels, hard)
    with pytest.raises(ValueError):
        precompute_sequences(g, x, xf, labels, hard, hops=5)
