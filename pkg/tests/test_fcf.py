import math

import numpy as np
import pytest
import torch

from scfcrc.fcf import (
    FcfConfig,
    FilterModel,
    class_prototypes,
    filter_features,
    gnn_forward,
    loss_gnn,
    loss_instance_contrastive,
    loss_prototype_contrastive,
    train_fcf,
)
from scfcrc.graph import MultiRelationGraph, SyntheticConfig, generate_synthetic, split_nodes
from scfcrc.label_prop import propagate_labels

from .conftest import grad_rel_error

LN2 = math.log(2.0)


def _graph(features, edges, labels=None):
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    return MultiRelationGraph.from_edges(features, labels, [np.asarray(edges, dtype=int).reshape(-1, 2)])


def _identity_model(d, layers=1):
    m = FilterModel(d, hidden_sizes=(), gnn_layers=layers).double()
    with torch.no_grad():
        m.mlp[0].weight.copy_(torch.eye(d))
        m.mlp[0].bias.zero_()
        for w in m.gnn:
            w.weight.copy_(torch.eye(d))
    return m


# ------------------------------------------------------------------ filter

def test_identity_filter(rng):
    x = rng.standard_normal((7, 4))
    assert np.array_equal(filter_features(_identity_model(4), x), x)


def test_filter_deterministic_and_zero_row(rng):
    m = FilterModel(5)
    with torch.no_grad():
        for layer in m.mlp:
            if isinstance(layer, torch.nn.Linear):
                layer.bias.zero_()
    x = rng.standard_normal((6, 5))
    x[2] = 0.0
    a, b = filter_features(m, x), filter_features(m, x)
    assert np.array_equal(a, b)
    assert np.all(a[2] == 0.0)
    assert a.shape == x.shape


def test_filter_shape_errors(rng):
    m = FilterModel(3)
    with pytest.raises(ValueError):
        filter_features(m, rng.standard_normal((4, 2)))
    with pytest.raises(ValueError):
        filter_features(m, np.array([[1.0, np.nan, 0.0]]))


# --------------------------------------------------------------------- gnn

def test_isolated_node_identity_layers():
    g = _graph([[1.0, 2.0], [3.0, 0.5], [0.0, 0.0]], [[0, 1]])
    m = _identity_model(2, layers=2)
    xf = torch.tensor([[1.0, 2.0], [3.0, 0.5], [0.5, 4.0]], dtype=torch.float64)
    z = gnn_forward(g, xf, m)
    assert torch.equal(z[2], xf[2])


def test_clique_symmetry():
    g = _graph([[0.3, -1.0], [0.3, -1.0]], [[0, 1]])
    m = FilterModel(2, gnn_layers=3).double()
    xf = torch.tensor([[0.3, -1.0], [0.3, -1.0]], dtype=torch.float64)
    h = xf
    for w in m.gnn:
        h = torch.relu(w(h + h.flip(0)))
        assert torch.equal(h[0], h[1])
    assert torch.equal(gnn_forward(g, xf, m), h)


def test_path_hand_evaluation():
    g = _graph(np.zeros((3, 2)), [[0, 1], [1, 2]])
    m = FilterModel(2, gnn_layers=1).double()
    with torch.no_grad():
        m.gnn[0].weight.copy_(torch.tensor([[0.5, -0.4], [0.1, 0.3]]))
    xf = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], dtype=torch.float64)
    # self + neighbour mean: (1,1), (1,1.5), (1,2); then W and relu
    expected = torch.tensor([[0.1, 0.4], [0.0, 0.55], [0.0, 0.7]], dtype=torch.float64)
    assert torch.allclose(gnn_forward(g, xf, m), expected, atol=1e-12)


def test_gnn_shape_mismatch():
    g = _graph(np.zeros((3, 2)), [[0, 1]])
    with pytest.raises(ValueError):
        gnn_forward(g, torch.zeros(4, 2), FilterModel(2))


# ------------------------------------------------------------------ losses

def test_loss_gnn_examples():
    probs = torch.tensor([[0.8, 0.2], [0.4, 0.6]], dtype=torch.float64)
    val = loss_gnn(torch.log(probs), np.array([0, 1])).item()
    assert val == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2, abs=1e-12)
    assert val == pytest.approx(0.3670, abs=5e-5)
    assert loss_gnn(torch.zeros(5, 2), np.array([0, 1, 1, 0, 1])).item() == pytest.approx(LN2, abs=1e-7)
    y = np.array([0, 1, 1])
    logits = torch.tensor([[20.0, 0.0], [0.0, 20.0], [0.0, 20.0]], dtype=torch.float64)
    assert loss_gnn(logits, y).item() <= 1e-6


def test_loss_gnn_node_set():
    logits = torch.tensor([[0.0, 0.0], [5.0, 0.0]], dtype=torch.float64)
    assert loss_gnn(logits, np.array([1, 0]), node_set=[0]).item() == pytest.approx(LN2)
    with pytest.raises(ValueError):
        loss_gnn(logits, np.array([1, 0]), node_set=[])


def test_ic_identical_pair():
    xf = torch.tensor([[1.0, 0.0], [1.0, 0.0]], dtype=torch.float64)
    assert loss_instance_contrastive(xf, [1, 1], tau=1.0).item() == pytest.approx(LN2, abs=1e-12)


def test_ic_no_positives():
    xf = torch.randn(2, 3, dtype=torch.float64)
    assert loss_instance_contrastive(xf, [0, 1], tau=0.5).item() == 0.0


def test_ic_invariances(rng):
    xf = torch.tensor(rng.standard_normal((8, 4)))
    y = rng.integers(0, 2, 8)
    base = loss_instance_contrastive(xf, y, 0.5).item()
    assert loss_instance_contrastive(3 * xf, y, 0.5).item() == pytest.approx(base, abs=1e-12)
    scales = torch.tensor(rng.uniform(0.1, 5.0, (8, 1)))
    assert loss_instance_contrastive(scales * xf, y, 0.5).item() == pytest.approx(base, abs=1e-12)
    perm = rng.permutation(8)
    assert loss_instance_contrastive(xf[perm], y[perm], 0.5).item() == pytest.approx(base, abs=1e-12)
    assert base >= 0


def test_ic_exclude_self_differs(rng):
    xf = torch.tensor(rng.standard_normal((6, 3)))
    y = np.array([0, 0, 0, 1, 1, 1])
    a = loss_instance_contrastive(xf, y, 0.5).item()
    b = loss_instance_contrastive(xf, y, 0.5, exclude_self=True).item()
    assert b < a


def test_ic_tau_error():
    with pytest.raises(ValueError):
        loss_instance_contrastive(torch.ones(2, 2), [0, 0], tau=0.0)


def test_prototypes_exact():
    u = torch.tensor([0.25, -1.5, 3.0], dtype=torch.float64)
    x = torch.stack([u, u, torch.zeros(3, dtype=torch.float64), u])
    protos = class_prototypes(x, [1, 1, 0, 1])
    assert torch.equal(protos[1], u)
    assert class_prototypes(x, [1, 1, 1, 1]) is None


def test_pc_orthogonal_prototypes():
    x = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    val = loss_prototype_contrastive(x.clone(), x, [0, 1], tau=1.0).item()
    assert val == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert val == pytest.approx(0.3133, abs=5e-5)


def test_pc_high_temperature(rng):
    xf = torch.tensor(rng.standard_normal((6, 3)))
    x = torch.tensor(rng.standard_normal((6, 3)))
    assert loss_prototype_contrastive(xf, x, [0, 1, 0, 1, 1, 0], tau=1e6).item() == pytest.approx(LN2, abs=1e-3)


def test_pc_missing_class_is_zero(rng):
    xf = torch.tensor(rng.standard_normal((4, 3)), requires_grad=True)
    loss = loss_prototype_contrastive(xf, xf.detach(), [1, 1, 1, 1], tau=0.5)
    assert loss.item() == 0.0
    loss.backward()


def test_pc_permutation_invariance(rng):
    xf = torch.tensor(rng.standard_normal((7, 3)))
    x = torch.tensor(rng.standard_normal((7, 3)))
    y = np.array([0, 1, 0, 1, 1, 0, 0])
    perm = rng.permutation(7)
    a = loss_prototype_contrastive(xf, x, y, 0.5).item()
    assert loss_prototype_contrastive(xf[perm], x[perm], y[perm], 0.5).item() == pytest.approx(a, abs=1e-12)
    assert a >= 0


def test_gradients_small_instances(rng):
    for _ in range(10):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 6))
        y = rng.integers(0, 2, b)
        y[0] = y[1]
        if b > 2:
            y[2] = 1 - y[0]
        logits = torch.tensor(rng.standard_normal((b, 2)))
        assert grad_rel_error(lambda t: loss_gnn(t, y), logits) < 1e-4
        xf = torch.tensor(rng.standard_normal((b, d)))
        assert grad_rel_error(lambda t: loss_instance_contrastive(t, y, 0.5), xf) < 1e-4
        x = torch.tensor(rng.standard_normal((b, d)))
        assert grad_rel_error(lambda t: loss_prototype_contrastive(t, x, y, 0.5), xf) < 1e-4


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def synth():
    g = generate_synthetic(SyntheticConfig(n_nodes=2000, camouflage_strength=0.8, seed=0))
    split = split_nodes(g, seed=0)
    return g, propagate_labels(g, split.train)


def test_zero_weights_reduce_to_gnn_loss(synth):
    g, pl = synth
    res = train_fcf(g, pl, FcfConfig(lambda1=0.0, lambda2=0.0, epochs=3))
    for rec in res.history:
        assert rec["l1"] == pytest.approx(rec["l_gnn"], abs=1e-12)
        assert rec["l_ic"] == 0.0 and rec["l_pc"] == 0.0


def test_training_reduces_loss(synth):
    g, pl = synth
    res = train_fcf(g, pl, FcfConfig(epochs=50, seed=0))
    assert res.history[-1]["l1"] < res.history[0]["l1"]
    assert res.filtered.shape == g.features.shape
    assert np.isfinite(res.filtered).all()


def test_training_deterministic(synth):
    g, pl = synth
    a = train_fcf(g, pl, FcfConfig(epochs=2, seed=5))
    b = train_fcf(g, pl, FcfConfig(epochs=2, seed=5))
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)
    assert np.array_equal(a.filtered, b.filtered)


def test_config_validation():
    with pytest.raises(ValueError):
        FcfConfig(tau=0)
    with pytest.raises(ValueError):
        FcfConfig(lambda1=-0.1)
