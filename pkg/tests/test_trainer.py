import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cidbench.data import EmbeddingDataset
from cidbench.errors import ConfigError, PreconditionError, ShapeError
from cidbench.forge import ClusterWorldConfig, gen_cluster_world
from cidbench.objectives import AdversaryState, IrmConfig
from cidbench.trainer import (
    ModelParams, TrainConfig, ce_loss_and_grad, forward, full_objective, init_model, load_model,
    predict, save_model, train,
)
from cidbench.weighting import CidConfig


def toy_dataset(n=40, d=3, c=2, seed=0, balanced=False):
    rng = np.random.default_rng(seed)
    y = np.tile(np.arange(c), n // c) if balanced else rng.integers(0, c, n)
    x = rng.normal(size=(n, d)) + y[:, None] * 0.8
    z = rng.normal(size=(n, 2))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return EmbeddingDataset([f"r{i:03d}" for i in range(n)], x, z, y, ["train"] * (n - 6) + ["val"] * 6, c,
                            normalized=True)


def random_model(arch, d, c, h=5, seed=0):
    rng = np.random.default_rng(seed)
    m = init_model(arch, d, c, h, seed)
    return m.with_vector(rng.normal(size=m.to_vector().size))


# --- forward / predict / loss ----------------------------------------------------------

def test_forward_examples():
    m = init_model("linear", 2, 2, 1, 0)
    assert np.array_equal(forward(m, np.ones((3, 2))), np.zeros((3, 2)))
    m = ModelParams("linear", np.array([[1.0, 0.0], [0.0, 0.0]]), np.zeros(2))
    assert forward(m, [[3.0, -1.0]]).tolist() == [[3.0, 0.0]]
    assert predict(m, [[3.0, -1.0]])[0].tolist() == [0]
    assert predict(init_model("linear", 2, 2, 1, 0), [[1.0, 1.0]])[0].tolist() == [0]


@pytest.mark.parametrize("arch", ["linear", "mlp1"])
def test_batch_equals_rowwise(arch):
    m = random_model(arch, 4, 3)
    X = np.random.default_rng(1).normal(size=(7, 4))
    batch = forward(m, X)
    rows = np.vstack([forward(m, X[i:i + 1]) for i in range(7)])
    assert np.allclose(batch, rows, rtol=0, atol=1e-14)
    pred, scores = predict(m, X)
    assert pred.tolist() == [int(np.argmax(r)) for r in scores]


def test_mlp_forward_by_hand():
    m = random_model("mlp1", 3, 2, h=4, seed=3)
    x = np.array([[0.2, -1.0, 0.5]])
    h = np.maximum(x @ m.W1.T + m.b1, 0)
    assert np.allclose(forward(m, x), h @ m.W.T + m.b, atol=1e-15)


def test_shape_error():
    with pytest.raises(ShapeError):
        forward(init_model("linear", 3, 2, 1, 0), np.zeros((2, 4)))


def test_ce_examples():
    losses, g = ce_loss_and_grad(np.zeros((2, 2)), [0, 1])
    assert np.allclose(losses, np.log(2), atol=1e-15)
    assert np.allclose(g, [[-0.5, 0.5], [0.5, -0.5]], atol=1e-15)
    losses, _ = ce_loss_and_grad(np.array([[20.0, 0.0]]), [0])
    assert losses[0] < 1e-8


@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 10 ** 6))
@settings(max_examples=40, deadline=None)
def test_ce_gradient_fd(n, c, seed):
    rng = np.random.default_rng(seed)
    L = rng.normal(scale=2, size=(n, c))
    y = rng.integers(0, c, n)
    _, g = ce_loss_and_grad(L, y)
    h = 1e-6
    for i in range(n):
        for j in range(c):
            E = np.zeros_like(L)
            E[i, j] = h
            num = (ce_loss_and_grad(L + E, y)[0][i] - ce_loss_and_grad(L - E, y)[0][i]) / (2 * h)
            assert abs(num - g[i, j]) <= 1e-5 * max(1, abs(num))


def test_binary_ce_matches_logit_difference():
    rng = np.random.default_rng(2)
    L = rng.normal(size=(5, 2))
    y = rng.integers(0, 2, 5)
    f = L[:, 1] - L[:, 0]
    bce = np.logaddexp(0, f) - y * f
    assert np.allclose(ce_loss_and_grad(L, y)[0], bce, atol=1e-14)


# --- gradients of the full objective ------------------------------------------------------

@pytest.mark.parametrize("method", ["ce", "ifw", "cid", "dro", "irm", "arl"])
@pytest.mark.parametrize("arch", ["linear", "mlp1"])
def test_full_objective_gradient_fd(method, arch):
    ds = toy_dataset(n=12, d=3)
    cfg = TrainConfig(method=method, weight_decay=0.01, architecture=arch, hidden_dim=4,
                      cid=CidConfig(0.3), irm=IrmConfig(0.7))
    X, y, Z = ds.features, ds.labels, ds.proxies
    rng = np.random.default_rng(4)
    model = random_model(arch, 3, 2, h=4, seed=5)
    rep_dim = 3 if arch == "linear" else 4
    adv = AdversaryState(rng.normal(size=rep_dim + 1), 0.01) if method == "arl" else None
    theta = model.to_vector() + 0.1 * rng.normal(size=model.to_vector().size)
    model = model.with_vector(theta)
    _, grad, res = full_objective(model, X, y, Z, cfg, adversary=adv)
    frozen = res.weights  # weights are constants of the step
    h = 1e-6
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        up = full_objective(model.with_vector(theta + e), X, y, Z, cfg, weights=frozen)[0]
        dn = full_objective(model.with_vector(theta - e), X, y, Z, cfg, weights=frozen)[0]
        num = (up - dn) / (2 * h)
        assert abs(num - grad[k]) <= 1e-4 * max(1.0, abs(num), abs(grad[k]))


# --- training contract ------------------------------------------------------------------

def test_lr_zero_keeps_init():
    ds = toy_dataset()
    for arch in ("linear", "mlp1"):
        cfg = TrainConfig(lr=0.0, epochs=3, architecture=arch, hidden_dim=4, seed=9)
        model, hist = train(ds, cfg)
        init = init_model(arch, 3, 2, 4, 9)
        assert all(np.array_equal(a, b) for a, b in zip(model.arrays(), init.arrays()))
        assert len(hist.epochs) == 3


def test_ce_equals_cid_huge_tau_on_balanced_batches():
    ds = toy_dataset(n=46, balanced=True)  # 40 train rows, 20 per class
    base = dict(epochs=15, batch_size=40, lr=0.1, momentum=0.9, weight_decay=5e-4, seed=3)
    ce, _ = train(ds, TrainConfig(method="ce", **base))
    cid, _ = train(ds, TrainConfig(method="cid", cid=CidConfig(1e9), **base))
    assert np.max(np.abs(ce.to_vector() - cid.to_vector())) <= 1e-8


def test_deterministic_serialization(tmp_path):
    ds = toy_dataset()
    for method in ("cid", "arl", "dro"):
        cfg = TrainConfig(method=method, epochs=4, batch_size=8, lr=0.05, seed=2)
        a = save_model(train(ds, cfg)[0], cfg, None)
        b = save_model(train(ds, cfg)[0], cfg, None)
        assert a == b


def test_file_order_invariance():
    ds = toy_dataset()
    perm = np.random.default_rng(0).permutation(ds.n)
    shuffled = ds.subset(perm)
    cfg = TrainConfig(method="cid", epochs=3, batch_size=8, lr=0.05, seed=4)
    a, _ = train(ds, cfg)
    b, _ = train(shuffled, cfg)
    assert np.array_equal(a.to_vector(), b.to_vector())


def test_single_sample_plain_sgd_step():
    x = np.array([[0.5, -1.5, 2.0]])
    ds = EmbeddingDataset(["a"], x, [[1.0, 0.0]], [1], ["train"], 2)
    cfg = TrainConfig(epochs=1, batch_size=1, lr=0.3, momentum=0.0, weight_decay=0.0)
    model, _ = train(ds, cfg)
    _, dlogits = ce_loss_and_grad(np.zeros((1, 2)), [1])
    assert np.allclose(model.W, -0.3 * dlogits.T @ x, rtol=0, atol=1e-15)
    assert np.allclose(model.b, -0.3 * dlogits[0], rtol=0, atol=1e-15)


def test_lr_decay_history():
    cfg = TrainConfig(epochs=5, lr=0.2, lr_decay_epoch=2, lr_decay_factor=10, batch_size=8)
    _, hist = train(toy_dataset(), cfg)
    assert [e["lr"] for e in hist.epochs] == pytest.approx([0.2, 0.2, 0.02, 0.02, 0.02])
    assert hist.best_epoch is not None and 0 <= hist.best_val_acc <= 1
    assert all(np.isfinite(e["train_loss"]) for e in hist.epochs)


def test_cid_weights_per_batch_sum_to_one():
    ds = toy_dataset(n=60)
    seen = []

    def hook(epoch, rows, weights):
        y = ds.labels[rows]
        n_cls = len(np.unique(y))
        for c in np.unique(y):
            seen.append(abs(weights[y == c].sum() * n_cls - 1.0))

    train(ds, TrainConfig(method="cid", epochs=3, batch_size=7, lr=0.05), on_batch=hook)
    assert seen and max(seen) <= 1e-12


def test_errors():
    with pytest.raises(ConfigError):
        TrainConfig(method="cid", batch_size=1)
    with pytest.raises(ConfigError):
        TrainConfig(method="sgd")
    with pytest.raises(ConfigError):
        TrainConfig(momentum=1.0)
    empty = EmbeddingDataset(["a"], [[0.0]], [[1.0]], [0], ["test"], 2)
    with pytest.raises(PreconditionError):
        train(empty, TrainConfig())
    three = toy_dataset(n=30, c=3)
    with pytest.raises(ConfigError):
        train(three, TrainConfig(method="irm", epochs=1))


def test_separable_world_full_accuracy():
    ds = gen_cluster_world(ClusterWorldConfig(num_identities=20, samples_per_identity=20, noise_std=0.0), 1)
    model, _ = train(ds, TrainConfig(epochs=20))
    test = ds.split_indices("test")
    assert np.mean(predict(model, ds.features[test])[0] == ds.labels[test]) == 1.0


def test_model_file_roundtrip(tmp_path):
    cfg = TrainConfig(method="irm", architecture="mlp1", hidden_dim=3, epochs=2, batch_size=8,
                      irm=IrmConfig(0.4))
    model, _ = train(toy_dataset(), cfg)
    path = tmp_path / "m.json"
    save_model(model, cfg, path, {"note": "x"})
    back, back_cfg = load_model(path)
    assert back_cfg == cfg
    assert all(np.array_equal(a, b) for a, b in zip(model.arrays(), back.arrays()))
    doc = json.loads(path.read_text())
    assert doc["architecture"] == "mlp1" and doc["train_config"]["irm"] == {"lambda": 0.4}


def test_train_config_roundtrip():
    cfg = TrainConfig(method="dro", epochs=7)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
