import numpy as np
import pytest

from persfl import nn
from persfl.datasets import partition_client, synth_gaussian
from persfl.errors import DataError, DimensionError, ParameterError
from persfl.fedsim import (FedConfig, aggregate, client_rng, local_train, model_sizes,
                           run_fedavg)
from persfl.nn import Hyper, ModelParams, init_params
from persfl.splitter import FederatedSplit, SplitSpec, make_split


@pytest.fixture(scope="module")
def data():
    return synth_gaussian(4, 30, 3, 1.0, seed=1)


def _single_client_split(data, copies=1):
    client = partition_client(np.arange(len(data)), seed=0, labels=data.labels)
    return FederatedSplit([client] * copies, SplitSpec(K=2), len(data))


def test_local_train_no_ops(data):
    split = _single_client_split(data)
    p = init_params([3, 5, 4], np.random.default_rng(0))
    hyper = Hyper(eta=0.1, batch_size=8, local_epochs=3)
    assert local_train(p, data, split.clients[0], hyper, 0, epochs=0).equals(p)
    assert local_train(p, data, split.clients[0], hyper, 0, eta=0.0).equals(p)


def test_local_train_empty_split(data):
    client = partition_client(np.arange(5), 0)
    empty = type(client)([], client.val, client.test)
    with pytest.raises(DataError):
        local_train(init_params([3, 4], np.random.default_rng(0)), data, empty, Hyper(), 0)


def test_local_train_one_step_by_hand():
    # linear model, two samples, one full batch
    X = np.array([[1.0, -2.0], [0.5, 3.0]])
    y = np.array([1, 0])
    W = np.array([[0.2, -0.1], [0.4, 0.3]])
    b = np.array([0.05, -0.05])
    p = ModelParams((W,), (b,))
    from persfl.datasets import ClientData, Dataset
    ds = Dataset(X, y, 2)
    client = ClientData([0, 1], [], [])
    hyper = Hyper(eta=0.7, batch_size=2, local_epochs=1)

    z = X @ W.T + b
    prob = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
    delta = (prob - np.eye(2)[y]) / 2
    expected = nn.sgd_step(p, [delta.T @ X, delta.sum(axis=0)], 0.7)
    for engine in nn.available_backends():
        with nn.use_backend(engine):
            got = local_train(p, ds, client, hyper, 3)
        assert got.max_abs_diff(expected) < 1e-15

    # the same step through the tape is exact on the python engine
    order = np.random.default_rng(3).permutation(2)
    with nn.GradTape() as tape:
        layers = nn.watch(tape, p)
        loss = nn.cross_entropy(nn.softmax_t(nn.forward_tensor(layers, X[order]), 1.0),
                                y[order])
        grads = tape.gradient(loss, [layers[0][0], layers[0][1]])
    with nn.use_backend("python"):
        assert local_train(p, ds, client, hyper, 3).equals(nn.sgd_step(p, grads, 0.7))


def test_aggregate_examples(rng):
    a = ModelParams((np.array([[0.0]]),), (np.array([0.0]),))
    b = ModelParams((np.array([[2.0]]),), (np.array([2.0]),))
    out = aggregate([a, b])
    assert out.weights[0][0, 0] == 1.0 and out.biases[0][0] == 1.0
    p = init_params([4, 3, 2], rng)
    assert aggregate([p, p, p]).max_abs_diff(p) < 1e-15


def test_aggregate_matches_pairwise_oracle(rng):
    models = [init_params([5, 6, 3], rng) for _ in range(10)]
    out = aggregate(models)

    def pairwise(xs):
        if len(xs) == 1:
            return xs[0]
        mid = len(xs) // 2
        return pairwise(xs[:mid]) + pairwise(xs[mid:])

    for j, arr in enumerate(out.arrays()):
        oracle = pairwise([m.arrays()[j] for m in models]) / 10
        np.testing.assert_allclose(arr, oracle, rtol=0, atol=1e-12)
    perm = rng.permutation(10)
    assert aggregate([models[i] for i in perm]).max_abs_diff(out) < 1e-12


def test_aggregate_weighted(rng):
    a = ModelParams((np.array([[0.0]]),), (np.array([0.0]),))
    b = ModelParams((np.array([[4.0]]),), (np.array([4.0]),))
    assert aggregate([a, b], weights=[3, 1]).weights[0][0, 0] == 1.0


def test_aggregate_shape_mismatch_names_client(rng):
    with pytest.raises(DimensionError, match="client 2"):
        aggregate([init_params([3, 2], rng), init_params([3, 2], rng), init_params([4, 2], rng)])


def test_single_round_single_client_collapse(data):
    split = _single_client_split(data)
    cfg = FedConfig(E_G=1, K=1, hidden=(5,), hyper=Hyper(batch_size=8), seed=4)
    res = run_fedavg(data, split, cfg)
    direct = local_train(res.init, data, split.clients[0], cfg.hyper, client_rng(4, 0, 1))
    assert res.final.equals(direct)
    assert [s.round for s in res.snapshots] == [1]


def test_identical_clients_match_single_client(data):
    hyper = Hyper(eta=0.2, batch_size=1000, local_epochs=2)
    one = run_fedavg(data, _single_client_split(data, 1),
                     FedConfig(E_G=4, K=1, hidden=(6,), hyper=hyper, seed=2))
    many = run_fedavg(data, _single_client_split(data, 5),
                      FedConfig(E_G=4, K=5, hidden=(6,), hyper=hyper, seed=2))
    for a, b in zip(one.snapshots, many.snapshots):
        assert a.params.max_abs_diff(b.params) < 1e-12


def test_ledger_and_snapshots(data):
    split = make_split(data, SplitSpec("DS1", K=3, k_overlap=2, seed=0))
    cfg = FedConfig(E_G=3, K=3, hidden=(5,), seed=0)
    res = run_fedavg(data, split, cfg)
    assert res.ledger.num_rounds == 3
    assert [r.uploads for r in res.ledger.rounds] == [3, 3, 3]
    assert [r.downloads for r in res.ledger.rounds] == [3, 3, 3]
    assert [s.round for s in res.snapshots] == [1, 2, 3]
    assert res.snapshots[-1].params.equals(res.final)
    assert res.ledger.local_epochs_run == [3 * cfg.hyper.local_epochs] * 3
    assert "wall_time" not in res.ledger.to_json()["rounds"][0]
    final_only = run_fedavg(data, split, FedConfig(E_G=3, K=3, hidden=(5,),
                                                   snapshot_policy="final_only"))
    assert [s.round for s in final_only.snapshots] == [3]


def test_parallel_matches_sequential(data):
    split = make_split(data, SplitSpec("DS2", K=4, seed=1))
    seq = run_fedavg(data, split, FedConfig(E_G=3, K=4, hidden=(5,), seed=7))
    par = run_fedavg(data, split, FedConfig(E_G=3, K=4, hidden=(5,), seed=7, workers=4))
    assert seq.final.equals(par.final)
    assert all(a.params.equals(b.params) for a, b in zip(seq.snapshots, par.snapshots))


def test_training_makes_progress():
    ds = synth_gaussian(5, 60, 4, 0.3, seed=3)
    split = make_split(ds, SplitSpec("DS2", K=4, alpha=1e6, seed=0))
    res = run_fedavg(ds, split, FedConfig(E_G=20, K=4, hidden=(8,), seed=0))
    assert res.ledger.rounds[-1].mean_train_loss < res.ledger.rounds[0].mean_train_loss


def test_config_mismatch(data):
    split = make_split(data, SplitSpec("DS1", K=2, k_overlap=2))
    with pytest.raises(ParameterError):
        run_fedavg(data, split, FedConfig(K=3))
    with pytest.raises(ParameterError):
        FedConfig(E_G=0)


def test_model_sizes(data):
    assert model_sizes(data, (7,)) == (3, 7, 4)
