"""Synchronous FedAvg over simulated clients, with per-round snapshots."""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .nn import (Hyper, ModelParams, cross_entropy, forward, init_params, softmax_t,
                 train_epochs)

log = logging.getLogger(__name__)

SNAPSHOT_POLICIES = ("every_round", "final_only")


@dataclass(frozen=True)
class FedConfig:
    E_G: int = 20
    hyper: Hyper = field(default_factory=Hyper)
    K: int = 10
    seed: int = 0
    snapshot_policy: str = "every_round"
    hidden: tuple = (100,)
    weighted: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.E_G < 1:
            raise ParameterError(f"E_G must be >= 1, got {self.E_G}")
        if self.K < 1:
            raise ParameterError(f"K must be >= 1, got {self.K}")
        if self.snapshot_policy not in SNAPSHOT_POLICIES:
            raise ParameterError(f"snapshot_policy must be one of {SNAPSHOT_POLICIES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


@dataclass(frozen=True, eq=False)
class TeacherSnapshot:
    round: int
    params: ModelParams


@dataclass
class RoundRecord:
    round: int
    uploads: int
    downloads: int
    wall_time: float
    mean_train_loss: float


@dataclass
class RoundLedger:
    rounds: list = field(default_factory=list)
    eta: float = 0.0
    batch_size: int = 0
    local_epochs: int = 0
    local_epochs_run: list = field(default_factory=list)

    @property
    def num_rounds(self):
        return len(self.rounds)

    @property
    def total_uploads(self):
        return sum(r.uploads for r in self.rounds)

    def to_json(self, include_timing=False):
        rows = []
        for r in self.rounds:
            row = {"round": r.round, "uploads": r.uploads, "downloads": r.downloads,
                   "mean_train_loss": r.mean_train_loss}
            if include_timing:
                row["wall_time"] = r.wall_time
            rows.append(row)
        return {"rounds": rows, "eta": self.eta, "batch_size": self.batch_size,
                "local_epochs": self.local_epochs, "local_epochs_run": self.local_epochs_run}


@dataclass(eq=False)
class FedAvgResult:
    snapshots: list
    final: ModelParams
    ledger: RoundLedger
    init: ModelParams


def client_rng(seed, client, round_):
    """Generator for one client in one round; independent of execution order."""
    return np.random.default_rng([int(seed), int(client), int(round_)])


def local_train(params, dataset, client, hyper, seed, epochs=None, eta=None):
    """``E_L`` epochs of mini-batch SGD on the client's train split.

    ``seed`` is an int or a Generator.  ``epochs``/``eta`` override the
    values in ``hyper`` (zero is accepted here, unlike in :class:`Hyper`).
    """
    if len(client.train) == 0:
        raise DataError("client has an empty train split")
    X, y = dataset.subset(client.train)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return train_epochs(params, X, y,
                        eta=hyper.eta if eta is None else eta,
                        batch_size=hyper.batch_size,
                        epochs=hyper.local_epochs if epochs is None else epochs,
                        rng=rng)


def aggregate(client_params, weights=None):
    """Element-wise (weighted) mean, reduced in client-index order."""
    client_params = list(client_params)
    if not client_params:
        raise ParameterError("aggregate needs at least one client model")
    ref = client_params[0]
    for i, p in enumerate(client_params[1:], start=1):
        if not ref.same_shape(p):
            raise DimensionError(f"client {i}: parameter shapes differ from client 0")
    if weights is None:
        w = np.full(len(client_params), 1.0 / len(client_params))
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    out = []
    for j in range(len(ref.arrays())):
        acc = np.zeros_like(ref.arrays()[j])
        if weights is None:
            for p in client_params:
                acc = acc + p.arrays()[j]
            out.append(acc / len(client_params))
        else:
            for wk, p in zip(w, client_params):
                acc = acc + wk * p.arrays()[j]
            out.append(acc)
    return ModelParams.from_arrays(out)


def train_loss(params, dataset, indices):
    X, y = dataset.subset(indices)
    return cross_entropy(softmax_t(forward(params, X), 1.0), y)


def model_sizes(dataset, hidden):
    return (dataset.dim, *hidden, dataset.num_classes)


def run_fedavg(dataset, split, cfg, init=None):
    """Run ``cfg.E_G`` rounds of broadcast / local training / averaging."""
    if split.K != cfg.K:
        raise ParameterError(f"split has {split.K} clients but config says K={cfg.K}")
    if init is None:
        init = init_params(model_sizes(dataset, cfg.hidden),
                           np.random.default_rng([int(cfg.seed), 0xF00D]))
    weights = None
    if cfg.weighted:
        weights = [len(c.train) for c in split.clients]
    ledger = RoundLedger(eta=cfg.hyper.eta, batch_size=cfg.hyper.batch_size,
                         local_epochs=cfg.hyper.local_epochs,
                         local_epochs_run=[0] * cfg.K)
    snapshots = []
    global_model = init

    def work(k, e, model):
        client = split.clients[k]
        local = local_train(model, dataset, client, cfg.hyper, client_rng(cfg.seed, k, e))
        return local, train_loss(local, dataset, client.train)

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for e in range(1, cfg.E_G + 1):
            t0 = time.perf_counter()
            if pool is None:
                results = [work(k, e, global_model) for k in range(cfg.K)]
            else:
                results = list(pool.map(lambda k: work(k, e, global_model), range(cfg.K)))
            global_model = aggregate([r[0] for r in results], weights)
            for k in range(cfg.K):
                ledger.local_epochs_run[k] += cfg.hyper.local_epochs
            ledger.rounds.append(RoundRecord(
                round=e, uploads=cfg.K, downloads=cfg.K,
                wall_time=time.perf_counter() - t0,
                mean_train_loss=float(np.mean([r[1] for r in results]))))
            if cfg.snapshot_policy == "every_round" or e == cfg.E_G:
                snapshots.append(TeacherSnapshot(e, global_model))
            log.debug("round %d: mean local train loss %.4f", e, ledger.rounds[-1].mean_train_loss)
    finally:
        if pool is not None:
            pool.shutdown()
    return FedAvgResult(snapshots, global_model, ledger, init)
