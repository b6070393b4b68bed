"""Non-IID assignment of dataset samples to clients.

Three strategies:

* ``DS1`` -- every client gets the same number of samples drawn from exactly
  ``k_overlap`` classes.
* ``DS2`` -- each class is spread over the clients with Dirichlet(alpha * p)
  proportions, p uniform; every client holds every class.
* ``DS3`` -- two classes per client and log-normal client sizes.

Each client's samples are then cut 60/20/20 by :func:`partition_client`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .datasets import ClientData, largest_remainder, label_coverage_ok, partition_client
from .errors import ConfigError, DataError, FeasibilityError, ParameterError

log = logging.getLogger(__name__)

STRATEGIES = ("DS1", "DS2", "DS3")
SPLIT_FORMAT = "persfl-split"
SPLIT_VERSION = 1
MAX_RETRIES = 100
DS3_MIN_CLIENT = 10


@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "DS1"
    K: int = 10
    k_overlap: int = 4
    alpha: float = 0.9
    mu: float = 0.0
    sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.K < 2:
            raise ParameterError(f"need at least 2 clients, got K={self.K}")
        if self.k_overlap < 1:
            raise ParameterError(f"k_overlap must be >= 1, got {self.k_overlap}")
        if not self.alpha > 0:
            raise ParameterError(f"alpha must be positive, got {self.alpha}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


@dataclass(eq=False)
class FederatedSplit:
    clients: list
    spec: SplitSpec
    num_samples: int
    provenance: dict = field(default_factory=dict)

    @property
    def K(self):
        return len(self.clients)

    def client_labels(self, labels):
        return [sorted(np.unique(labels[c.all_indices()]).tolist()) for c in self.clients]

    def __eq__(self, other):
        return (isinstance(other, FederatedSplit) and self.spec == other.spec
                and self.num_samples == other.num_samples
                and len(self.clients) == len(other.clients)
                and all(a == b for a, b in zip(self.clients, other.clients)))

    def to_json(self):
        return {
            "format": SPLIT_FORMAT,
            "version": SPLIT_VERSION,
            "spec": asdict(self.spec),
            "num_samples": self.num_samples,
            "clients": [c.to_json() for c in self.clients],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, doc):
        if doc.get("format") != SPLIT_FORMAT:
            raise ConfigError(f"not a split document (format={doc.get('format')!r})")
        if doc.get("version") != SPLIT_VERSION:
            raise ConfigError(f"unsupported split version {doc.get('version')!r}")
        return cls([ClientData.from_json(c) for c in doc["clients"]], SplitSpec(**doc["spec"]),
                   int(doc["num_samples"]), doc.get("provenance", {}))

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def sample_dirichlet(alpha_vec, seed):
    """One Dirichlet draw via normalized Gamma variates.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    alpha = np.asarray(alpha_vec, dtype=np.float64)
    if alpha.ndim != 1 or alpha.size == 0 or np.any(~(alpha > 0)):
        raise ParameterError("all Dirichlet concentrations must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total == 0.0:
        # every Gamma draw underflowed: the mass sits on the first maximal alpha
        g = (alpha == alpha.max()).astype(np.float64)
        g = np.where(np.cumsum(g) == 1, g, 0.0)
        total = 1.0
    return g / total


def _class_pools(labels, num_classes, rng):
    pools = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        pools.append(idx[rng.permutation(idx.size)])
    return pools


def _finish(dataset, per_client, spec, provenance, rng):
    clients = []
    unmet = []
    for k, idx in enumerate(per_client):
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        seed = int(rng.integers(2**63))
        client = partition_client(idx, seed, labels=dataset.labels, max_tries=MAX_RETRIES)
        if not label_coverage_ok(client, dataset.labels):
            unmet.append(k)
        clients.append(client)
    if unmet:
        log.info("clients %s: train/val could not both cover every owned label", unmet)
    provenance["label_coverage_unmet"] = unmet
    return FederatedSplit(clients, spec, len(dataset), provenance)


def split_ds1(dataset, spec):
    """Equal-size clients, each drawing from exactly ``k_overlap`` classes."""
    C, K, k = dataset.num_classes, spec.K, spec.k_overlap
    if k > C:
        raise ParameterError(f"k_overlap={k} exceeds the {C} classes in the dataset")
    rng = np.random.default_rng([spec.seed, 1])
    counts = np.bincount(dataset.labels, minlength=C)
    cap = len(dataset) // K
    for attempt in range(MAX_RETRIES):
        classes = [np.sort(rng.choice(C, size=k, replace=False)) for _ in range(K)]
        shares = [sample_dirichlet(np.ones(k), rng) for _ in range(K)]
        demand = np.zeros(C)
        for cls, sh in zip(classes, shares):
            demand[cls] += sh
        used = demand > 0
        m = int(min(cap, np.floor(np.min(counts[used] / demand[used]))))
        while m >= k:
            alloc = [np.maximum(largest_remainder(sh, m - k), 0) + 1 for sh in shares]
            need = np.zeros(C, dtype=np.int64)
            for cls, a in zip(classes, alloc):
                need[cls] += a
            if np.all(need <= counts):
                break
            m -= 1
        if m >= k:
            break
        log.debug("DS1 attempt %d infeasible, redrawing class sets", attempt)
    else:
        raise FeasibilityError(
            f"DS1: no feasible assignment of {k} classes to {K} clients after "
            f"{MAX_RETRIES} attempts; use a larger dataset or fewer clients")
    pools = _class_pools(dataset.labels, C, rng)
    taken = np.zeros(C, dtype=np.int64)
    per_client = []
    for cls, a in zip(classes, alloc):
        idx = []
        for c, n_c in zip(cls, a):
            idx.append(pools[c][taken[c]:taken[c] + n_c])
            taken[c] += n_c
        per_client.append(np.concatenate(idx))
    provenance = {
        "samples_per_client": m,
        "classes": [c.tolist() for c in classes],
        "class_counts": [a.tolist() for a in alloc],
        "attempts": attempt + 1,
    }
    return _finish(dataset, per_client, spec, provenance, rng)


def split_ds2(dataset, spec):
    """Dirichlet(alpha * p) allocation of every class over the clients.

    One sample of each class is reserved for every client before the rest
    is distributed, so each client holds all classes.
    """
    C, K = dataset.num_classes, spec.K
    rng = np.random.default_rng([spec.seed, 2])
    counts = np.bincount(dataset.labels, minlength=C)
    if counts.min() < K:
        raise FeasibilityError(
            f"DS2: class {int(counts.argmin())} has {int(counts.min())} samples, fewer than the "
            f"{K} clients; use a larger dataset or a larger alpha")
    prior = np.full(K, 1.0 / K)
    pools = _class_pools(dataset.labels, C, rng)
    per_client = [[] for _ in range(K)]
    proportions = []
    for c in range(C):
        q = sample_dirichlet(spec.alpha * prior, rng)
        proportions.append(q.tolist())
        alloc = 1 + largest_remainder(q, counts[c] - K)
        start = 0
        for k in range(K):
            per_client[k].append(pools[c][start:start + alloc[k]])
            start += alloc[k]
    per_client = [np.concatenate(p) for p in per_client]
    provenance = {"proportions": proportions}
    return _finish(dataset, per_client, spec, provenance, rng)


def lognormal_pdf(u, mu=0.0, sigma=2.0):
    u = np.asarray(u, dtype=np.float64)
    return np.exp(-((np.log(u) - mu) ** 2) / (2 * sigma ** 2)) / (sigma * u * np.sqrt(2 * np.pi))


def split_ds3(dataset, spec):
    """Two classes per client, client sizes proportional to log-normal draws."""
    C, K = dataset.num_classes, spec.K
    if C < 2:
        raise ParameterError("DS3 needs at least two classes")
    rng = np.random.default_rng([spec.seed, 3])
    counts = np.bincount(dataset.labels, minlength=C)
    perm = rng.permutation(C)
    classes = [np.array(sorted((perm[(2 * k) % C], perm[(2 * k + 1) % C]))) for k in range(K)]
    raw = np.exp(rng.normal(spec.mu, spec.sigma, size=K))
    sizes = np.maximum(largest_remainder(raw, len(dataset)), DS3_MIN_CLIENT)

    half_min = DS3_MIN_CLIENT // 2
    parts = np.zeros((K, C), dtype=np.int64)
    for k, cls in enumerate(classes):
        parts[k, cls[0]] = sizes[k] - sizes[k] // 2
        parts[k, cls[1]] = sizes[k] // 2
    scaled = {}
    for c in range(C):
        users = np.flatnonzero(parts[:, c])
        demand = parts[users, c].sum()
        if demand <= counts[c]:
            continue
        floor_total = half_min * users.size
        if counts[c] < floor_total:
            raise FeasibilityError(
                f"DS3: class {c} has {counts[c]} samples but {users.size} clients need "
                f"{half_min} each")
        factor = (counts[c] - floor_total) / (demand - floor_total)
        for k in users:
            parts[k, c] = half_min + int(np.floor((parts[k, c] - half_min) * factor))
        scaled[str(c)] = {"clients": users.tolist(), "factor": factor}
    if scaled:
        log.info("DS3: class capacity exceeded, scaled down %s", sorted(scaled))

    pools = _class_pools(dataset.labels, C, rng)
    taken = np.zeros(C, dtype=np.int64)
    per_client = []
    for k in range(K):
        idx = []
        for c in classes[k]:
            idx.append(pools[c][taken[c]:taken[c] + parts[k, c]])
            taken[c] += parts[k, c]
        per_client.append(np.concatenate(idx))
    provenance = {
        "classes": [c.tolist() for c in classes],
        "target_sizes": sizes.tolist(),
        "sizes": parts.sum(axis=1).tolist(),
        "downscaled": scaled,
    }
    return _finish(dataset, per_client, spec, provenance, rng)


_SPLITTERS = {"DS1": split_ds1, "DS2": split_ds2, "DS3": split_ds3}


def make_split(dataset, spec):
    if len(dataset) == 0:
        raise DataError("cannot split an empty dataset")
    return _SPLITTERS[spec.strategy](dataset, spec)
