"""Simulated federated training: partitioning, local rounds, weighted averaging."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from . import model as mdl
from .autodiff import OptimizerState
from .circuits import NOISELESS, NoiseSpec
from .errors import ConfigError, StructuralError
from .seeding import derive_rng

log = logging.getLogger(__name__)

PARTITION_SCHEMES = ("iid", "label_skew", "dirichlet")
# Per-emotion sample counts of the reference corpus; label_skew scales
# and permutes this profile per client.
REFERENCE_CLASS_COUNTS = (12500, 6000, 5000, 4050, 2250, 1900)
MAX_PARTITION_RETRIES = 100


class RoundFailure(RuntimeError):
    pass


@dataclass
class ClientState:
    client_id: int
    shard: object
    params: Optional[np.ndarray] = None
    opt: OptimizerState = field(default_factory=OptimizerState)

    def __post_init__(self):
        if len(self.shard) == 0:
            raise StructuralError(f"client {self.client_id} has an empty shard")

    @property
    def data_size(self) -> int:
        return len(self.shard)


@dataclass
class GlobalModel:
    params: np.ndarray
    round: int = 0


@dataclass
class RoundReport:
    round: int
    client_losses: list
    train_accuracy: float
    test_accuracy: float
    modality_accuracies: list
    wall_time: float = 0.0


@dataclass
class FederationSettings:
    rounds: int = 1
    local_epochs: int = 1
    batch_size: Optional[int] = None
    optimizer: str = "adam"
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise: NoiseSpec = NOISELESS
    seed: int = 0
    workers: int = 1

    def new_optimizer(self) -> OptimizerState:
        return OptimizerState(self.optimizer, self.learning_rate, self.beta1, self.beta2, self.eps)


# --- partitioning ---------------------------------------------------------------

def _split_by_shares(indices: np.ndarray, shares: np.ndarray) -> List[np.ndarray]:
    cuts = np.floor(np.cumsum(shares)[:-1] / shares.sum() * len(indices) + 0.5).astype(int)
    return np.split(indices, cuts)


def _skew_profile(num_classes: int) -> np.ndarray:
    counts = np.array([REFERENCE_CLASS_COUNTS[c % len(REFERENCE_CLASS_COUNTS)] for c in range(num_classes)], float)
    return counts / counts.sum()


def partition_indices(labels, num_clients: int, scheme: str = "iid", alpha: float = 0.5, seed: int = 0):
    """Index arrays (sorted) of each client's shard."""
    labels = np.asarray(labels)
    n = len(labels)
    if scheme not in PARTITION_SCHEMES:
        raise ConfigError({"partition.scheme": f"unknown scheme {scheme!r}"})
    if num_clients < 1:
        raise ConfigError({"clients": "need at least one client"})
    if n < num_clients:
        raise ConfigError({"clients": f"{num_clients} clients but only {n} samples"})
    if num_clients == 1:
        return [np.arange(n)]
    if scheme == "dirichlet" and not alpha > 0:
        raise ConfigError({"partition.alpha": "alpha must be positive"})
    rng = np.random.default_rng(seed)
    if scheme == "iid":
        return [np.sort(part) for part in np.array_split(rng.permutation(n), num_clients)]

    classes = np.unique(labels)
    for _ in range(MAX_PARTITION_RETRIES):
        buckets = [[] for _ in range(num_clients)]
        if scheme == "label_skew":
            profile = _skew_profile(int(labels.max()) + 1)
            weights = np.stack([rng.permutation(profile) for _ in range(num_clients)])
        for c in classes:
            idx = rng.permutation(np.flatnonzero(labels == c))
            if scheme == "dirichlet":
                shares = rng.dirichlet(np.full(num_clients, alpha))
            else:
                shares = weights[:, c]
            for k, part in enumerate(_split_by_shares(idx, shares)):
                buckets[k].append(part)
        shards = [np.sort(np.concatenate(b)) for b in buckets]
        if all(len(s) for s in shards):
            return shards
    raise ConfigError({"partition": f"could not give every one of {num_clients} clients data "
                                    f"after {MAX_PARTITION_RETRIES} attempts"})


def partition(dataset, num_clients: int, scheme: str = "iid", alpha: float = 0.5, seed: int = 0):
    return [dataset.subset(idx) for idx in partition_indices(dataset.labels, num_clients, scheme, alpha, seed)]


# --- aggregation -----------------------------------------------------------------

def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or sizes.size == 0 or np.any(sizes <= 0):
        raise StructuralError("every client needs a positive data size")
    return sizes / sizes.sum()


def aggregate(client_params) -> np.ndarray:
    """Dataset-size weighted mean of ``[(params, size), ...]``, applied to
    every slot alike. Reduction order follows the input order."""
    client_params = list(client_params)
    if not client_params:
        raise StructuralError("nothing to aggregate")
    vectors = [np.asarray(p, dtype=np.float64) for p, _ in client_params]
    shape = vectors[0].shape
    if any(v.shape != shape for v in vectors):
        raise StructuralError("client parameter vectors differ in length")
    weights = aggregation_weights([d for _, d in client_params])
    out = weights[0] * vectors[0]
    for w, v in zip(weights[1:], vectors[1:]):
        out = out + w * v
    return out


# --- orchestration --------------------------------------------------------------

def _eval_rng(settings: FederationSettings, tag: str, r: int):
    if settings.noise.mode != "per_gate_pauli":
        return None
    return derive_rng(settings.noise.seed, tag, r)


def run_federation(
    model: mdl.MultimodalModel,
    shards,
    test_set,
    settings: FederationSettings,
    *,
    train_set=None,
    on_round: Optional[Callable] = None,
):
    """Synchronous federated training starting from ``model.params``.

    Every round broadcasts the global parameters, trains every client
    locally, then aggregates. Clients keep their optimizer state across
    rounds. ``on_round(report, global_model)`` is called after each round.
    Returns ``(GlobalModel, [RoundReport, ...])``; ``model.params`` ends
    up holding the final global parameters.
    """
    if settings.rounds < 1:
        raise ConfigError({"rounds": "need at least one round"})
    clients = [ClientState(k, shard, opt=settings.new_optimizer()) for k, shard in enumerate(shards)]
    if train_set is None:
        train_set = shards[0] if len(shards) == 1 else None
    global_model = GlobalModel(model.params.copy(), 0)
    reports = []

    def train_client(client: ClientState, r: int):
        rng = derive_rng(settings.seed, "client", client.client_id, r)
        params, trace = mdl.local_train(
            model,
            client.shard,
            settings.local_epochs,
            client.opt,
            settings.noise,
            batch_size=settings.batch_size,
            rng=rng,
            params=client.params,
        )
        return params, trace

    pool = ThreadPoolExecutor(settings.workers) if settings.workers > 1 else None
    try:
        for r in range(settings.rounds):
            t0 = time.perf_counter()
            for client in clients:
                client.params = global_model.params.copy()
            try:
                if pool is None:
                    results = [train_client(c, r) for c in clients]
                else:
                    futures = [pool.submit(train_client, c, r) for c in clients]
                    results = []
                    for c, fut in zip(clients, futures):
                        try:
                            results.append(fut.result())
                        except Exception as exc:
                            raise RoundFailure(f"round {r}, client {c.client_id}: {exc}") from exc
            except RoundFailure:
                raise
            except Exception as exc:
                raise RoundFailure(f"round {r}: {exc}") from exc

            for client, (params, _) in zip(clients, results):
                client.params = params
            global_model = GlobalModel(
                aggregate([(c.params, c.data_size) for c in clients]), r + 1
            )
            model.params = global_model.params.copy()
            noise = settings.noise
            train_acc = (
                mdl.accuracy(model, train_set, noise, _eval_rng(settings, "eval-train", r))
                if train_set is not None
                else float("nan")
            )
            report = RoundReport(
                round=r,
                client_losses=[float(trace[-1]) for _, trace in results],
                train_accuracy=train_acc,
                test_accuracy=mdl.accuracy(model, test_set, noise, _eval_rng(settings, "eval-test", r)),
                modality_accuracies=mdl.modality_accuracies(
                    model, test_set, noise, _eval_rng(settings, "eval-modality", r)
                ),
                wall_time=time.perf_counter() - t0,
            )
            reports.append(report)
            log.info(
                "round %d: loss %.4f test acc %.4f",
                r,
                float(np.median(report.client_losses)),
                report.test_accuracy,
            )
            if on_round is not None:
                on_round(report, global_model)
    finally:
        if pool is not None:
            pool.shutdown()
    return global_model, reports


__all__ = [
    "ClientState",
    "FederationSettings",
    "GlobalModel",
    "RoundFailure",
    "RoundReport",
    "aggregate",
    "aggregation_weights",
    "partition",
    "partition_indices",
    "run_federation",
]
