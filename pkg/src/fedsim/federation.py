"""Round protocol, fusion strategies, and the in-scope algorithms.

Global algorithms: fedavg, fedprox (proximal local objective), fednova
(normalized averaging), scaffold (control variates). Personalized:
fedavg_ft (post-hoc fine-tuning), decoupled (local classifier head),
clustered (lowest-loss cluster assignment), solo (no federation).

Within a round, client updates are independent tasks; fusion always
consumes them in client-id order, so results are bit-identical for any
worker count.
"""

from __future__ import annotations

import hashlib
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .core import ParamVector, Rng, weighted_mean
from .data import Dataset
from .errors import IncompatibleShape, InvalidArgument
from .model import (
    LocalTrainSpec,
    ModelSpec,
    OptState,
    _local_train,
    _loss_grad_arrays,
    evaluate,
    init_params,
)
from .partition import ClientPartition

ALGORITHMS = (
    "fedavg",
    "fedprox",
    "fednova",
    "scaffold",
    "fedavg_ft",
    "decoupled",
    "clustered",
    "solo",
)
PERSONALIZED_ALGORITHMS = frozenset({"fedavg_ft", "decoupled", "clustered", "solo"})

_EPS = 1e-9


@dataclass(frozen=True)
class FederationConfig:
    """Protocol hyperparameters plus the algorithm choice."""

    n_clients: int
    sample_rate: float
    rounds: int
    local: LocalTrainSpec
    lr: float
    momentum: float
    algorithm: str
    seed: int
    mu: float = 0.001
    ft_epochs: int = 20
    n_clusters: int = 2

    def __post_init__(self):
        if self.n_clients < 1:
            raise InvalidArgument("n_clients must be >= 1")
        if not 0.0 < self.sample_rate <= 1.0:
            raise InvalidArgument("sample_rate must be in (0, 1]")
        if self.rounds < 1:
            raise InvalidArgument("rounds must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise InvalidArgument(f"unknown algorithm {self.algorithm!r}")
        if self.mu < 0.0 or self.ft_epochs < 0:
            raise InvalidArgument("mu and ft_epochs must be >= 0")
        if self.n_clusters < 1:
            raise InvalidArgument("n_clusters must be >= 1")


@dataclass(frozen=True)
class ClientRoundStat:
    client_id: int
    n_train: int
    steps: int
    mean_loss: float


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected: tuple[int, ...]
    m: int
    global_accuracy: float
    client_stats: tuple[ClientRoundStat, ...]


@dataclass
class RunResult:
    round_logs: list[RoundLog]
    final_global: ParamVector | None
    final_personal: dict[int, ParamVector]
    final_clusters: list[ParamVector] | None = None

    def digest(self) -> str:
        """Stable content hash for determinism checks across processes."""
        h = hashlib.sha256()
        for log in self.round_logs:
            h.update(struct.pack("<qqd", log.round, log.m, log.global_accuracy))
            h.update(np.asarray(log.selected, dtype=np.int64).tobytes())
            for s in log.client_stats:
                h.update(struct.pack("<qqqd", s.client_id, s.n_train, s.steps, s.mean_loss))
        if self.final_global is not None:
            h.update(self.final_global.values.tobytes())
        for cid in sorted(self.final_personal):
            h.update(struct.pack("<q", cid))
            h.update(self.final_personal[cid].values.tobytes())
        if self.final_clusters is not None:
            for pv in self.final_clusters:
                h.update(pv.values.tobytes())
        return h.hexdigest()


def participant_count(n: int, sample_rate: float) -> int:
    """m = max(floor(C * N), 1), with a tiny epsilon guarding float C*N."""
    return max(int(math.floor(sample_rate * n + _EPS)), 1)


def sample_clients(rng: Rng, n: int, sample_rate: float) -> tuple[int, ...]:
    """Uniform without-replacement sample of m client ids, sorted."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    if not 0.0 < sample_rate <= 1.0:
        raise InvalidArgument("sample_rate must be in (0, 1]")
    m = participant_count(n, sample_rate)
    return tuple(int(i) for i in rng.sample_without_replacement(n, m))


def fuse_fedavg(updates: list[tuple[ParamVector, int]]) -> ParamVector:
    """Dataset-size weighted mean of client parameters."""
    if not updates:
        raise InvalidArgument("fuse_fedavg needs at least one update")
    vectors = [u[0] for u in updates]
    weights = [float(u[1]) for u in updates]
    return weighted_mean(vectors, weights)


def tau_effective(tau: int, momentum: float) -> float:
    """Effective local-step count under SGD momentum.

    sum_{j<tau} (1 - momentum^(tau-j)) / (1 - momentum); equals tau
    when momentum is 0.
    """
    if tau < 1:
        raise InvalidArgument("tau must be >= 1")
    if momentum == 0.0:
        return float(tau)
    geo = momentum * (1.0 - momentum**tau) / (1.0 - momentum)
    return (tau - geo) / (1.0 - momentum)


def fuse_fednova(
    updates: list[tuple[ParamVector, int, int]],
    global_params: ParamVector,
    momentum: float = 0.0,
) -> ParamVector:
    """Normalized averaging of client deltas (delta = local - global).

    Each delta is normalized by its effective step count, averaged with
    dataset-size weights, then rescaled by the size-weighted mean
    effective step count. With uniform tau and zero momentum this
    reduces exactly to fedavg.
    """
    if not updates:
        raise InvalidArgument("fuse_fednova needs at least one update")
    sizes = np.array([float(u[1]) for u in updates])
    taus = [u[2] for u in updates]
    if any(t < 1 for t in taus):
        raise InvalidArgument("every client must take at least one step")
    p = sizes / sizes.sum()
    tau_eff = np.array([tau_effective(t, momentum) for t in taus])
    tau_bar = float(p @ tau_eff)
    acc = np.zeros(len(global_params))
    for (delta, _, _), weight, te in zip(updates, p, tau_eff):
        if delta.layout != global_params.layout:
            raise IncompatibleShape("fuse_fednova over mismatched layouts")
        acc += weight * delta.values / te
    return ParamVector(global_params.values + tau_bar * acc, global_params.layout)


@dataclass
class ScaffoldState:
    """Server and per-client control variates (plain arrays)."""

    server: np.ndarray
    clients: dict[int, np.ndarray]

    @staticmethod
    def initial(n_params: int, client_ids) -> "ScaffoldState":
        return ScaffoldState(
            np.zeros(n_params), {int(k): np.zeros(n_params) for k in client_ids}
        )

    def mean_client_variate(self) -> np.ndarray:
        acc = np.zeros_like(self.server)
        for v in self.clients.values():
            acc += v
        return acc / len(self.clients)


def scaffold_client_variate(
    old_variate: np.ndarray,
    server_variate: np.ndarray,
    global_values: np.ndarray,
    local_values: np.ndarray,
    steps: int,
    lr: float,
) -> np.ndarray:
    """c_k <- c_k - c + (theta_g - theta_k) / (steps * lr)."""
    if lr <= 0.0:
        raise InvalidArgument("scaffold requires lr > 0")
    if steps == 0:
        return old_variate
    return old_variate - server_variate + (global_values - local_values) / (steps * lr)


class _ClientData:
    """Per-client train arrays resolved once per run."""

    def __init__(self, train: Dataset, partitions: list[ClientPartition]):
        self.features = [train.features[p.train_indices] for p in partitions]
        self.labels = [train.labels[p.train_indices] for p in partitions]
        self.sizes = [p.n_train for p in partitions]


def _run_clients(jobs, workers: int):
    """Execute (client_id, fn) jobs, return {client_id: fn()} deterministically."""
    if workers <= 1:
        return {cid: fn() for cid, fn in jobs}
    out = {}
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {cid: pool.submit(fn) for cid, fn in jobs}
        for cid, fut in futures.items():
            out[cid] = fut.result()
    return out


def run_federation(
    config: FederationConfig,
    model_spec: ModelSpec,
    partitions: list[ClientPartition],
    train: Dataset,
    test: Dataset,
    workers: int = 1,
) -> RunResult:
    """Execute T communication rounds of the configured algorithm."""
    if len(partitions) != config.n_clients:
        raise InvalidArgument(
            f"config declares {config.n_clients} clients, got {len(partitions)} partitions"
        )
    data = _ClientData(train, partitions)
    root = Rng(config.seed)
    opt = OptState.initial(config.lr, config.momentum, model_spec)
    if config.algorithm == "solo":
        return _run_solo(config, model_spec, data, test, root, opt, workers)
    if config.algorithm == "clustered":
        return _run_clustered(config, model_spec, data, test, root, opt, workers)
    return _run_global_family(config, model_spec, data, test, root, opt, workers)


def _train_job(model_spec, start, x, y, train_spec, opt, rng, offset=None):
    def job():
        return _local_train(model_spec, start, x, y, train_spec, opt, rng, offset)

    return job


def _stats_tuple(selected, results, sizes) -> tuple[ClientRoundStat, ...]:
    return tuple(
        ClientRoundStat(k, sizes[k], results[k][1].steps, results[k][1].mean_loss)
        for k in selected
    )


def _run_global_family(config, model_spec, data, test, root, opt, workers) -> RunResult:
    algo = config.algorithm
    global_p = init_params(model_spec, root.substream("init", 0))
    layout = global_p.layout
    boundary = model_spec.local_boundary()
    decoupled = algo == "decoupled"
    heads = (
        {k: global_p.values[boundary:].copy() for k in range(config.n_clients)}
        if decoupled
        else None
    )
    scaffold = (
        ScaffoldState.initial(len(global_p), range(config.n_clients))
        if algo == "scaffold"
        else None
    )
    prox_mu = config.mu if algo == "fedprox" else 0.0
    train_spec = replace(config.local, prox_mu=prox_mu)
    test_idx = np.arange(test.n_samples)
    logs: list[RoundLog] = []

    for t in range(config.rounds):
        selected = sample_clients(
            root.substream("sample", t), config.n_clients, config.sample_rate
        )
        jobs = []
        for k in selected:
            if decoupled:
                vals = global_p.values.copy()
                vals[boundary:] = heads[k]
                start = ParamVector(vals, layout)
            else:
                start = global_p
            offset = scaffold.server - scaffold.clients[k] if scaffold else None
            rng_k = root.substream("client", k, t)
            jobs.append(
                (k, _train_job(model_spec, start, data.features[k], data.labels[k],
                               train_spec, opt, rng_k, offset))
            )
        results = _run_clients(jobs, workers)

        if algo == "fednova":
            updates = [
                (
                    ParamVector(results[k][0].values - global_p.values, layout),
                    data.sizes[k],
                    results[k][1].steps,
                )
                for k in selected
            ]
            global_p = fuse_fednova(updates, global_p, config.momentum)
        elif algo == "scaffold":
            delta = np.zeros(len(global_p))
            variate_delta = np.zeros(len(global_p))
            for k in selected:
                local_vals = results[k][0].values
                delta += local_vals - global_p.values
                new_c = scaffold_client_variate(
                    scaffold.clients[k],
                    scaffold.server,
                    global_p.values,
                    local_vals,
                    results[k][1].steps,
                    config.lr,
                )
                variate_delta += new_c - scaffold.clients[k]
                scaffold.clients[k] = new_c
            m = len(selected)
            global_p = ParamVector(global_p.values + delta / m, layout)
            scaffold.server = scaffold.server + variate_delta / config.n_clients
        else:
            fused = fuse_fedavg([(results[k][0], data.sizes[k]) for k in selected])
            if decoupled:
                for k in selected:
                    heads[k] = results[k][0].values[boundary:].copy()
            global_p = fused

        acc = evaluate(model_spec, global_p, test, test_idx)
        logs.append(
            RoundLog(t, selected, len(selected), acc, _stats_tuple(selected, results, data.sizes))
        )

    personal: dict[int, ParamVector] = {}
    if algo == "fedavg_ft":
        personal = _fine_tune_data(
            global_p, model_spec, data, config.ft_epochs, config.local.batch_size,
            opt, root, workers,
        )
    elif decoupled:
        for k in range(config.n_clients):
            vals = global_p.values.copy()
            vals[boundary:] = heads[k]
            personal[k] = ParamVector(vals, layout)
    return RunResult(logs, global_p, personal)


def _fine_tune_data(
    global_params: ParamVector,
    model_spec: ModelSpec,
    data: _ClientData,
    ft_epochs: int,
    batch_size: int,
    opt: OptState,
    root: Rng,
    workers: int = 1,
) -> dict[int, ParamVector]:
    spec = LocalTrainSpec(epochs=ft_epochs, batch_size=batch_size)
    jobs = [
        (
            k,
            _train_job(
                model_spec, global_params, data.features[k], data.labels[k],
                spec, opt, root.substream("ft", k),
            ),
        )
        for k in range(len(data.sizes))
    ]
    results = _run_clients(jobs, workers)
    return {k: results[k][0] for k in results}


def fine_tune(
    global_params: ParamVector,
    model_spec: ModelSpec,
    partitions: list[ClientPartition],
    train: Dataset,
    ft_epochs: int,
    batch_size: int,
    opt: OptState,
    root: Rng,
    workers: int = 1,
) -> dict[int, ParamVector]:
    """Every client (all N) locally fine-tunes the global model.

    ft_epochs of the standard local loop starting from global_params;
    returns the per-client personal models. ft_epochs=0 returns
    identical copies of the global model.
    """
    return _fine_tune_data(
        global_params, model_spec, _ClientData(train, partitions),
        ft_epochs, batch_size, opt, root, workers,
    )


def _mean_loss(model_spec, values, x, y) -> float:
    loss, _ = _loss_grad_arrays(model_spec, values, x, y, None, 0.0)
    return loss


def assign_cluster(model_spec, clusters, x, y) -> int:
    """Lowest-train-loss cluster, ties toward the lowest cluster id."""
    losses = [_mean_loss(model_spec, c.values, x, y) for c in clusters]
    return int(np.argmin(losses))


def _run_clustered(config, model_spec, data, test, root, opt, workers) -> RunResult:
    clusters = [
        init_params(model_spec, root.substream("init", j)) for j in range(config.n_clusters)
    ]
    test_idx = np.arange(test.n_samples)
    logs: list[RoundLog] = []
    for t in range(config.rounds):
        selected = sample_clients(
            root.substream("sample", t), config.n_clients, config.sample_rate
        )
        assignment = {
            k: assign_cluster(model_spec, clusters, data.features[k], data.labels[k])
            for k in selected
        }
        jobs = [
            (
                k,
                _train_job(
                    model_spec, clusters[assignment[k]], data.features[k], data.labels[k],
                    config.local, opt, root.substream("client", k, t),
                ),
            )
            for k in selected
        ]
        results = _run_clients(jobs, workers)
        for j in range(config.n_clusters):
            members = [k for k in selected if assignment[k] == j]
            if members:
                clusters[j] = fuse_fedavg([(results[k][0], data.sizes[k]) for k in members])
        cluster_accs = [evaluate(model_spec, c, test, test_idx) for c in clusters]
        acc = max(cluster_accs)
        logs.append(
            RoundLog(t, selected, len(selected), acc, _stats_tuple(selected, results, data.sizes))
        )
    final_accs = [evaluate(model_spec, c, test, test_idx) for c in clusters]
    best = int(np.argmax(final_accs))
    personal = {
        k: clusters[assign_cluster(model_spec, clusters, data.features[k], data.labels[k])]
        for k in range(config.n_clients)
    }
    return RunResult(logs, clusters[best], personal, final_clusters=list(clusters))


def _run_solo(config, model_spec, data, test, root, opt, workers) -> RunResult:
    """Local-only training: T rounds of E epochs per client, no fusion.

    Each client's job sees only its own partition. The per-round
    "global" accuracy is the mean of client accuracies on the server
    test set (there is no shared model).
    """
    init = init_params(model_spec, root.substream("init", 0))
    models = {k: init for k in range(config.n_clients)}
    test_idx = np.arange(test.n_samples)
    logs: list[RoundLog] = []
    for t in range(config.rounds):
        jobs = [
            (
                k,
                _train_job(
                    model_spec, models[k], data.features[k], data.labels[k],
                    config.local, opt, root.substream("client", k, t),
                ),
            )
            for k in range(config.n_clients)
        ]
        results = _run_clients(jobs, workers)
        models = {k: results[k][0] for k in results}
        accs = [evaluate(model_spec, models[k], test, test_idx) for k in sorted(models)]
        selected = tuple(range(config.n_clients))
        logs.append(
            RoundLog(
                t, selected, len(selected), float(np.mean(accs)),
                _stats_tuple(selected, results, data.sizes),
            )
        )
    return RunResult(logs, None, models)
