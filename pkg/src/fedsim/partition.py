"""Client data partitioning: IID plus four Non-IID mechanisms.

Every mechanism produces an exact cover of the train index range:
client index sets are pairwise disjoint and their union is the full
dataset. Clients that would end up empty are repaired by redrawing
their randomness a bounded number of times.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import Rng, dirichlet_sample
from .data import Dataset, allocate_local_test
from .errors import InvalidArgument, PartitionError

_EPS = 1e-9
_MAX_REPAIR = 100

PARTITION_KINDS = ("iid", "label-skew", "label-dir", "random-shard", "quantity-dir")


@dataclass(frozen=True)
class PartitionSpec:
    """Which mechanism to run and its single level parameter."""

    kind: str
    n_clients: int
    p: float | None = None
    alpha: float | None = None
    shards_per_client: int | None = None

    def __post_init__(self):
        if self.kind not in PARTITION_KINDS:
            raise InvalidArgument(f"unknown partition kind {self.kind!r}")
        if self.n_clients < 1:
            raise InvalidArgument("n_clients must be >= 1")
        required = {
            "iid": (),
            "label-skew": ("p",),
            "label-dir": ("alpha",),
            "random-shard": ("shards_per_client",),
            "quantity-dir": ("alpha",),
        }[self.kind]
        for name in ("p", "alpha", "shards_per_client"):
            value = getattr(self, name)
            if name in required and value is None:
                raise InvalidArgument(f"{self.kind} partition requires {name}")
            if name not in required and value is not None:
                raise InvalidArgument(f"{self.kind} partition does not take {name}")

    @property
    def level(self) -> float | None:
        """Heterogeneity level for reporting (p, alpha, or shard count)."""
        if self.kind == "label-skew":
            return self.p
        if self.kind in ("label-dir", "quantity-dir"):
            return self.alpha
        if self.kind == "random-shard":
            return float(self.shards_per_client)
        return None


@dataclass(frozen=True)
class ClientPartition:
    """One client's index sets into the train and test datasets."""

    client_id: int
    train_indices: np.ndarray
    owned_classes: frozenset[int]
    test_indices: np.ndarray | None = None

    def __post_init__(self):
        idx = np.sort(np.asarray(self.train_indices, dtype=np.int64))
        if idx.size == 0:
            raise InvalidArgument(f"client {self.client_id} has no train samples")
        idx.setflags(write=False)
        object.__setattr__(self, "train_indices", idx)
        object.__setattr__(self, "owned_classes", frozenset(int(c) for c in self.owned_classes))
        if self.test_indices is not None:
            t = np.asarray(self.test_indices, dtype=np.int64)
            t.setflags(write=False)
            object.__setattr__(self, "test_indices", t)

    @property
    def n_train(self) -> int:
        return int(self.train_indices.size)


def _build(train: Dataset, assignment: list[np.ndarray]) -> list[ClientPartition]:
    parts = []
    for cid, idx in enumerate(assignment):
        owned = frozenset(int(c) for c in np.unique(train.labels[idx]))
        parts.append(ClientPartition(cid, idx, owned))
    return parts


def attach_local_tests(
    partitions: list[ClientPartition], global_test: Dataset
) -> list[ClientPartition]:
    """Fill each partition's test indices per the owned-class rule."""
    return [
        dataclasses.replace(p, test_indices=allocate_local_test(global_test, p.owned_classes))
        for p in partitions
    ]


def largest_remainder_counts(shares: np.ndarray, total: int) -> np.ndarray:
    """Integer counts proportional to shares, summing exactly to total.

    Ties in the fractional remainders break toward the lowest index.
    """
    shares = np.asarray(shares, dtype=np.float64)
    if not shares.sum() > 0.0:
        raise InvalidArgument("shares must have a positive sum")
    raw = shares / shares.sum() * total
    base = np.floor(raw + _EPS).astype(np.int64)
    deficit = total - int(base.sum())
    if deficit < 0:
        # floor epsilon overshot; trim from the largest remainders' complement
        order = np.lexsort((np.arange(len(base)), raw - base))
        for i in order[: -deficit]:
            base[i] -= 1
        deficit = 0
    if deficit > 0:
        order = np.lexsort((np.arange(len(base)), -(raw - base)))
        base[order[:deficit]] += 1
    return base


def partition_iid(train: Dataset, n: int, rng: Rng) -> list[ClientPartition]:
    """Random permutation split into n near-equal parts (diff <= 1)."""
    total = train.n_samples
    if n > total:
        raise InvalidArgument(f"cannot split {total} samples across {n} clients")
    perm = rng.permutation(total)
    base = total // n
    sizes = np.full(n, base, dtype=np.int64)
    sizes[: total % n] += 1
    assignment = []
    start = 0
    for size in sizes:
        assignment.append(perm[start : start + size])
        start += size
    return _build(train, assignment)


def classes_per_client(p: float, n_classes: int) -> int:
    return int(math.ceil(p * n_classes - _EPS))


def partition_label_skew(
    train: Dataset, n: int, p: float, rng: Rng
) -> list[ClientPartition]:
    """Each client owns ceil(p * n_classes) random classes.

    Each class's samples are split uniformly among its owners (sizes
    differ by at most 1). Classes no client drew are repaired by
    swapping them in for a multiply-owned class of a random client.
    """
    k = train.n_classes
    if not 0.0 < p <= 1.0:
        raise InvalidArgument(f"p must be in (0, 1], got {p}")
    if p * k < 1.0 - _EPS:
        raise InvalidArgument(f"p * n_classes = {p * k:.3f} < 1")
    cpc = classes_per_client(p, k)
    if n * cpc < k:
        raise InvalidArgument(
            f"{n} clients x {cpc} classes cannot cover {k} classes"
        )
    class_indices = [np.nonzero(train.labels == c)[0] for c in range(k)]

    owned = [set(rng.sample_without_replacement(k, cpc).tolist()) for _ in range(n)]
    for _ in range(_MAX_REPAIR):
        _repair_class_coverage(owned, k, rng)
        assignment = _split_classes_among_owners(class_indices, owned, n, rng)
        empties = [i for i, idx in enumerate(assignment) if idx.size == 0]
        if not empties:
            return _build(train, assignment)
        # a client can come up empty only when its classes have more
        # owners than samples; redraw just that client's class set
        for i in empties:
            owned[i] = set(rng.sample_without_replacement(k, cpc).tolist())
    raise PartitionError("label-skew repair failed after 100 redraws")


def _repair_class_coverage(owned: list[set[int]], k: int, rng: Rng) -> None:
    counts = [0] * k
    for s in owned:
        for c in s:
            counts[c] += 1
    uncovered = sorted(c for c in range(k) if counts[c] == 0)
    attempts = 0
    while uncovered:
        attempts += 1
        if attempts > 100 * k:
            raise PartitionError("class coverage repair did not converge")
        c = uncovered[0]
        i = rng.randbelow(len(owned))
        removable = sorted(d for d in owned[i] if counts[d] >= 2)
        if not removable:
            continue
        d = removable[rng.randbelow(len(removable))]
        owned[i].remove(d)
        owned[i].add(c)
        counts[d] -= 1
        counts[c] += 1
        uncovered = sorted(x for x in range(k) if counts[x] == 0)


def _split_classes_among_owners(
    class_indices: list[np.ndarray], owned: list[set[int]], n: int, rng: Rng
) -> list[np.ndarray]:
    per_client: list[list[np.ndarray]] = [[] for _ in range(n)]
    for c, idx in enumerate(class_indices):
        owners = sorted(i for i in range(n) if c in owned[i])
        if not owners:
            continue
        shuffled = idx[rng.permutation(idx.size)]
        order = rng.permutation(len(owners))
        base, extra = divmod(idx.size, len(owners))
        start = 0
        for rank, pos in enumerate(order):
            size = base + (1 if rank < extra else 0)
            per_client[owners[pos]].append(shuffled[start : start + size])
            start += size
    return [
        np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
        for chunks in per_client
    ]


def partition_label_dir(
    train: Dataset, n: int, alpha: float, rng: Rng
) -> list[ClientPartition]:
    """Dirichlet(alpha) class proportions per client.

    Class c's samples are split in proportion to each client's c-th
    coordinate using largest-remainder rounding, giving an exact cover
    per class. Empty clients redraw their proportion vector.
    """
    if alpha <= 0.0:
        raise InvalidArgument(f"alpha must be > 0, got {alpha}")
    k = train.n_classes
    vectors = np.vstack([dirichlet_sample(rng, alpha, k) for _ in range(n)])
    class_indices = [np.nonzero(train.labels == c)[0] for c in range(k)]
    shuffles = [idx[rng.permutation(idx.size)] for idx in class_indices]

    for _ in range(_MAX_REPAIR):
        counts = np.zeros((n, k), dtype=np.int64)
        for c in range(k):
            counts[:, c] = largest_remainder_counts(vectors[:, c], class_indices[c].size)
        empties = np.nonzero(counts.sum(axis=1) == 0)[0]
        if empties.size == 0:
            assignment: list[list[np.ndarray]] = [[] for _ in range(n)]
            for c in range(k):
                start = 0
                for i in range(n):
                    size = int(counts[i, c])
                    if size:
                        assignment[i].append(shuffles[c][start : start + size])
                    start += size
            return _build(train, [np.concatenate(a) for a in assignment])
        for i in empties:
            vectors[i] = dirichlet_sample(rng, alpha, k)
    raise PartitionError("label-dir repair failed after 100 redraws")


def largest_valid_shards_per_client(total: int, n: int, requested: int) -> int:
    for spc in range(requested, 0, -1):
        if total % (n * spc) == 0:
            return spc
    return 0


def partition_random_shard(
    train: Dataset, n: int, shards_per_client: int, rng: Rng
) -> list[ClientPartition]:
    """Label-sort, cut into n * shards_per_client equal shards, deal."""
    if shards_per_client < 1:
        raise InvalidArgument("shards_per_client must be >= 1")
    total = train.n_samples
    n_shards = n * shards_per_client
    if total % n_shards != 0:
        suggestion = largest_valid_shards_per_client(total, n, shards_per_client)
        raise InvalidArgument(
            f"{total} samples not divisible into {n_shards} shards; "
            f"largest valid shards_per_client is {suggestion}"
        )
    shard_size = total // n_shards
    order = np.argsort(train.labels, kind="stable")
    deal = rng.permutation(n_shards)
    assignment = []
    for i in range(n):
        mine = deal[i * shards_per_client : (i + 1) * shards_per_client]
        chunks = [order[s * shard_size : (s + 1) * shard_size] for s in mine]
        assignment.append(np.concatenate(chunks))
    return _build(train, assignment)


def partition_quantity_dir(
    train: Dataset, n: int, alpha: float, rng: Rng
) -> list[ClientPartition]:
    """One Dirichlet(alpha) draw over clients sets sample quantities.

    Labels stay IID (random permutation); only the per-client counts
    skew. Zero-count clients redraw their gamma component.
    """
    if alpha <= 0.0:
        raise InvalidArgument(f"alpha must be > 0, got {alpha}")
    total = train.n_samples
    if n > total:
        raise InvalidArgument(f"cannot split {total} samples across {n} clients")
    gammas = np.array([rng.gamma(alpha) for _ in range(n)])
    for _ in range(_MAX_REPAIR):
        if gammas.sum() <= 0.0:
            gammas = np.array([rng.gamma(alpha) for _ in range(n)])
            continue
        counts = largest_remainder_counts(gammas, total)
        zeros = np.nonzero(counts == 0)[0]
        if zeros.size == 0:
            perm = rng.permutation(total)
            assignment = []
            start = 0
            for size in counts:
                assignment.append(perm[start : start + int(size)])
                start += int(size)
            return _build(train, assignment)
        for i in zeros:
            gammas[i] = rng.gamma(alpha)
    raise PartitionError("quantity-dir repair failed after 100 redraws")


def make_partitions(train: Dataset, spec: PartitionSpec, rng: Rng) -> list[ClientPartition]:
    """Dispatch on spec.kind."""
    if spec.kind == "iid":
        return partition_iid(train, spec.n_clients, rng)
    if spec.kind == "label-skew":
        return partition_label_skew(train, spec.n_clients, spec.p, rng)
    if spec.kind == "label-dir":
        return partition_label_dir(train, spec.n_clients, spec.alpha, rng)
    if spec.kind == "random-shard":
        return partition_random_shard(train, spec.n_clients, spec.shards_per_client, rng)
    return partition_quantity_dir(train, spec.n_clients, spec.alpha, rng)


def manifest_lines(partitions: list[ClientPartition]) -> list[str]:
    """Text manifest: one `client,...` line per client."""
    lines = []
    for p in partitions:
        classes = ";".join(str(c) for c in sorted(p.owned_classes))
        test_n = int(p.test_indices.size) if p.test_indices is not None else 0
        lines.append(
            f"client,{p.client_id},classes,{classes},train_n,{p.n_train},test_n,{test_n}"
        )
    return lines


def manifest_jsonl(partitions: list[ClientPartition]) -> list[str]:
    """JSON-lines manifest with explicit index arrays."""
    lines = []
    for p in partitions:
        lines.append(
            json.dumps(
                {
                    "client": p.client_id,
                    "classes": sorted(p.owned_classes),
                    "train_indices": p.train_indices.tolist(),
                    "test_indices": (
                        p.test_indices.tolist() if p.test_indices is not None else None
                    ),
                },
                separators=(",", ":"),
            )
        )
    return lines
