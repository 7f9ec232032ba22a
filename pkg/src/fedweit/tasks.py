"""Synthetic per-client task streams.

Every class is an isotropic Gaussian cluster whose mean lies on the unit
sphere. Labels inside a task are local (0..k-1) because every task gets its
own output head; ``Task.classes`` keeps the global class ids.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import ValidationError

_MAGIC = b"FCLS"
_VERSION = 1


@dataclass(frozen=True, eq=False)
class Task:
    task_id: int
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_valid: np.ndarray
    y_valid: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def splits(self):
        return ((self.x_train, self.y_train), (self.x_valid, self.y_valid), (self.x_test, self.y_test))


@dataclass
class TaskStream:
    client_id: int
    tasks: list[Task] = field(default_factory=list)

    def __len__(self):
        return len(self.tasks)


@dataclass(frozen=True)
class ClusterSpec:
    feature_dim: int = 32
    sigma: float = 0.25
    n_train: int = 100
    n_valid: int = 30
    n_test: int = 30
    min_separation: float = 4.0   # in units of sigma, between classes of one task

    def __post_init__(self):
        if self.feature_dim < 1 or self.sigma <= 0:
            raise ValidationError("feature_dim must be >= 1 and sigma > 0")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ValidationError("every split needs at least one instance per class")


def _unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _task_means(rng, k: int, spec: ClusterSpec, max_tries: int = 1000) -> np.ndarray:
    gap = spec.min_separation * spec.sigma
    for _ in range(max_tries):
        means = _unit(rng, k, spec.feature_dim)
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        if k == 1 or d[np.triu_indices(k, 1)].min() >= gap:
            return means
    raise ValidationError(f"cannot place {k} class means {gap:.3g} apart in {spec.feature_dim} dims")


def _sample_split(rng, means, n, sigma):
    k, d = means.shape
    y = np.repeat(np.arange(k), n)
    x = means[y] + sigma * rng.normal(size=(k * n, d))
    perm = rng.permutation(len(y))
    return x[perm], y[perm]


def _make_pool(rng, num_tasks, classes_per_task, spec: ClusterSpec, scale: int = 1):
    """Global tasks with disjoint class ids; splits sized ``scale`` x spec."""
    pool = []
    for tid in range(num_tasks):
        means = _task_means(rng, classes_per_task, spec)
        classes = tuple(range(tid * classes_per_task, (tid + 1) * classes_per_task))
        splits = [_sample_split(rng, means, n * scale, spec.sigma)
                  for n in (spec.n_train, spec.n_valid, spec.n_test)]
        pool.append((classes, splits))
    return pool


def gen_noniid_stream(num_clients: int, tasks_per_client: int, classes_per_task: int,
                      rng: np.random.Generator, spec: ClusterSpec = ClusterSpec(),
                      pool_classes: int | None = None) -> list[TaskStream]:
    """Disjoint-class tasks dealt to clients without duplication."""
    if min(num_clients, tasks_per_client, classes_per_task) < 1:
        raise ValidationError("clients, tasks per client and classes per task must be positive")
    n_tasks = num_clients * tasks_per_client
    needed = n_tasks * classes_per_task
    if pool_classes is not None and pool_classes < needed:
        raise ValidationError(f"class pool of {pool_classes} is too small, need {needed}")
    pool = _make_pool(rng, n_tasks, classes_per_task, spec)
    # shuffle global class ids so task ids carry no ordering
    relabel = rng.permutation(needed)
    order = rng.permutation(n_tasks)
    streams = []
    for c in range(num_clients):
        tasks = []
        for tid in order[c * tasks_per_client:(c + 1) * tasks_per_client]:
            classes, ((xtr, ytr), (xva, yva), (xte, yte)) = pool[tid]
            tasks.append(Task(int(tid), tuple(int(relabel[k]) for k in classes), xtr, ytr, xva, yva, xte, yte))
        streams.append(TaskStream(c, tasks))
    return streams


def _shard(rng, x, y, k: int, who: int):
    """Instances of shard ``who`` out of ``k`` disjoint, class-balanced shards."""
    keep = []
    for label in np.unique(y):
        idx = np.flatnonzero(y == label)
        idx = idx[rng.permutation(idx.size)]
        part = np.array_split(idx, k)[who]
        if part.size == 0:
            raise ValidationError(f"class pool of {idx.size} instances cannot be split {k} ways")
        keep.append(part)
    keep = np.sort(np.concatenate(keep))
    return x[keep], y[keep], keep


def gen_overlapped_stream(num_clients: int, tasks_per_client: int, num_global_tasks: int,
                          rng: np.random.Generator, classes_per_task: int = 5,
                          spec: ClusterSpec = ClusterSpec(), pool_scale: int = 1) -> list[TaskStream]:
    """Clients sample tasks from a shared pool; a task's instances are split among its holders.

    ``pool_scale`` multiplies the per-class instance counts of each global task
    before it is sharded.
    """
    if min(num_clients, tasks_per_client, num_global_tasks, classes_per_task) < 1:
        raise ValidationError("stream parameters must be positive")
    if tasks_per_client > num_global_tasks:
        raise ValidationError("tasks_per_client cannot exceed num_global_tasks")
    pool = _make_pool(rng, num_global_tasks, classes_per_task, spec, scale=pool_scale)
    picks = [rng.choice(num_global_tasks, size=tasks_per_client, replace=False) for _ in range(num_clients)]
    holders: dict[int, list[int]] = {}
    for c, p in enumerate(picks):
        for tid in p:
            holders.setdefault(int(tid), []).append(c)
    shards: dict[tuple[int, int], Task] = {}
    for tid in sorted(holders):
        classes, splits = pool[tid]
        owners = holders[tid]
        # one permutation per (task, split) shared by all holders keeps shards disjoint
        seeds = rng.integers(0, 2**63, size=3)
        for who, c in enumerate(owners):
            parts = []
            for (x, y), s in zip(splits, seeds):
                xs, ys, _ = _shard(np.random.default_rng(int(s)), x, y, len(owners), who)
                parts += [xs, ys]
            shards[(c, tid)] = Task(tid, classes, *parts)
    return [TaskStream(c, [shards[(c, int(tid))] for tid in p]) for c, p in enumerate(picks)]


def shard_indices(y: np.ndarray, k: int, seed: int) -> list[np.ndarray]:
    """Index sets the overlapped generator would hand to each of ``k`` holders."""
    return [_shard(np.random.default_rng(seed), y, y, k, who)[2] for who in range(k)]


# binary dump/load -----------------------------------------------------------

def _write_array(fh: BinaryIO, x: np.ndarray, y: np.ndarray):
    n, d = x.shape
    fh.write(struct.pack("<II", n, d))
    fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
    fh.write(np.ascontiguousarray(y, dtype="<u4").tobytes())


def dump_streams(streams: list[TaskStream], path: str | Path):
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<BI", _VERSION, len(streams)))
        for s in streams:
            fh.write(struct.pack("<II", s.client_id, len(s.tasks)))
            for t in s.tasks:
                fh.write(struct.pack("<II", t.task_id, len(t.classes)))
                fh.write(np.array(t.classes, dtype="<u4").tobytes())
                for x, y in t.splits():
                    _write_array(fh, x, y)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.off = data, 0

    def unpack(self, fmt):
        vals = struct.unpack_from(fmt, self.data, self.off)
        self.off += struct.calcsize(fmt)
        return vals

    def array(self, dtype, count):
        a = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.off).copy()
        self.off += a.nbytes
        return a


def load_streams(path: str | Path) -> list[TaskStream]:
    r = _Reader(Path(path).read_bytes())
    if r.data[:4] != _MAGIC:
        raise ValidationError(f"{path} is not a task stream file")
    r.off = 4
    version, n_streams = r.unpack("<BI")
    if version != _VERSION:
        raise ValidationError(f"unsupported stream file version {version}")
    streams = []
    for _ in range(n_streams):
        cid, n_tasks = r.unpack("<II")
        tasks = []
        for _ in range(n_tasks):
            tid, k = r.unpack("<II")
            classes = tuple(int(c) for c in r.array("<u4", k))
            parts = []
            for _ in range(3):
                n, d = r.unpack("<II")
                parts.append(r.array("<f8", n * d).reshape(n, d))
                parts.append(r.array("<u4", n).astype(np.int64))
            tasks.append(Task(tid, classes, *parts))
        streams.append(TaskStream(cid, tasks))
    return streams
