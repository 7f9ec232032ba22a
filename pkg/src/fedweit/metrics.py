"""Averaged accuracy and averaged forgetting over a task-by-task accuracy matrix.

``a[t, i]`` is the test accuracy on task ``i`` after learning task ``t``
(both 0-based in storage). The public functions take *counts*: ``t`` tasks
learned so far, ``T`` tasks in total.
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import StateError, ValidationError


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        self.a = np.full((num_tasks, num_tasks), np.nan)

    @property
    def num_tasks(self) -> int:
        return self.a.shape[0]

    def set_row(self, t: int, accs: Sequence[float]):
        accs = np.asarray(accs, dtype=np.float64)
        if accs.shape != (t + 1,):
            raise ValidationError(f"row {t} needs {t + 1} entries, got {accs.shape}")
        if np.any((accs < 0) | (accs > 1)):
            raise ValidationError("accuracies must lie in [0, 1]")
        self.a[t, : t + 1] = accs

    def row_complete(self, t: int) -> bool:
        return bool(np.all(np.isfinite(self.a[t, : t + 1])))

    @property
    def completed(self) -> int:
        n = 0
        while n < self.num_tasks and self.row_complete(n):
            n += 1
        return n


def _values(acc) -> np.ndarray:
    return acc.a if isinstance(acc, AccuracyMatrix) else np.asarray(acc, dtype=np.float64)


def avg_accuracy(acc, t: int) -> float:
    """Mean test accuracy over tasks 1..t after learning task t."""
    a = _values(acc)
    if t < 1 or t > a.shape[0]:
        raise ValidationError(f"t must lie in [1, {a.shape[0]}]")
    row = a[t - 1, :t]
    if not np.all(np.isfinite(row)):
        raise StateError(f"accuracy row {t} is incomplete")
    return float(np.mean(row))


def forgetting(acc, T: int) -> float:
    """Mean over tasks i < T of max_{t<T} (a[t, i] - a[T, i])."""
    a = _values(acc)
    if T < 2:
        raise ValidationError("forgetting is undefined for fewer than 2 tasks")
    if T > a.shape[0]:
        raise ValidationError(f"T={T} exceeds the {a.shape[0]} recorded tasks")
    block = a[:T, :T]
    if not np.all(np.isfinite(block[np.tril_indices(T)])):
        raise StateError(f"accuracy rows 1..{T} are incomplete")
    final = block[T - 1, : T - 1]
    drops = [np.max(block[i : T - 1, i]) - final[i] for i in range(T - 1)]
    return float(np.mean(drops))


def mean_forgetting(matrices: Sequence, T: int) -> float:
    return float(np.mean([forgetting(m, T) for m in matrices]))


def accuracy(model, t: int, x, y) -> float:
    pred = np.argmax(model.forward(t, x), axis=1)
    return float(np.mean(pred == np.asarray(y)))


def eval_after_task(model, tasks, t: int, matrix: AccuracyMatrix) -> np.ndarray:
    """Fill row ``t`` (0-based) with test accuracy on every task learned so far.

    ``model`` is anything with ``forward(task_index, x) -> logits`` that has
    kept per-task state for tasks ``0..t``.
    """
    if t >= len(tasks):
        raise StateError(f"no data for task {t}")
    row = []
    for i in range(t + 1):
        try:
            row.append(accuracy(model, i, tasks[i].x_test, tasks[i].y_test))
        except (IndexError, StateError) as exc:
            raise StateError(f"task {i} state is missing") from exc
    matrix.set_row(t, row)
    return np.asarray(row)


def dump_matrices(matrices: dict[int, AccuracyMatrix], path: str | Path, seed: int):
    """Long format: seed,client,after_task,task,accuracy (tasks 1-based)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "client", "after_task", "task", "accuracy"))
        for c in sorted(matrices):
            a = matrices[c].a
            for t in range(a.shape[0]):
                for i in range(t + 1):
                    if np.isfinite(a[t, i]):
                        w.writerow((seed, c, t + 1, i + 1, repr(float(a[t, i]))))


def load_matrices(path: str | Path) -> dict[tuple[int, int], AccuracyMatrix]:
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append((int(r["seed"]), int(r["client"]), int(r["after_task"]), int(r["task"]), float(r["accuracy"])))
    size = max((r[2] for r in rows), default=0)
    out: dict[tuple[int, int], AccuracyMatrix] = {}
    for seed, c, t, i, v in rows:
        m = out.setdefault((seed, c), AccuracyMatrix(size))
        m.a[t - 1, i - 1] = v
    return out
