"""Server-side state: client sampling, aggregation and the knowledge base."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import DimensionError, ProtocolError, ValidationError
from ..model import KbItem
from .payload import PayloadKind, SparsePayload


def sample_clients(client_ids: Sequence[int], fraction: float, rng: np.random.Generator) -> list[int]:
    """ceil(F * C) distinct clients, uniformly at random, returned sorted."""
    if not 0 < fraction <= 1:
        raise ValidationError(f"client fraction must lie in (0, 1], got {fraction}")
    ids = list(client_ids)
    k = min(len(ids), math.ceil(round(fraction * len(ids), 9)))
    if k == len(ids):
        return sorted(ids)
    chosen = rng.choice(len(ids), size=k, replace=False)
    return sorted(ids[i] for i in chosen)


def aggregate_global(payloads: Sequence[SparsePayload]) -> list[np.ndarray]:
    """Elementwise mean of decoded payloads; missing entries count as zero."""
    if not payloads:
        raise ProtocolError("no participant uploaded this round")
    shapes = payloads[0].shapes
    total = [np.zeros(s) for s in shapes]
    for p in payloads:
        if p.shapes != shapes:
            raise DimensionError("participants uploaded differently shaped payloads")
        for acc, dense in zip(total, p.decode()):
            acc += dense
    return [t / len(payloads) for t in total]


def apply_global(base: Sequence[np.ndarray], theta_g: Sequence[np.ndarray]):
    """Overwrite ``base`` in place wherever ``theta_g`` is nonzero."""
    if len(base) != len(theta_g):
        raise DimensionError("parameter lists differ in length")
    for b, g in zip(base, theta_g):
        if b.shape != np.shape(g):
            raise DimensionError(f"shapes {b.shape} and {np.shape(g)} differ")
        nz = g != 0
        b[nz] = g[nz]


@dataclass(frozen=True)
class KbEntry:
    client: int
    task: int
    payload: SparsePayload

    def item(self) -> KbItem:
        return KbItem(self.client, self.task, tuple(self.payload.decode()))


class KnowledgeBase:
    """Append-only store of task-adaptive payloads keyed by (client, task)."""

    def __init__(self):
        self._entries: list[KbEntry] = []
        self._keys: set[tuple[int, int]] = set()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._keys

    @property
    def entries(self) -> tuple[KbEntry, ...]:
        return tuple(self._entries)

    def add(self, client: int, task: int, payload: SparsePayload):
        if (client, task) in self._keys:
            raise ProtocolError(f"kb already holds client {client} task {task}")
        if payload.kind not in (PayloadKind.ADAPTIVE, PayloadKind.KB):
            raise ProtocolError(f"kb only stores adaptive payloads, got {payload.kind.name}")
        self._keys.add((client, task))
        self._entries.append(KbEntry(client, task, payload))

    def sample(self, for_client: int, size: int | None, rng: np.random.Generator) -> list[KbEntry]:
        """Up to ``size`` foreign entries without replacement (``None`` = all)."""
        if size is not None and size < 0:
            raise ValidationError("kb sample size must be >= 0")
        foreign = [e for e in self._entries if e.client != for_client]
        if size is None or size >= len(foreign):
            return foreign
        pick = rng.choice(len(foreign), size=size, replace=False)
        return [foreign[i] for i in sorted(pick)]


def kb_add(kb: KnowledgeBase, client: int, task: int, payload: SparsePayload):
    kb.add(client, task, payload)


def kb_sample(kb: KnowledgeBase, for_client: int, size: int | None, rng: np.random.Generator) -> list[KbItem]:
    return [e.item() for e in kb.sample(for_client, size, rng)]
