"""Round loop for synchronous and asynchronous federated continual learning.

Synchronous task ``t``:

1. every client draws its kb sample (foreign adaptive weights) once;
2. for each of ``rounds`` rounds: sample participants, send theta_G (plus the
   kb sample on a client's first round of the task), train locally, upload
   the top-k masked base, average into the new theta_G;
3. after the last round each client uploads its top-k adaptive weights,
   which join the knowledge base, and evaluates all tasks so far.

Every transmission goes through :class:`CommLedger`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import seeding
from ..errors import ValidationError
from ..metrics import AccuracyMatrix, avg_accuracy, forgetting
from ..model import chain, init_body
from ..objective import ObjectiveConfig
from ..tasks import TaskStream
from .client import BaselineClient, FedWeITClient
from .ledger import C2S, S2C, SERVER, CommLedger
from .payload import PayloadKind, dense_payload, sparsify_topk
from .server import KnowledgeBase, aggregate_global, sample_clients


@dataclass(frozen=True)
class FederationConfig:
    fraction: float = 1.0
    rounds: int = 20
    epochs_per_round: int = 1
    batch_size: int = 100
    kappa_b: float = 0.3
    kappa_a: float = 0.03
    kb_sample_size: int | None = None
    mode: str = "sync"
    budgets: tuple[tuple[int, ...], ...] | None = None
    kb_variant: str = "main"
    lr: float = 1e-3 / 3
    lr_floor: float = 1e-7
    hidden: tuple[int, ...] = (64,)
    fisher_samples: int = 256

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValidationError("fraction must lie in (0, 1]")
        if self.rounds < 1 or self.epochs_per_round < 1 or self.batch_size < 1:
            raise ValidationError("rounds, epochs_per_round and batch_size must be >= 1")
        for name in ("kappa_b", "kappa_a"):
            if not 0 < getattr(self, name) <= 1:
                raise ValidationError(f"{name} must lie in (0, 1]")
        if self.kb_sample_size is not None and self.kb_sample_size < 0:
            raise ValidationError("kb_sample_size must be >= 0")
        if self.mode not in ("sync", "async"):
            raise ValidationError(f"mode must be 'sync' or 'async', got {self.mode!r}")
        if self.kb_variant not in ("main", "supplementary"):
            raise ValidationError("kb_variant must be 'main' or 'supplementary'")
        if self.kb_variant == "supplementary" and self.mode != "sync":
            raise ValidationError("the supplementary kb variant is defined for sync mode only")
        if self.budgets is not None and any(b < 1 for row in self.budgets for b in row):
            raise ValidationError("every round budget must be >= 1")
        if not 0 < self.lr_floor < self.lr:
            raise ValidationError("need 0 < lr_floor < lr")
        if any(h < 1 for h in self.hidden):
            raise ValidationError("hidden sizes must be >= 1")


@dataclass
class RunResult:
    method: str
    seed: int
    matrices: dict[int, AccuracyMatrix]
    ledger: CommLedger
    kb_sizes: list[int] = field(default_factory=list)

    @property
    def num_tasks(self) -> int:
        return min(m.num_tasks for m in self.matrices.values())

    def avg_accuracy(self, t: int | None = None) -> float:
        t = self.num_tasks if t is None else t
        return float(np.mean([avg_accuracy(m, t) for m in self.matrices.values()]))

    def forgetting(self, T: int | None = None) -> float:
        T = self.num_tasks if T is None else T
        return float(np.mean([forgetting(m, T) for m in self.matrices.values()]))


class Federation:
    def __init__(self, streams: Sequence[TaskStream], obj: ObjectiveConfig, cfg: FederationConfig, seed: int = 0):
        if not streams:
            raise ValidationError("need at least one client")
        lengths = {len(s) for s in streams}
        if len(lengths) != 1 or 0 in lengths:
            raise ValidationError("every client needs the same positive number of tasks")
        self.num_tasks = lengths.pop()
        self.streams = list(streams)
        self.obj = obj
        self.cfg = cfg
        self.seed = seed
        first = streams[0].tasks[0]
        classes = {t.num_classes for s in streams for t in s.tasks}
        if len(classes) != 1:
            raise ValidationError("all tasks must have the same number of classes")
        self.layers = chain(first.x_train.shape[1], *cfg.hidden)
        self.head_classes = classes.pop()
        weights, biases = init_body(self.layers, seeding.derive_rng(seed, seeding.INIT))
        self.theta_g: list[np.ndarray] = weights + biases
        self.ids = [s.client_id for s in streams]
        if sorted(self.ids) != list(range(len(streams))):
            raise ValidationError("client ids must be 0..C-1")
        self.clients = [self._make_client(s, weights, biases) for s in sorted(streams, key=lambda s: s.client_id)]
        self.kb = KnowledgeBase()
        self.ledger = CommLedger()
        self.round = 0
        self.kb_sizes: list[int] = []

    @property
    def fedweit(self) -> bool:
        return self.obj.method == "fedweit"

    @property
    def federated(self) -> bool:
        return self.obj.method != "local_ewc"

    def _make_client(self, stream, weights, biases):
        c = self.cfg
        common = dict(obj=self.obj, lr=c.lr, lr_floor=c.lr_floor, epochs_per_round=c.epochs_per_round,
                      batch_size=c.batch_size)
        if self.fedweit:
            return FedWeITClient(stream, self.layers, self.head_classes, weights, biases, **common)
        cid = stream.client_id
        return BaselineClient(stream, self.layers, self.head_classes, weights, biases,
                              fisher_samples=c.fisher_samples,
                              fisher_rng=lambda t: seeding.derive_rng(self.seed, seeding.FISHER, cid, t),
                              **common)

    # -- transmissions ------------------------------------------------------

    def _global_payload(self):
        if self.fedweit:
            return sparsify_topk(self.theta_g, 1.0, PayloadKind.GLOBAL)
        return dense_payload(self.theta_g)

    def _deliver_kb(self, c: int, t: int, entries):
        client = self.clients[c]
        client.start_task(t, [e.item() for e in entries])
        if self.fedweit:
            self.ledger.log(self.round, t, S2C, SERVER, c, "kb", [e.payload for e in entries])

    def _send_global(self, c: int, t: int, payload):
        self.ledger.log(self.round, t, S2C, SERVER, c, "global" if self.fedweit else "dense", [payload])
        self.clients[c].receive_global(payload.decode())

    def _collect_base(self, c: int, t: int):
        p = self.clients[c].upload_base(self.cfg.kappa_b)
        self.ledger.log(self.round, t, C2S, c, SERVER, "base" if self.fedweit else "dense", [p])
        return p

    def _collect_adaptive(self, c: int, t: int):
        p = self.clients[c].upload_adaptive(self.cfg.kappa_a, task=t)
        self.ledger.log(self.round, t, C2S, c, SERVER, "adaptive", [p])
        return p

    def _train(self, c: int, t: int, r: int):
        self.clients[c].train_round(seeding.derive_rng(self.seed, seeding.TRAIN, c, t, r))

    def _kb_sample(self, c: int, t: int):
        return self.kb.sample(c, self.cfg.kb_sample_size, seeding.derive_rng(self.seed, seeding.KB, c, t))

    # -- synchronous ----------------------------------------------------------

    def run_task_sync(self, t: int):
        cfg = self.cfg
        if not self.federated:
            for c in self.ids:
                self.clients[c].start_task(t)
            for r in range(cfg.rounds):
                self.round += 1
                for c in self.ids:
                    self._train(c, t, r)
            for c in self.ids:
                self.clients[c].finish_task()
            return

        supplementary = self.fedweit and cfg.kb_variant == "supplementary"
        kb_for = {}
        if self.fedweit and not supplementary:
            kb_for = {c: self._kb_sample(c, t) for c in self.ids}
        started: set[int] = set()
        round_kb = None
        for r in range(cfg.rounds):
            self.round += 1
            part = sample_clients(self.ids, cfg.fraction, seeding.derive_rng(self.seed, seeding.SAMPLE, t, r))
            if supplementary and r == 0:
                round_kb = KnowledgeBase()
                if t > 0:
                    for c in part:
                        round_kb.add(c, t - 1, self._collect_adaptive(c, t - 1))
            g = self._global_payload()
            for c in part:
                if c not in started:
                    if supplementary:
                        entries = round_kb.sample(c, cfg.kb_sample_size, seeding.derive_rng(self.seed, seeding.KB, c, t))
                    else:
                        entries = kb_for.get(c, [])
                    self._deliver_kb(c, t, entries)
                    started.add(c)
                self._send_global(c, t, g)
            for c in part:
                self._train(c, t, r)
            uploads = [self._collect_base(c, t) for c in part]
            self.theta_g = aggregate_global(uploads)

        for c in self.ids:
            if c not in started:
                # never sampled during this task: nothing trained, nothing to share
                self.clients[c].start_task(t)
            elif self.fedweit and not supplementary:
                self.kb.add(c, t, self._collect_adaptive(c, t))
            self.clients[c].finish_task()
        self.kb_sizes.append(len(self.kb))

    def run_sync(self) -> RunResult:
        for t in range(self.num_tasks):
            self.run_task_sync(t)
        return self.result()

    # -- asynchronous ---------------------------------------------------------

    def run_async(self) -> RunResult:
        """Each client advances through its own tasks at its own pace.

        ``cfg.budgets[c][t]`` is the number of rounds client ``c`` spends on
        task ``t``. A tick is one global round: every unfinished (sampled)
        client does one local round, the server averages whatever arrived,
        and clients that just used up their budget publish their adaptive
        weights to the kb straight away.
        """
        cfg = self.cfg
        budgets = cfg.budgets or tuple((cfg.rounds,) * self.num_tasks for _ in self.ids)
        if len(budgets) != len(self.ids) or any(len(b) != self.num_tasks for b in budgets):
            raise ValidationError("budgets need one row per client and one entry per task")
        if any(b < 1 for row in budgets for b in row):
            raise ValidationError("every round budget must be >= 1")
        task = {c: 0 for c in self.ids}
        done = {c: 0 for c in self.ids}
        tick = 0
        while any(task[c] < self.num_tasks for c in self.ids):
            tick += 1
            self.round += 1
            active = [c for c in self.ids if task[c] < self.num_tasks]
            part = sample_clients(active, cfg.fraction, seeding.derive_rng(self.seed, seeding.SAMPLE, tick))
            if not self.federated:
                part = active
            g = self._global_payload() if self.federated else None
            for c in part:
                t = task[c]
                if done[c] == 0:
                    entries = self._kb_sample(c, t) if self.fedweit else []
                    self._deliver_kb(c, t, entries)
                if g is not None:
                    self._send_global(c, task[c], g)
            for c in part:
                self._train(c, task[c], done[c])
            if self.federated:
                uploads = [self._collect_base(c, task[c]) for c in part]
                self.theta_g = aggregate_global(uploads)
            for c in part:
                t = task[c]
                done[c] += 1
                if done[c] < budgets[c][t]:
                    continue
                if self.fedweit:
                    self.kb.add(c, t, self._collect_adaptive(c, t))
                self.clients[c].finish_task()
                task[c] += 1
                done[c] = 0
            self.kb_sizes.append(len(self.kb))
        return self.result()

    def run(self) -> RunResult:
        return self.run_async() if self.cfg.mode == "async" else self.run_sync()

    def result(self) -> RunResult:
        return RunResult(self.obj.method, self.seed, {c.id: c.matrix for c in self.clients},
                         self.ledger, list(self.kb_sizes))
