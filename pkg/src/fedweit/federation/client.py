"""Client-side training loops for the decomposed method and the dense baselines."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..metrics import AccuracyMatrix, eval_after_task
from ..model import DecomposedClientModel, KbItem, LayerSpec, PlainModel
from ..objective import (FisherDiag, ObjectiveConfig, baseline_loss, fedweit_loss, fisher_estimate,
                         validation_loss)
from ..optim import AdamState, LrSchedule, adam_step, schedule_update
from ..tasks import TaskStream
from .payload import PayloadKind, SparsePayload, dense_payload, sparsify_topk
from .server import apply_global


class _ClientBase:
    def __init__(self, stream: TaskStream, obj: ObjectiveConfig, lr: float, lr_floor: float,
                 epochs_per_round: int, batch_size: int):
        self.id = stream.client_id
        self.stream = stream
        self.obj = obj
        self.epochs_per_round = epochs_per_round
        self.batch_size = batch_size
        self.schedule = LrSchedule(initial_lr=lr, floor=lr_floor)
        self.adam = AdamState(lr=lr)
        self.matrix = AccuracyMatrix(len(stream))
        self.task = -1
        self.stopped = False
        self.epochs_trained = 0

    def _begin(self, t: int):
        self.task = t
        self.schedule.reset()
        self.adam = AdamState(lr=self.schedule.lr)
        self.stopped = False

    def _loss(self, x, y):
        raise NotImplementedError

    def _params(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def train_round(self, rng: np.random.Generator):
        """``epochs_per_round`` epochs of minibatch Adam on the current task.

        Once the schedule raises its stop flag the client keeps its parameters
        frozen for the rest of the task.
        """
        task = self.stream.tasks[self.task]
        n = len(task.y_train)
        for _ in range(self.epochs_per_round):
            if self.stopped:
                return
            perm = rng.permutation(n)
            for lo in range(0, n, self.batch_size):
                idx = perm[lo:lo + self.batch_size]
                _, grads = self._loss(task.x_train[idx], task.y_train[idx])
                self.adam.lr = self.schedule.lr
                adam_step(self._params(), grads, self.adam)
            self.epochs_trained += 1
            vl = validation_loss(self.model, self.task, task.x_valid, task.y_valid)
            _, self.stopped = schedule_update(self.schedule, vl)

    def evaluate(self) -> np.ndarray:
        return eval_after_task(self.model, self.stream.tasks, self.task, self.matrix)


class FedWeITClient(_ClientBase):
    def __init__(self, stream: TaskStream, layers: Sequence[LayerSpec], head_classes: int | None,
                 base: Sequence[np.ndarray], bias: Sequence[np.ndarray], obj: ObjectiveConfig,
                 lr: float, lr_floor: float, epochs_per_round: int = 1, batch_size: int = 100):
        super().__init__(stream, obj, lr, lr_floor, epochs_per_round, batch_size)
        self.model = DecomposedClientModel(stream.client_id, layers, head_classes, base, bias)

    def start_task(self, t: int, kb_items: Sequence[KbItem] = ()):
        self._begin(t)
        self.model.allocate_task(kb_items)

    def receive_global(self, theta_g: Sequence[np.ndarray]):
        apply_global(self.model.B + self.model.bias, theta_g)

    def _loss(self, x, y):
        return fedweit_loss(self.model, self.task, x, y, self.obj)

    def _params(self):
        return self.model.trainable()

    def masked_base(self) -> list[np.ndarray]:
        ts = self.model.tasks[self.task]
        return [b * m for b, m in zip(self.model.B, ts.mask)] + [b.copy() for b in self.model.bias]

    def upload_base(self, kappa: float) -> SparsePayload:
        return sparsify_topk(self.masked_base(), kappa, PayloadKind.BASE)

    def upload_adaptive(self, kappa: float, task: int | None = None) -> SparsePayload:
        t = self.task if task is None else task
        return sparsify_topk(self.model.tasks[t].adaptive, kappa, PayloadKind.ADAPTIVE)

    def finish_task(self) -> np.ndarray:
        self.model.finalize_task()
        return self.evaluate()


class BaselineClient(_ClientBase):
    """Plain MLP trained with cross-entropy plus optional proximal / EWC terms."""

    def __init__(self, stream: TaskStream, layers: Sequence[LayerSpec], head_classes: int,
                 weights: Sequence[np.ndarray], biases: Sequence[np.ndarray], obj: ObjectiveConfig,
                 lr: float, lr_floor: float, epochs_per_round: int = 1, batch_size: int = 100,
                 fisher_samples: int = 256, fisher_rng=None):
        super().__init__(stream, obj, lr, lr_floor, epochs_per_round, batch_size)
        self.model = PlainModel(layers, head_classes, weights, biases)
        self.fishers: list[FisherDiag] = []
        self.global_body: list[np.ndarray] | None = None
        self.fisher_samples = fisher_samples
        self.fisher_rng = fisher_rng

    def start_task(self, t: int, kb_items: Sequence[KbItem] = ()):
        self._begin(t)
        self.model.new_task()

    def receive_global(self, theta_g: Sequence[np.ndarray]):
        self.model.set_body(theta_g)
        self.global_body = [np.array(g, dtype=np.float64) for g in theta_g]

    def _loss(self, x, y):
        return baseline_loss(self.model, self.task, x, y, self.obj, self.global_body, self.fishers)

    def _params(self):
        return self.model.trainable(self.task)

    def upload_base(self, kappa: float = 1.0) -> SparsePayload:
        return dense_payload(self.model.body())

    def finish_task(self) -> np.ndarray:
        if self.obj.uses_ewc:
            task = self.stream.tasks[self.task]
            rng = self.fisher_rng(self.task) if self.fisher_rng else None
            self.fishers.append(fisher_estimate(self.model, self.task, task.x_train, task.y_train,
                                                self.fisher_samples, rng))
        return self.evaluate()
