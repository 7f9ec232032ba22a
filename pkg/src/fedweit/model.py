"""Per-client decomposed MLP and the plain MLP used by the baselines.

A decomposed layer's effective weight for task ``t`` is

    theta = col_scale(B, mask[t]) + A[t] + sum_k alpha[t][k] * kb[t][k]

where ``B`` is shared by all of the client's tasks, ``mask[t]`` scales the
output columns of ``B``, ``A[t]`` is a sparse task-specific delta and the
``kb[t]`` items are read-only adaptive weights received from other clients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, StateError, ValidationError


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValidationError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.in_dim, self.out_dim)


def chain(*dims: int) -> list[LayerSpec]:
    """chain(32, 64, 64) -> [32x64, 64x64]."""
    if len(dims) < 2:
        raise ValidationError("need at least one layer")
    return [LayerSpec(a, b) for a, b in zip(dims[:-1], dims[1:])]


def _check_chain(layers: Sequence[LayerSpec]):
    if not layers:
        raise ValidationError("need at least one layer")
    for a, b in zip(layers[:-1], layers[1:]):
        if a.out_dim != b.in_dim:
            raise ValidationError(f"layer {a.shape} does not feed {b.shape}")


def init_body(layers: Sequence[LayerSpec], rng: np.random.Generator):
    """He-normal weights and zero biases."""
    weights = [rng.normal(0.0, np.sqrt(2.0 / l.in_dim), size=l.shape) for l in layers]
    biases = [np.zeros(l.out_dim) for l in layers]
    return weights, biases


@dataclass(frozen=True)
class KbItem:
    """Adaptive weights of a finished task on another client (read-only)."""

    origin_client: int
    origin_task: int
    tensors: tuple[np.ndarray, ...]

    def __post_init__(self):
        frozen = []
        for t in self.tensors:
            a = np.array(t, dtype=np.float64, copy=True)
            a.setflags(write=False)
            frozen.append(a)
        object.__setattr__(self, "tensors", tuple(frozen))


@dataclass
class TaskState:
    mask: list[np.ndarray]
    adaptive: list[np.ndarray]
    alpha: np.ndarray
    kb: list[KbItem]
    head_w: np.ndarray | None = None
    head_b: np.ndarray | None = None
    finalized: bool = False


@dataclass
class ComposedForward:
    tape: T.GradTape
    logits: T.Tensor
    theta: list[T.Tensor]
    bias: list[T.Tensor]
    head_w: T.Tensor | None
    head_b: T.Tensor | None


class DecomposedClientModel:
    """Base weights, per-task masks/adaptives/attention, and per-task heads.

    ``head_classes=None`` makes the last decomposed layer the output layer.
    Otherwise every decomposed layer is followed by relu and each task owns a
    dense ``out_dim x head_classes`` classifier that never leaves the client.
    """

    def __init__(self, client_id: int, layers: Sequence[LayerSpec], head_classes: int | None = None,
                 base: Sequence[np.ndarray] | None = None, bias: Sequence[np.ndarray] | None = None):
        _check_chain(layers)
        self.client_id = client_id
        self.layers = list(layers)
        self.head_classes = head_classes
        if base is None:
            base = [np.zeros(l.shape) for l in self.layers]
        if bias is None:
            bias = [np.zeros(l.out_dim) for l in self.layers]
        self.B = [np.array(b, dtype=np.float64) for b in base]
        self.bias = [np.array(b, dtype=np.float64) for b in bias]
        for l, b, v in zip(self.layers, self.B, self.bias):
            if b.shape != l.shape or v.shape != (l.out_dim,):
                raise DimensionError(f"parameters do not match layer {l.shape}")
        self.tasks: list[TaskState] = []
        self.snapshot_B: list[np.ndarray] | None = None
        self.boundary_A: list[list[np.ndarray]] = []

    @property
    def current_task(self) -> int:
        return len(self.tasks) - 1

    @property
    def in_task(self) -> bool:
        return bool(self.tasks) and not self.tasks[-1].finalized

    def allocate_task(self, kb_items: Sequence[KbItem]) -> int:
        if self.in_task:
            raise StateError("previous task has not been finalized")
        for item in kb_items:
            if item.origin_client == self.client_id:
                raise ValidationError("a client cannot attend to its own adaptive weights")
            if [t.shape for t in item.tensors] != [l.shape for l in self.layers]:
                raise DimensionError("kb item does not match the layer layout")
        k = len(kb_items)
        state = TaskState(
            mask=[np.ones(l.out_dim) for l in self.layers],
            adaptive=[np.zeros(l.shape) for l in self.layers],
            alpha=np.full(k, 1.0 / k) if k else np.zeros(0),
            kb=list(kb_items),
        )
        if self.head_classes is not None:
            state.head_w = np.zeros((self.layers[-1].out_dim, self.head_classes))
            state.head_b = np.zeros(self.head_classes)
        self.snapshot_B = [b.copy() for b in self.B]
        self.boundary_A = [[a.copy() for a in ts.adaptive] for ts in self.tasks]
        self.tasks.append(state)
        return self.current_task

    def finalize_task(self):
        if not self.in_task:
            raise StateError("no task in progress")
        ts = self.tasks[-1]
        for m in ts.mask:
            m.setflags(write=False)
        ts.finalized = True

    def _task(self, t: int) -> TaskState:
        if t < 0 or t >= len(self.tasks):
            raise StateError(f"task {t} has not been allocated")
        return self.tasks[t]

    def compose(self, t: int) -> list[np.ndarray]:
        ts = self._task(t)
        out = []
        for l in range(len(self.layers)):
            theta = self.B[l] * ts.mask[l] + ts.adaptive[l]
            for a, item in zip(ts.alpha, ts.kb):
                theta = theta + a * item.tensors[l]
            out.append(theta)
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        """Arrays optimized during the current task, by name (shared references)."""
        if not self.in_task:
            raise StateError("no task in progress")
        t = self.current_task
        ts = self.tasks[t]
        params = {}
        for l in range(len(self.layers)):
            params[f"B{l}"] = self.B[l]
            params[f"bias{l}"] = self.bias[l]
            params[f"mask{l}"] = ts.mask[l]
            for i in range(t + 1):
                params[f"A{i}.{l}"] = self.tasks[i].adaptive[l]
        if ts.alpha.size:
            params["alpha"] = ts.alpha
        if ts.head_w is not None:
            params["head_w"] = ts.head_w
            params["head_b"] = ts.head_b
        return params

    def forward(self, t: int, x: np.ndarray) -> np.ndarray:
        """Untaped logits for task ``t``."""
        ts = self._task(t)
        h = np.asarray(x, dtype=np.float64)
        thetas = self.compose(t)
        last = len(thetas) - 1
        for l, theta in enumerate(thetas):
            h = h @ theta + self.bias[l]
            if l < last or ts.head_w is not None:
                h = np.maximum(h, 0.0)
        if ts.head_w is not None:
            h = h @ ts.head_w + ts.head_b
        return h


def forward_composed(model: DecomposedClientModel, t: int, x: np.ndarray) -> ComposedForward:
    """Logits for task ``t`` on a fresh tape whose leaves are the composed weights."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layers[0].in_dim:
        raise DimensionError(f"batch shape {x.shape} does not match input dim {model.layers[0].in_dim}")
    ts = model._task(t)
    tape = T.GradTape()
    thetas = [tape.leaf(th) for th in model.compose(t)]
    biases = [tape.leaf(b) for b in model.bias]
    h = T.constant(x)
    last = len(thetas) - 1
    for l, (th, b) in enumerate(zip(thetas, biases)):
        h = T.add_row(T.matmul(h, th), b)
        if l < last or ts.head_w is not None:
            h = T.relu(h)
    hw = hb = None
    if ts.head_w is not None:
        hw, hb = tape.leaf(ts.head_w), tape.leaf(ts.head_b)
        h = T.add_row(T.matmul(h, hw), hb)
    return ComposedForward(tape, h, thetas, biases, hw, hb)


def route_gradients(dtheta: Sequence[np.ndarray], model: DecomposedClientModel, t: int) -> dict:
    """Chain rule from composed-weight gradients to B, mask[t], A[t] and alpha[t].

    kb items are constants and receive nothing.
    """
    ts = model._task(t)
    if len(dtheta) != len(model.layers):
        raise DimensionError("one gradient per layer is required")
    dB, dm, dA = [], [], []
    dalpha = np.zeros(len(ts.kb))
    for l, g in enumerate(dtheta):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != model.layers[l].shape:
            raise DimensionError(f"gradient shape {g.shape} != layer {model.layers[l].shape}")
        dA.append(g.copy())
        dB.append(g * ts.mask[l])
        dm.append(np.einsum("ij,ij->j", g, model.B[l]))
        for k, item in enumerate(ts.kb):
            dalpha[k] += np.vdot(g, item.tensors[l])
    return {"B": dB, "mask": dm, "adaptive": dA, "alpha": dalpha}


class PlainModel:
    """Undecomposed MLP body shared across tasks plus per-task heads (baselines)."""

    def __init__(self, layers: Sequence[LayerSpec], head_classes: int,
                 weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        _check_chain(layers)
        self.layers = list(layers)
        self.head_classes = head_classes
        self.W = [np.array(w, dtype=np.float64) for w in weights]
        self.b = [np.array(b, dtype=np.float64) for b in biases]
        self.heads: list[tuple[np.ndarray, np.ndarray]] = []

    def body(self) -> list[np.ndarray]:
        """Federated parameters in wire order: weights then biases."""
        return self.W + self.b

    def set_body(self, arrays: Sequence[np.ndarray]):
        n = len(self.layers)
        for l in range(n):
            self.W[l][...] = arrays[l]
            self.b[l][...] = arrays[n + l]

    def new_task(self) -> int:
        d = self.layers[-1].out_dim
        self.heads.append((np.zeros((d, self.head_classes)), np.zeros(self.head_classes)))
        return len(self.heads) - 1

    def trainable(self, t: int) -> dict[str, np.ndarray]:
        params = {}
        for l in range(len(self.layers)):
            params[f"W{l}"] = self.W[l]
            params[f"b{l}"] = self.b[l]
        params["head_w"], params["head_b"] = self.heads[t]
        return params

    def forward(self, t: int, x: np.ndarray) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for w, b in zip(self.W, self.b):
            h = np.maximum(h @ w + b, 0.0)
        hw, hb = self.heads[t]
        return h @ hw + hb

    def forward_taped(self, t: int, x: np.ndarray, params: dict[str, np.ndarray] | None = None):
        """Returns (tape, logits, leaves-by-name)."""
        params = self.trainable(t) if params is None else params
        tape = T.GradTape()
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        h = T.constant(np.asarray(x, dtype=np.float64))
        for l in range(len(self.layers)):
            h = T.relu(T.add_row(T.matmul(h, leaves[f"W{l}"]), leaves[f"b{l}"]))
        logits = T.add_row(T.matmul(h, leaves["head_w"]), leaves["head_b"])
        return tape, logits, leaves
