"""Training objectives: the decomposed loss and the baseline penalties."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, StateError, ValidationError
from .model import DecomposedClientModel, PlainModel, forward_composed, route_gradients

METHODS = ("fedweit", "fedprox", "fedprox_ewc", "fedavg", "local_ewc")


@dataclass(frozen=True)
class ObjectiveConfig:
    method: str = "fedweit"
    lambda1: float = 0.1
    lambda2: float = 100.0
    mu: float = 5e-3
    lambda_ewc: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("lambda1", "lambda2", "mu", "lambda_ewc"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    @property
    def uses_prox(self) -> bool:
        return self.method in ("fedprox", "fedprox_ewc")

    @property
    def uses_ewc(self) -> bool:
        return self.method in ("fedprox_ewc", "local_ewc")


def l1_penalty(arrays: Sequence[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    value = float(sum(np.abs(a).sum() for a in arrays))
    return value, [np.sign(a) for a in arrays]


def drift_penalty(model: DecomposedClientModel, t: int) -> tuple[float, dict[str, np.ndarray]]:
    """sum_{i<t} ||col_scale(B - B_snap, mask_i) + (A_i - A_i_snap)||^2.

    Gradients are keyed like ``model.trainable()``.
    """
    if t == 0:
        return 0.0, {}
    if model.snapshot_B is None or len(model.boundary_A) < t:
        raise StateError("task boundary snapshot is missing")
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for l in range(len(model.layers)):
        dB = model.B[l] - model.snapshot_B[l]
        gB = np.zeros_like(dB)
        for i in range(t):
            m = model.tasks[i].mask[l]
            r = dB * m + (model.tasks[i].adaptive[l] - model.boundary_A[i][l])
            value += float(np.sum(r * r))
            grads[f"A{i}.{l}"] = 2.0 * r
            gB += 2.0 * r * m
        grads[f"B{l}"] = gB
    return value, grads


def _accumulate(into: dict[str, np.ndarray], extra: dict[str, np.ndarray], weight: float = 1.0):
    for k, g in extra.items():
        if k in into:
            into[k] = into[k] + weight * g
        else:
            into[k] = weight * g


def cross_entropy_grads(model: DecomposedClientModel, t: int, x, y) -> tuple[float, dict[str, np.ndarray]]:
    fw = forward_composed(model, t, x)
    loss = T.softmax_cross_entropy(fw.logits, y)
    g = fw.tape.backward(loss)
    routed = route_gradients([g[th] for th in fw.theta], model, t)
    grads: dict[str, np.ndarray] = {}
    for l in range(len(model.layers)):
        grads[f"B{l}"] = routed["B"][l]
        grads[f"mask{l}"] = routed["mask"][l]
        grads[f"A{t}.{l}"] = routed["adaptive"][l]
        grads[f"bias{l}"] = g[fw.bias[l]]
    if routed["alpha"].size:
        grads["alpha"] = routed["alpha"]
    if fw.head_w is not None:
        grads["head_w"] = g[fw.head_w]
        grads["head_b"] = g[fw.head_b]
    return loss.item(), grads


def fedweit_loss(model: DecomposedClientModel, t: int, x, y, cfg: ObjectiveConfig):
    """Cross-entropy + lambda1 * l1(mask_t, A_1..t) + lambda2 * drift.

    Returns ``(loss, grads)`` with every array of ``model.trainable()`` present
    in ``grads``.
    """
    if cfg.method != "fedweit":
        raise ValidationError("fedweit_loss requires method='fedweit'")
    loss, grads = cross_entropy_grads(model, t, x, y)
    if cfg.lambda1:
        names = [f"mask{l}" for l in range(len(model.layers))]
        arrays = [model.tasks[t].mask[l] for l in range(len(model.layers))]
        for i in range(t + 1):
            for l in range(len(model.layers)):
                names.append(f"A{i}.{l}")
                arrays.append(model.tasks[i].adaptive[l])
        v, sub = l1_penalty(arrays)
        loss += cfg.lambda1 * v
        _accumulate(grads, dict(zip(names, sub)), cfg.lambda1)
    if cfg.lambda2 and t > 0:
        v, sub = drift_penalty(model, t)
        loss += cfg.lambda2 * v
        _accumulate(grads, sub, cfg.lambda2)
    params = model.trainable()
    for k, p in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(p)
    return loss, grads


def fedprox_penalty(theta: Sequence[np.ndarray], global_theta: Sequence[np.ndarray], mu: float):
    """(mu / 2) * ||theta - global||^2 and its gradient."""
    if len(theta) != len(global_theta):
        raise DimensionError("parameter lists differ in length")
    value = 0.0
    grads = []
    for a, b in zip(theta, global_theta):
        if np.shape(a) != np.shape(b):
            raise DimensionError(f"shapes {np.shape(a)} and {np.shape(b)} differ")
        d = np.asarray(a, dtype=np.float64) - b
        value += float(np.sum(d * d))
        grads.append(mu * d)
    return 0.5 * mu * value, grads


@dataclass(frozen=True)
class FisherDiag:
    fisher: tuple[np.ndarray, ...]
    anchor: tuple[np.ndarray, ...]

    def __post_init__(self):
        for f, a in zip(self.fisher, self.anchor):
            if f.shape != a.shape:
                raise DimensionError("fisher and anchor shapes differ")
            if np.any(f < 0):
                raise ValidationError("fisher entries must be >= 0")


def fisher_estimate(model: PlainModel, t: int, x, y, max_samples: int = 256,
                    rng: np.random.Generator | None = None) -> FisherDiag:
    """Empirical diagonal Fisher of the body parameters on task ``t`` data."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if len(x) == 0:
        raise ValidationError("fisher estimate needs at least one sample")
    idx = np.arange(len(x))
    if len(x) > max_samples:
        idx = (rng or np.random.default_rng(0)).choice(len(x), size=max_samples, replace=False)
    n_layers = len(model.layers)
    names = [f"W{l}" for l in range(n_layers)] + [f"b{l}" for l in range(n_layers)]
    acc = {k: np.zeros_like(v) for k, v in model.trainable(t).items() if k in names}
    for i in idx:
        tape, logits, leaves = model.forward_taped(t, x[i:i + 1])
        g = tape.backward(T.softmax_cross_entropy(logits, y[i:i + 1]))
        for k in names:
            acc[k] += g[leaves[k]] ** 2
    fisher = tuple(acc[k] / len(idx) for k in names)
    return FisherDiag(fisher, tuple(a.copy() for a in model.body()))


def ewc_penalty(params: Sequence[np.ndarray], fishers: Sequence[FisherDiag], lam: float):
    """lam * sum over past tasks of sum_i F_i (theta_i - anchor_i)^2."""
    value = 0.0
    grads = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
    for fd in fishers:
        for j, (p, f, a) in enumerate(zip(params, fd.fisher, fd.anchor)):
            d = p - a
            value += float(np.sum(f * d * d))
            grads[j] += 2.0 * lam * f * d
    return lam * value, grads


def baseline_loss(model: PlainModel, t: int, x, y, cfg: ObjectiveConfig,
                  global_body: Sequence[np.ndarray] | None = None,
                  fishers: Sequence[FisherDiag] = ()):
    """Cross-entropy plus whatever proximal / EWC terms ``cfg.method`` adds."""
    if cfg.method == "fedweit":
        raise ValidationError("baseline_loss does not handle method='fedweit'")
    tape, logits, leaves = model.forward_taped(t, x)
    ce = T.softmax_cross_entropy(logits, y)
    g = tape.backward(ce)
    loss = ce.item()
    grads = {k: g[v] for k, v in leaves.items()}
    n = len(model.layers)
    body_names = [f"W{l}" for l in range(n)] + [f"b{l}" for l in range(n)]
    body = model.body()
    if cfg.uses_prox and global_body is not None and cfg.mu:
        v, sub = fedprox_penalty(body, global_body, cfg.mu)
        loss += v
        _accumulate(grads, dict(zip(body_names, sub)))
    if cfg.uses_ewc and fishers and cfg.lambda_ewc:
        v, sub = ewc_penalty(body, fishers, cfg.lambda_ewc)
        loss += v
        _accumulate(grads, dict(zip(body_names, sub)))
    return loss, grads


def validation_loss(model, t: int, x, y) -> float:
    """Plain cross-entropy of task ``t`` for either model type."""
    logits = model.forward(t, x)
    y = np.asarray(y, dtype=np.int64)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))
