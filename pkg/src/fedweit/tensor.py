"""Minimal reverse-mode differentiation over float64 numpy arrays.

Only the handful of primitives the decomposed MLP needs are provided. A
:class:`GradTape` records every primitive applied to its tensors and
:meth:`GradTape.backward` replays the records in reverse.

    tape = GradTape()
    w = tape.leaf(np.ones((3, 2)))
    loss = tsum(matmul(x, w))
    grads = tape.backward(loss)   # {w: array of shape (3, 2)}
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError, UsageError, ValidationError

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A 0-, 1- or 2-d float64 array, optionally attached to a tape."""

    __slots__ = ("data", "tape", "requires_grad")

    def __init__(self, data, tape: GradTape | None = None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 2:
            raise DimensionError(f"tensors are at most 2-d, got shape {arr.shape}")
        self.data = arr
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class GradTape:
    """Ordered record of primitive ops. Rebuild one per minibatch."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._leaves: list[Tensor] = []

    def __len__(self):
        return len(self._records)

    def leaf(self, data) -> Tensor:
        t = Tensor(data, tape=self, requires_grad=True)
        self._leaves.append(t)
        return t

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves)

    def record(self, out: np.ndarray, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
        t = Tensor(out, tape=self, requires_grad=any(p.requires_grad for p in parents))
        if t.requires_grad:
            self._records.append((t, parents, backward))
        return t

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Return d(loss)/d(leaf) for every leaf created on this tape."""
        if loss.tape is not self:
            raise UsageError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise UsageError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {leaf: grads.get(id(leaf), np.zeros_like(leaf.data)) for leaf in self._leaves}


def constant(data) -> Tensor:
    return Tensor(data)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is None:
            continue
        if tape is not None and t.tape is not tape:
            raise UsageError("operands belong to different tapes")
        tape = t.tape
    return tape


def _emit(out: np.ndarray, parents: tuple[Tensor, ...], backward: Backward) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(out)
    return tape.record(out, parents, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.cols != b.rows:
        raise DimensionError(f"matmul shapes {a.shape} x {b.shape}")
    av, bv = a.data, b.data
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def col_scale(w: Tensor, s: Tensor) -> Tensor:
    """out[i, j] = w[i, j] * s[j]."""
    if w.data.ndim != 2 or s.data.ndim != 1 or s.data.shape[0] != w.cols:
        raise DimensionError(f"col_scale shapes {w.shape} and {s.shape}")
    wv, sv = w.data, s.data
    return _emit(wv * sv, (w, s), lambda g: (g * sv, np.einsum("ij,ij->j", g, wv)))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes {a.shape} and {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes {a.shape} and {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def add_row(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector to every row of ``x``."""
    if x.data.ndim != 2 or bias.data.ndim != 1 or bias.data.shape[0] != x.cols:
        raise DimensionError(f"add_row shapes {x.shape} and {bias.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def weighted_sum(weights: Tensor, items: Sequence[np.ndarray]) -> Tensor:
    """sum_k weights[k] * items[k]; the items are constants."""
    if weights.data.ndim != 1 or weights.data.shape[0] != len(items) or not items:
        raise DimensionError("weighted_sum needs one weight per (non-empty) item list")
    stack = np.stack([np.asarray(it, dtype=np.float64) for it in items])
    out = np.tensordot(weights.data, stack, axes=1)
    return _emit(out, (weights,), lambda g: (np.tensordot(stack, g, axes=g.ndim),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _emit(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def tsum(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_squares(x: Tensor) -> Tensor:
    v = x.data
    return _emit(np.asarray(np.sum(v * v)), (x,), lambda g: (2.0 * g * v,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be 2-d, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if y.shape != (n,):
        raise DimensionError(f"need {n} labels, got shape {y.shape}")
    if n and (y.min() < 0 or y.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, y])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, y] -= 1.0
        return (p * (g / n),)

    return _emit(np.asarray(loss), (logits,), backward)


def finite_diff_check(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Largest relative disagreement between ``analytic`` and central differences.

    Each entry contributes ``|a - d| / max(1, |a|, |d|)``. ``f`` is called on
    perturbed copies of ``params``; the caller's arrays are left untouched.
    """
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    base = f(work)
    if not np.isfinite(base):
        raise NumericError("objective is not finite at the check point")
    worst = 0.0
    for name, arr in work.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != arr.shape:
            raise DimensionError(f"gradient for {name!r} has shape {grad.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f(work)
            flat[i] = orig - step
            fm = f(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"objective not finite near {name}[{i}]")
            num = (fp - fm) / (2.0 * step)
            err = abs(gflat[i] - num) / max(1.0, abs(gflat[i]), abs(num))
            worst = max(worst, err)
    return worst
