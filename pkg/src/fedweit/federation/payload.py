"""Sparse parameter payloads, top-k selection and the binary wire format.

Wire layout (little-endian)::

    kind:u8  count:u16  nnz[0]:u32 ... nnz[count-1]:u32
    then per tensor: nnz[i] pairs of (flat_index:u32, value:f32)

Dense payloads use the same header but carry bare f32 values, so they pay
no index overhead.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from ..errors import DimensionError, ProtocolError, ValidationError

VALUE_BYTES = 4
INDEX_BYTES = 4
_PAIR = np.dtype([("index", "<u4"), ("value", "<f4")])


class PayloadKind(enum.IntEnum):
    BASE = 1        # masked base B*m (+ biases), client -> server
    ADAPTIVE = 2    # task-adaptive A, client -> server
    GLOBAL = 3      # aggregated theta_G, server -> client
    KB = 4          # one knowledge-base item inside a kb delivery
    DENSE = 5       # full parameters, baselines


@dataclass(frozen=True)
class SparsePayload:
    kind: PayloadKind
    shapes: tuple[tuple[int, ...], ...]
    indices: tuple[np.ndarray, ...]
    values: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (len(self.shapes) == len(self.indices) == len(self.values)):
            raise DimensionError("shapes, indices and values must align")
        for shape, idx, val in zip(self.shapes, self.indices, self.values):
            size = int(np.prod(shape))
            if idx.shape != val.shape or idx.ndim != 1:
                raise DimensionError("index and value arrays must be 1-d and equal length")
            if idx.size and (idx[-1] >= size or np.any(np.diff(idx.astype(np.int64)) <= 0)):
                raise ValidationError("indices must be strictly increasing and in range")

    @property
    def nonzeros(self) -> int:
        return int(sum(v.size for v in self.values))

    @property
    def size(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes))

    @property
    def value_bytes(self) -> int:
        return VALUE_BYTES * self.nonzeros

    @property
    def wire_bytes(self) -> int:
        header = 1 + 2 + 4 * len(self.shapes)
        if self.kind == PayloadKind.DENSE:
            return header + VALUE_BYTES * self.size
        return header + (VALUE_BYTES + INDEX_BYTES) * self.nonzeros

    def decode(self) -> list[np.ndarray]:
        out = []
        for shape, idx, val in zip(self.shapes, self.indices, self.values):
            flat = np.zeros(int(np.prod(shape)))
            flat[idx] = val
            out.append(flat.reshape(shape))
        return out

    def __eq__(self, other):
        if not isinstance(other, SparsePayload):
            return NotImplemented
        return (self.kind == other.kind and self.shapes == other.shapes
                and all(np.array_equal(a, b) for a, b in zip(self.indices, other.indices))
                and all(np.array_equal(a.view(np.uint32), b.view(np.uint32))
                        for a, b in zip(self.values, other.values)))

    __hash__ = None


def topk_count(kappa: float, n: int) -> int:
    """ceil(kappa * n), computed on the decimal value of kappa."""
    if not 0 < kappa <= 1:
        raise ValidationError(f"kappa must lie in (0, 1], got {kappa}")
    return min(n, math.ceil(Fraction(str(kappa)) * n))


def _from_flat(kind, shapes, keep: np.ndarray, flat: np.ndarray) -> SparsePayload:
    keep = np.sort(keep)
    vals = flat[keep].astype("<f4")
    nz = vals != 0
    keep, vals = keep[nz], vals[nz]
    bounds = np.cumsum([0] + [int(np.prod(s)) for s in shapes])
    idx_parts, val_parts = [], []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        a, b = np.searchsorted(keep, [lo, hi])
        idx_parts.append((keep[a:b] - lo).astype("<u4"))
        val_parts.append(vals[a:b])
    return SparsePayload(PayloadKind(kind), tuple(tuple(s) for s in shapes),
                         tuple(idx_parts), tuple(val_parts))


def sparsify_topk(tensors: Sequence[np.ndarray], kappa: float,
                  kind: PayloadKind = PayloadKind.BASE) -> SparsePayload:
    """Keep the ceil(kappa*N) largest-magnitude entries across all tensors.

    Ties go to the lower flat index (tensors concatenated in order). Entries
    that are exactly zero after the f32 cast are never transmitted.
    """
    shapes = [np.shape(t) for t in tensors]
    flat = np.concatenate([np.asarray(t, dtype=np.float64).ravel() for t in tensors]) if tensors else np.zeros(0)
    k = topk_count(kappa, flat.size) if flat.size else 0
    if k >= flat.size:
        keep = np.arange(flat.size)
    else:
        keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    return _from_flat(kind, shapes, keep, flat)


def dense_payload(tensors: Sequence[np.ndarray]) -> SparsePayload:
    """Every entry, zeros included, for dense baselines."""
    shapes = [np.shape(t) for t in tensors]
    idx, vals = [], []
    for t in tensors:
        flat = np.asarray(t, dtype=np.float64).ravel()
        idx.append(np.arange(flat.size, dtype="<u4"))
        vals.append(flat.astype("<f4"))
    return SparsePayload(PayloadKind.DENSE, tuple(tuple(s) for s in shapes), tuple(idx), tuple(vals))


def serialize(payload: SparsePayload) -> bytes:
    parts = [struct.pack("<BH", int(payload.kind), len(payload.shapes))]
    parts.append(np.array([v.size for v in payload.values], dtype="<u4").tobytes())
    for idx, val in zip(payload.indices, payload.values):
        if payload.kind == PayloadKind.DENSE:
            parts.append(val.astype("<f4").tobytes())
        else:
            pairs = np.empty(idx.size, dtype=_PAIR)
            pairs["index"] = idx
            pairs["value"] = val
            parts.append(pairs.tobytes())
    return b"".join(parts)


def deserialize(data: bytes, shapes: Sequence[tuple[int, ...]]) -> SparsePayload:
    """Inverse of :func:`serialize`; tensor shapes are known to the receiver."""
    if len(data) < 3:
        raise ProtocolError("payload truncated before header")
    kind, count = struct.unpack_from("<BH", data, 0)
    if count != len(shapes):
        raise ProtocolError(f"payload has {count} tensors, receiver expects {len(shapes)}")
    off = 3
    nnz = np.frombuffer(data, dtype="<u4", count=count, offset=off)
    off += 4 * count
    idx_parts, val_parts = [], []
    for n, shape in zip(nnz, shapes):
        n = int(n)
        if kind == PayloadKind.DENSE:
            if n != int(np.prod(shape)):
                raise ProtocolError("dense payload size does not match shape")
            val = np.frombuffer(data, dtype="<f4", count=n, offset=off).copy()
            idx = np.arange(n, dtype="<u4")
            off += 4 * n
        else:
            pairs = np.frombuffer(data, dtype=_PAIR, count=n, offset=off)
            idx, val = pairs["index"].copy(), pairs["value"].copy()
            off += _PAIR.itemsize * n
        idx_parts.append(idx)
        val_parts.append(val)
    if off != len(data):
        raise ProtocolError(f"{len(data) - off} trailing bytes in payload")
    return SparsePayload(PayloadKind(kind), tuple(tuple(s) for s in shapes), tuple(idx_parts), tuple(val_parts))
