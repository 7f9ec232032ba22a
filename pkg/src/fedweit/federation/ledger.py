"""Append-only log of every transmitted payload."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable

from ..errors import ProtocolError, ValidationError
from .payload import SparsePayload

C2S = "C2S"
S2C = "S2C"
SERVER = "server"
COLUMNS = ("round", "task", "direction", "sender", "receiver", "kind", "nonzeros", "value_bytes", "wire_bytes")


@dataclass(frozen=True)
class CommRecord:
    round: int
    task: int
    direction: str
    sender: str
    receiver: str
    kind: str
    nonzeros: int
    value_bytes: int
    wire_bytes: int


class CommLedger:
    def __init__(self):
        self._records: list[CommRecord] = []

    def __len__(self):
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    @property
    def records(self) -> tuple[CommRecord, ...]:
        return tuple(self._records)

    def append(self, rec: CommRecord):
        if rec.direction not in (C2S, S2C):
            raise ValidationError(f"unknown direction {rec.direction!r}")
        if self._records and rec.round < self._records[-1].round:
            raise ProtocolError(f"round {rec.round} recorded after round {self._records[-1].round}")
        self._records.append(rec)

    def log(self, round_: int, task: int, direction: str, sender, receiver, kind: str,
            payloads: Iterable[SparsePayload]):
        """One record covering ``payloads`` (a kb delivery bundles several)."""
        payloads = list(payloads)
        self.append(CommRecord(
            round=round_, task=task, direction=direction, sender=str(sender), receiver=str(receiver),
            kind=kind,
            nonzeros=sum(p.nonzeros for p in payloads),
            value_bytes=sum(p.value_bytes for p in payloads),
            wire_bytes=sum(p.wire_bytes for p in payloads),
        ))

    def total(self, direction: str | None = None, field: str = "value_bytes", kind: str | None = None) -> int:
        return sum(getattr(r, field) for r in self._records
                   if (direction is None or r.direction == direction) and (kind is None or r.kind == kind))

    def select(self, **match) -> list[CommRecord]:
        return [r for r in self._records if all(getattr(r, k) == v for k, v in match.items())]

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self._records:
                w.writerow(astuple(r))

    @classmethod
    def from_csv(cls, path: str | Path) -> CommLedger:
        ledger = cls()
        types = {f.name: f.type for f in fields(CommRecord)}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != COLUMNS:
                raise ValidationError(f"{path}: ledger columns must be {','.join(COLUMNS)}")
            for row in reader:
                ledger.append(CommRecord(**{k: int(v) if types[k] == "int" else v for k, v in row.items()}))
        return ledger
