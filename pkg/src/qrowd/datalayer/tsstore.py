"""Append-only time-series store.

Rows are documents carrying an integer millisecond timestamp in "at". Each
append is assigned a per-collection sequence number which fixes insertion
order; range queries return rows with fromTs <= at < toTs matching an
equality filter, ordered by (at, seq). The disk backend is newline-delimited
JSON per collection.
"""

from __future__ import annotations

import os
import threading

from ..core import canonical_json, from_json
from ..errors import QrowdError
from .registry import SchemaRegistry


def _check_row(row: object) -> dict:
    if not isinstance(row, dict):
        raise QrowdError("MalformedRow", "row must be an object")
    at = row.get("at")
    if not isinstance(at, int) or isinstance(at, bool) or at < 0:
        raise QrowdError("MalformedRow", "row must carry a non-negative integer 'at' timestamp")
    return row


def _matches(row: dict, flt: dict | None) -> bool:
    if not flt:
        return True
    return all(row.get(k) == v for k, v in flt.items())


class TimeSeriesStore:
    def __init__(self, registry: SchemaRegistry):
        self.registry = registry
        self._write_lock = threading.Lock()

    def _append_row(self, collection: str, seq: int, row: dict) -> None:
        raise NotImplementedError

    def _rows(self, collection: str) -> list[tuple[int, dict]]:
        raise NotImplementedError

    def _next_seq(self, collection: str) -> int:
        raise NotImplementedError

    def append(self, service: str, collection: str, row: dict) -> int:
        """Append one row; returns its sequence number."""
        self.registry.check_access(service, collection, "write")
        self.registry.check_writable(collection)
        _check_row(row)
        self.registry.validate_doc(collection, row)
        with self._write_lock:
            seq = self._next_seq(collection)
            self._append_row(collection, seq, row)
            return seq

    def range(self, service: str, collection: str, from_ts: int, to_ts: int,
              flt: dict | None = None) -> list[dict]:
        self.registry.check_access(service, collection, "read")
        hits = [
            (row["at"], seq, row)
            for seq, row in self._rows(collection)
            if from_ts <= row["at"] < to_ts and _matches(row, flt)
        ]
        hits.sort(key=lambda t: (t[0], t[1]))
        return [row for _, _, row in hits]

    def scan(self, service: str, collection: str, flt: dict | None = None) -> list[dict]:
        return self.range(service, collection, 0, 2**62, flt)

    def row_at(self, collection: str, seq: int) -> dict | None:
        for s, row in self._rows(collection):
            if s == seq:
                return row
        return None


class MemoryTimeSeriesStore(TimeSeriesStore):
    def __init__(self, registry: SchemaRegistry):
        super().__init__(registry)
        self._data: dict[str, list[tuple[int, bytes]]] = {}

    def _append_row(self, collection, seq, row):
        self._data.setdefault(collection, []).append((seq, canonical_json(row)))

    def _rows(self, collection):
        return [(seq, from_json(raw)) for seq, raw in self._data.get(collection, [])]

    def _next_seq(self, collection):
        return len(self._data.get(collection, [])) + 1


class DiskTimeSeriesStore(TimeSeriesStore):
    def __init__(self, registry: SchemaRegistry, root: str):
        super().__init__(registry)
        self.root = os.path.join(root, "ts")
        os.makedirs(self.root, exist_ok=True)
        self._counts: dict[str, int] = {}

    def _path(self, collection: str) -> str:
        return os.path.join(self.root, collection + ".ndjson")

    def _append_row(self, collection, seq, row):
        line = canonical_json({"seq": seq, "row": row}) + b"\n"
        with open(self._path(collection), "ab") as fh:
            fh.write(line)
        self._counts[collection] = seq

    def _rows(self, collection):
        try:
            with open(self._path(collection), "rb") as fh:
                out = []
                for line in fh:
                    line = line.strip()
                    if line:
                        entry = from_json(line)
                        out.append((entry["seq"], entry["row"]))
                return out
        except FileNotFoundError:
            return []

    def _next_seq(self, collection):
        if collection not in self._counts:
            rows = self._rows(collection)
            self._counts[collection] = rows[-1][0] if rows else 0
        return self._counts[collection] + 1
