"""Facade that wires the schema registry, the three stores, and link resolution.

All services share one DataLayer instance. Access control happens per call
through the registry ACL, so sharing the object is safe; the lock table
gives services named critical sections where a multi-step read-modify-write
has to appear atomic (the ledger fold before a redemption, for instance).
"""

from __future__ import annotations

import threading

from ..errors import QrowdError
from .docstore import DiskDocStore, DocStore, MemoryDocStore
from .filestore import CompressionHook, DiskFileStore, FileStore, MemoryFileStore, quality80_hook
from .links import DataLink
from .registry import SchemaRegistry
from .tsstore import DiskTimeSeriesStore, MemoryTimeSeriesStore, TimeSeriesStore


class LockTable:
    """Named re-entrant locks, created on first use."""

    def __init__(self):
        self._locks: dict[str, threading.RLock] = {}
        self._guard = threading.Lock()

    def lock(self, name: str) -> threading.RLock:
        with self._guard:
            found = self._locks.get(name)
            if found is None:
                found = threading.RLock()
                self._locks[name] = found
            return found


class DataLayer:
    def __init__(
        self,
        mode: str = "memory",
        root: str | None = None,
        migration_window_s: float = 0.2,
        compression_hook: CompressionHook = quality80_hook,
    ):
        if mode not in ("memory", "disk"):
            raise ValueError(f"unknown data layer mode {mode!r}")
        if mode == "disk" and not root:
            raise ValueError("disk mode requires a root directory")
        self.registry = SchemaRegistry(migration_window_s=migration_window_s)
        if mode == "memory":
            self.docs: DocStore = MemoryDocStore(self.registry)
            self.ts: TimeSeriesStore = MemoryTimeSeriesStore(self.registry)
            self.files: FileStore = MemoryFileStore(self.registry, compression_hook)
        else:
            assert root is not None
            self.docs = DiskDocStore(self.registry, root)
            self.ts = DiskTimeSeriesStore(self.registry, root)
            self.files = DiskFileStore(self.registry, root, compression_hook)
        self.locks = LockTable()
        self.docs.link_exists = self.link_exists

    def link_exists(self, link: str | DataLink) -> bool:
        if isinstance(link, str):
            try:
                link = DataLink.parse(link)
            except QrowdError:
                return False
        if link.store == "doc":
            return self.docs.exists(link.collection, link.ref)
        if link.store == "ts":
            try:
                seq = int(link.ref)
            except ValueError:
                return False
            return self.ts.row_at(link.collection, seq) is not None
        if link.store == "file":
            if link.collection != self.files.collection:
                return False
            return self.files.exists(link.ref)
        return False

    def resolve(self, service: str, link: str | DataLink) -> dict:
        """Fetch the record a link points at, one hop, ACL-checked."""
        if isinstance(link, str):
            link = DataLink.parse(link)
        if link.store == "doc":
            return self.docs.get(service, link.collection, link.ref)
        if link.store == "ts":
            self.registry.check_access(service, link.collection, "read")
            try:
                seq = int(link.ref)
            except ValueError:
                raise QrowdError("MalformedLink", f"ts ref {link.ref!r} is not a sequence number")
            row = self.ts.row_at(link.collection, seq)
            if row is None:
                raise QrowdError("NotFound", f"no row {seq} in {link.collection}")
            return row
        if link.store == "file":
            stored = self.files.get(service, link.ref)
            return stored.meta()
        raise QrowdError("MalformedLink", f"unknown store {link.store!r}")
