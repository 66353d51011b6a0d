"""Document store: last-writer-wins JSON documents per (collection, id).

Writes are serialized per store and validated against the active schema;
reads are concurrent. The disk backend keeps one JSON file per document
(atomic replace), the memory backend a plain dict — both pass the same
contract suite.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
import threading

from ..core import canonical_json, from_json
from ..errors import QrowdError
from .registry import SchemaRegistry


def _encode_key(doc_id: str) -> str:
    return base64.urlsafe_b64encode(doc_id.encode("utf-8")).decode("ascii").rstrip("=")


def _decode_key(name: str) -> str:
    padded = name + "=" * (-len(name) % 4)
    return base64.urlsafe_b64decode(padded.encode("ascii")).decode("utf-8")


class DocStore:
    def __init__(self, registry: SchemaRegistry):
        self.registry = registry
        self.link_exists = None  # wired by the DataLayer after construction
        self._write_lock = threading.Lock()

    # storage primitives -------------------------------------------------
    def _load(self, collection: str, doc_id: str) -> dict | None:
        raise NotImplementedError

    def _store(self, collection: str, doc_id: str, doc: dict) -> None:
        raise NotImplementedError

    def _remove(self, collection: str, doc_id: str) -> None:
        raise NotImplementedError

    def _ids(self, collection: str) -> list[str]:
        raise NotImplementedError

    # contract surface ----------------------------------------------------
    def put(self, service: str, collection: str, doc_id: str, doc: dict) -> None:
        self.registry.check_access(service, collection, "write")
        self.registry.check_writable(collection)
        self.registry.validate_doc(collection, doc, self.link_exists)
        with self._write_lock:
            self._store(collection, doc_id, doc)

    def put_if_absent(self, service: str, collection: str, doc_id: str, doc: dict) -> bool:
        """Atomic claim: returns False (and writes nothing) if the id exists."""
        self.registry.check_access(service, collection, "write")
        self.registry.check_writable(collection)
        self.registry.validate_doc(collection, doc, self.link_exists)
        with self._write_lock:
            if self._load(collection, doc_id) is not None:
                return False
            self._store(collection, doc_id, doc)
            return True

    def get(self, service: str, collection: str, doc_id: str) -> dict:
        self.registry.check_access(service, collection, "read")
        doc = self._load(collection, doc_id)
        if doc is None:
            raise QrowdError("NotFound", f"{collection}/{doc_id} not found")
        return doc

    def get_or_none(self, service: str, collection: str, doc_id: str) -> dict | None:
        self.registry.check_access(service, collection, "read")
        return self._load(collection, doc_id)

    def delete(self, service: str, collection: str, doc_id: str) -> None:
        self.registry.check_access(service, collection, "write")
        self.registry.check_writable(collection)
        with self._write_lock:
            self._remove(collection, doc_id)

    def scan(self, service: str, collection: str) -> list[tuple[str, dict]]:
        """All (id, doc) pairs, id ascending. Desk-scale; reports rely on it."""
        self.registry.check_access(service, collection, "read")
        out = []
        for doc_id in sorted(self._ids(collection)):
            doc = self._load(collection, doc_id)
            if doc is not None:
                out.append((doc_id, doc))
        return out

    def exists(self, collection: str, doc_id: str) -> bool:
        return self._load(collection, doc_id) is not None


class MemoryDocStore(DocStore):
    def __init__(self, registry: SchemaRegistry):
        super().__init__(registry)
        self._data: dict[str, dict[str, bytes]] = {}

    def _load(self, collection, doc_id):
        raw = self._data.get(collection, {}).get(doc_id)
        return None if raw is None else from_json(raw)

    def _store(self, collection, doc_id, doc):
        self._data.setdefault(collection, {})[doc_id] = canonical_json(doc)

    def _remove(self, collection, doc_id):
        self._data.get(collection, {}).pop(doc_id, None)

    def _ids(self, collection):
        return list(self._data.get(collection, {}))


class DiskDocStore(DocStore):
    def __init__(self, registry: SchemaRegistry, root: str):
        super().__init__(registry)
        self.root = os.path.join(root, "doc")
        os.makedirs(self.root, exist_ok=True)

    def _path(self, collection: str, doc_id: str) -> str:
        return os.path.join(self.root, collection, _encode_key(doc_id) + ".json")

    def _load(self, collection, doc_id):
        try:
            with open(self._path(collection, doc_id), "rb") as fh:
                return from_json(fh.read())
        except FileNotFoundError:
            return None

    def _store(self, collection, doc_id, doc):
        path = self._path(collection, doc_id)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(canonical_json(doc))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _remove(self, collection, doc_id):
        try:
            os.unlink(self._path(collection, doc_id))
        except FileNotFoundError:
            pass

    def _ids(self, collection):
        folder = os.path.join(self.root, collection)
        if not os.path.isdir(folder):
            return []
        return [_decode_key(name[: -len(".json")]) for name in os.listdir(folder) if name.endswith(".json")]
