"""Schema registry with service-level access control.

Each collection has a versioned descriptor: field types, required flags,
and an ACL mapping service names to read/write grants. Grants are explicit
and everything else is denied, which is what enforces the bounded context
between services sharing the data layer.

Activating a new version of an existing collection opens a bounded
migration window during which writes to that collection are rejected with
SchemaMigrating; this is the deliberate, observable downtime cost of the
shared-schema approach. Creating a collection (version 1) activates
immediately.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from ..errors import QrowdError
from .links import DataLink, is_link

FIELD_TYPES = ("string", "int", "float", "bool", "timestamp", "link", "binaryRef", "list", "map")

DEFAULT_MIGRATION_WINDOW_S = 0.2


@dataclass
class SchemaDescriptor:
    collection: str
    version: int
    fields: dict[str, dict]
    acl: dict[str, dict] = field(default_factory=dict)

    def validate_shape(self) -> None:
        if not self.collection or not isinstance(self.collection, str):
            raise QrowdError("MalformedSchema", "collection name required")
        if not isinstance(self.version, int) or isinstance(self.version, bool) or self.version < 1:
            raise QrowdError("MalformedSchema", "version must be an integer >= 1")
        if not isinstance(self.fields, dict):
            raise QrowdError("MalformedSchema", "fields must be a map")
        for name, spec in self.fields.items():
            if not isinstance(spec, dict) or spec.get("type") not in FIELD_TYPES:
                raise QrowdError("MalformedSchema", f"field {name!r} has unknown type {spec!r}")
            if not isinstance(spec.get("required", False), bool):
                raise QrowdError("MalformedSchema", f"field {name!r} required flag must be bool")
        if not isinstance(self.acl, dict):
            raise QrowdError("MalformedSchema", "acl must be a map")
        for service, grant in self.acl.items():
            if not isinstance(grant, dict):
                raise QrowdError("MalformedSchema", f"acl for {service!r} must be a map")
            if not isinstance(grant.get("read", False), bool) or not isinstance(grant.get("write", False), bool):
                raise QrowdError("MalformedSchema", f"acl for {service!r} must have bool read/write")

    def to_doc(self) -> dict:
        return {
            "collection": self.collection,
            "version": self.version,
            "fields": self.fields,
            "acl": self.acl,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "SchemaDescriptor":
        desc = cls(
            collection=doc.get("collection", ""),
            version=doc.get("version", 0),
            fields=doc.get("fields", {}),
            acl=doc.get("acl", {}),
        )
        desc.validate_shape()
        return desc


class SchemaRegistry:
    """Versioned collection schemas plus the ACL gate every store consults."""

    def __init__(self, migration_window_s: float = DEFAULT_MIGRATION_WINDOW_S,
                 admins: tuple[str, ...] = ("platform",)):
        self._lock = threading.Lock()
        self._active: dict[str, SchemaDescriptor] = {}
        self._history: dict[str, list[SchemaDescriptor]] = {}
        self._migrating_until: dict[str, float] = {}
        self.migration_window_s = migration_window_s
        self.admins = set(admins)

    def register_schema(self, desc: SchemaDescriptor, requester: str) -> int:
        if requester not in self.admins:
            raise QrowdError("AccessDenied", f"service {requester!r} may not register schemas")
        desc.validate_shape()
        with self._lock:
            current = self._active.get(desc.collection)
            expected = 1 if current is None else current.version + 1
            if desc.version != expected:
                raise QrowdError(
                    "VersionConflict",
                    f"collection {desc.collection!r} expects version {expected}, got {desc.version}",
                )
            self._active[desc.collection] = desc
            self._history.setdefault(desc.collection, []).append(desc)
            if desc.version > 1 and self.migration_window_s > 0:
                self._migrating_until[desc.collection] = time.monotonic() + self.migration_window_s
        return desc.version

    def active(self, collection: str) -> SchemaDescriptor | None:
        with self._lock:
            return self._active.get(collection)

    def collections(self) -> list[str]:
        with self._lock:
            return sorted(self._active)

    def status(self, collection: str) -> str:
        with self._lock:
            if collection not in self._active:
                return "unknown"
            until = self._migrating_until.get(collection)
            if until is not None and time.monotonic() < until:
                return "migrating"
            return "active"

    def check_access(self, service: str, collection: str, verb: str) -> SchemaDescriptor:
        desc = self.active(collection)
        if desc is None or not desc.acl.get(service, {}).get(verb, False):
            raise QrowdError("AccessDenied", f"service {service!r} may not {verb} {collection!r}")
        return desc

    def check_writable(self, collection: str) -> None:
        if self.status(collection) == "migrating":
            raise QrowdError("SchemaMigrating", f"collection {collection!r} is migrating")

    def validate_doc(self, collection: str, doc: dict, link_exists=None) -> None:
        """Flexible-schema validation: required fields present, declared
        fields type-checked, undeclared extra fields allowed."""
        desc = self.active(collection)
        if desc is None:
            return
        if not isinstance(doc, dict):
            raise QrowdError("SchemaViolation", "document must be an object")
        for name, spec in desc.fields.items():
            if name not in doc:
                if spec.get("required", False):
                    raise QrowdError("SchemaViolation", f"missing required field {name!r}")
                continue
            self._check_field(name, spec["type"], doc[name], link_exists)

    def _check_field(self, name: str, ftype: str, value, link_exists) -> None:
        ok = True
        if ftype == "string":
            ok = isinstance(value, str)
        elif ftype == "int":
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif ftype == "float":
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif ftype == "bool":
            ok = isinstance(value, bool)
        elif ftype == "timestamp":
            ok = isinstance(value, int) and not isinstance(value, bool) and value >= 0
        elif ftype in ("link", "binaryRef"):
            ok = is_link(value)
            if ok and ftype == "binaryRef":
                ok = DataLink.parse(value).store == "file"
            if ok and link_exists is not None and not link_exists(value):
                raise QrowdError("SchemaViolation", f"field {name!r} links to a missing target: {value}")
        elif ftype == "list":
            ok = isinstance(value, list)
        elif ftype == "map":
            ok = isinstance(value, dict)
        if not ok:
            raise QrowdError("SchemaViolation", f"field {name!r} is not a valid {ftype}")
