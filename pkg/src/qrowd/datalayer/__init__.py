"""Shared storage layer: schema registry, document, time-series and file stores."""

from .docstore import DiskDocStore, DocStore, MemoryDocStore
from .filestore import (
    ALLOWED_MEDIA_TYPES,
    COMPRESSION_THRESHOLD_BYTES,
    MAX_FILE_BYTES,
    DiskFileStore,
    FileStore,
    MemoryFileStore,
    StoredFile,
    identity_hook,
    quality80_hook,
)
from .layer import DataLayer, LockTable
from .links import DataLink, is_link
from .registry import FIELD_TYPES, SchemaDescriptor, SchemaRegistry
from .tsstore import DiskTimeSeriesStore, MemoryTimeSeriesStore, TimeSeriesStore

__all__ = [
    "ALLOWED_MEDIA_TYPES",
    "COMPRESSION_THRESHOLD_BYTES",
    "FIELD_TYPES",
    "MAX_FILE_BYTES",
    "DataLayer",
    "DataLink",
    "DiskDocStore",
    "DiskFileStore",
    "DiskTimeSeriesStore",
    "DocStore",
    "FileStore",
    "LockTable",
    "MemoryDocStore",
    "MemoryFileStore",
    "MemoryTimeSeriesStore",
    "SchemaDescriptor",
    "SchemaRegistry",
    "StoredFile",
    "TimeSeriesStore",
    "identity_hook",
    "is_link",
    "quality80_hook",
]
