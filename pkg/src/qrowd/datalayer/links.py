"""Cross-store reference URIs: "{store}://{collection}/{id}"."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import QrowdError

STORES = ("doc", "ts", "file")

_LINK_RE = re.compile(r"^(?P<store>[a-z]+)://(?P<collection>[^/]+)/(?P<ref>.+)$")


@dataclass(frozen=True)
class DataLink:
    store: str
    collection: str
    ref: str

    @property
    def uri(self) -> str:
        return f"{self.store}://{self.collection}/{self.ref}"

    @classmethod
    def parse(cls, uri: object) -> "DataLink":
        if not isinstance(uri, str):
            raise QrowdError("MalformedLink", "link must be a string")
        m = _LINK_RE.match(uri)
        if m is None:
            raise QrowdError("MalformedLink", f"not a link uri: {uri!r}")
        store = m.group("store")
        if store not in STORES:
            raise QrowdError("MalformedLink", f"unknown store {store!r} in {uri!r}")
        return cls(store=store, collection=m.group("collection"), ref=m.group("ref"))


def is_link(uri: object) -> bool:
    try:
        DataLink.parse(uri)
        return True
    except QrowdError:
        return False
