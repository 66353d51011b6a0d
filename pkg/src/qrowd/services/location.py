"""Location marker registry and device-fix congruence checks.

Markers are registered geographic points whose QR payload deep-links back
into the platform. Congruence compares a device fix against the marker
position with an accuracy-inflated radius: the QR scan itself is already
presence evidence, so poor GPS is treated leniently. Results flag, they
never block.
"""

from __future__ import annotations

import math

from ..core import GeoPoint, new_id, now_ms
from ..errors import QrowdError
from .base import Service, require, require_role

MARKERS = "markers"

EARTH_RADIUS_M = 6_371_000.0


def distance_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance via the haversine formula, mean earth radius."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def parse_fix(doc: object, future_skew_s: float = 60.0) -> dict:
    """Validate a device fix payload: position, accuracy, capture time."""
    if not isinstance(doc, dict):
        raise QrowdError("MalformedFix", "fix must be an object")
    try:
        position = GeoPoint.from_doc(doc.get("position"))
    except ValueError as exc:
        raise QrowdError("MalformedFix", str(exc)) from None
    accuracy = doc.get("accuracyM")
    if not isinstance(accuracy, (int, float)) or isinstance(accuracy, bool):
        raise QrowdError("MalformedFix", "accuracyM must be a number")
    if not math.isfinite(accuracy) or accuracy < 0:
        raise QrowdError("MalformedFix", "accuracyM must be finite and >= 0")
    captured_at = doc.get("capturedAt")
    if not isinstance(captured_at, int) or isinstance(captured_at, bool) or captured_at < 0:
        raise QrowdError("MalformedFix", "capturedAt must be a timestamp")
    if captured_at > now_ms() + int(future_skew_s * 1000):
        raise QrowdError("MalformedFix", "capturedAt is in the future")
    return {"position": position, "accuracyM": float(accuracy), "capturedAt": captured_at}


def qr_payload(marker_id: str) -> str:
    return f"app://m/{marker_id}"


def marker_id_from_qr(payload: str) -> str:
    prefix = "app://m/"
    if not isinstance(payload, str) or not payload.startswith(prefix) or not payload[len(prefix):]:
        raise QrowdError("MalformedQr", f"not a marker payload: {payload!r}")
    return payload[len(prefix):]


class LocationService(Service):
    name = "location"
    mode = "replicated"

    def operations(self):
        return {
            "add_marker": self.op_add_marker,
            "list_markers": self.op_list_markers,
            "get_marker": self.op_get_marker,
            "deactivate_marker": self.op_deactivate_marker,
            "check_congruence": self.op_check_congruence,
        }

    def op_add_marker(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        name = require(payload, "name")
        if not name.strip():
            raise QrowdError("ValidationFailed", "marker name must be non-empty")
        try:
            position = GeoPoint.from_doc(payload.get("position"))
        except ValueError as exc:
            raise QrowdError("ValidationFailed", str(exc)) from None
        marker_id = new_id()
        doc = {
            "markerId": marker_id,
            "name": name,
            "position": position.to_doc(),
            "qrPayload": qr_payload(marker_id),
            "active": True,
        }
        self.data.docs.put(self.name, MARKERS, marker_id, doc)
        return doc

    def op_list_markers(self, payload: dict) -> dict:
        active_only = bool(payload.get("activeOnly", False))
        markers = [doc for _, doc in self.data.docs.scan(self.name, MARKERS)]
        if active_only:
            markers = [m for m in markers if m["active"]]
        markers.sort(key=lambda m: (m["name"], m["markerId"]))
        return {"markers": markers}

    def op_get_marker(self, payload: dict) -> dict:
        return self._marker(require(payload, "markerId"))

    def op_deactivate_marker(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        marker = self._marker(require(payload, "markerId"))
        marker["active"] = False
        self.data.docs.put(self.name, MARKERS, marker["markerId"], marker)
        return marker

    def op_check_congruence(self, payload: dict) -> dict:
        marker = self._marker(require(payload, "markerId"))
        if not marker["active"]:
            raise QrowdError("InactiveMarker", f"marker {marker['markerId']} is inactive")
        fix = parse_fix(payload.get("fix"), self.config.fix_future_skew_s)
        age_ms = now_ms() - fix["capturedAt"]
        if age_ms > self.config.fix_staleness_s * 1000:
            return {"result": "stale"}
        dist = distance_m(GeoPoint.from_doc(marker["position"]), fix["position"])
        if dist <= self.config.congruence_radius_m + fix["accuracyM"]:
            return {"result": "congruent", "distanceM": dist}
        return {"result": "incongruent", "distanceM": dist}

    def _marker(self, marker_id: str) -> dict:
        marker = self.data.docs.get_or_none(self.name, MARKERS, marker_id)
        if marker is None:
            raise QrowdError("UnknownMarker", f"no marker {marker_id}")
        return marker
