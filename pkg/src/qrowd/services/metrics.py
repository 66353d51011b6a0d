"""Interaction event ingestion and task performance metrics.

Events land in the append-only "interactions" time series; counters and
completion statistics are pure folds over that series, deduplicated on
eventId, so any permutation of the same event multiset yields identical
results. Quantiles are nearest-rank: exact and oracle-checkable.
"""

from __future__ import annotations

import math

from ..errors import QrowdError
from .base import Service, require

INTERACTIONS = "interactions"
CLAIMS = "interactionClaims"

TASK_KINDS = ("seen", "selected", "completed", "dropped")
KINDS = TASK_KINDS + ("login", "scan", "redeem", "feedback")


def validate_event(event: object) -> dict:
    if not isinstance(event, dict):
        raise QrowdError("MalformedEvent", "event must be an object")
    for field in ("eventId", "userId", "sessionId", "kind"):
        if not isinstance(event.get(field), str) or not event[field]:
            raise QrowdError("MalformedEvent", f"event needs a non-empty {field}")
    if event["kind"] not in KINDS:
        raise QrowdError("MalformedEvent", f"unknown kind {event['kind']!r}")
    at = event.get("at")
    if not isinstance(at, int) or isinstance(at, bool) or at < 0:
        raise QrowdError("MalformedEvent", "event needs a non-negative integer 'at'")
    if event["kind"] in TASK_KINDS and not event.get("taskId"):
        raise QrowdError("MalformedEvent", f"{event['kind']} events must carry a taskId")
    return event


def dedup_events(rows: list[dict]) -> list[dict]:
    """Canonical event set: sorted by (at, eventId), first row per eventId.

    Sorting by content (never by storage order) is what makes every fold
    permutation-invariant.
    """
    ordered = sorted(rows, key=lambda r: (r["at"], r["eventId"]))
    seen: set[str] = set()
    out = []
    for row in ordered:
        if row["eventId"] in seen:
            continue
        seen.add(row["eventId"])
        out.append(row)
    return out


def fold_counters(events: list[dict], task_id: str, dedup: bool = False) -> dict:
    """Counters for one task over a canonical event list.

    dedup=False counts events; dedup=True counts distinct (userId, sessionId)
    pairs per kind.
    """
    counts = {kind: 0 for kind in TASK_KINDS}
    seen_pairs: set[tuple[str, str, str]] = set()
    for event in events:
        if event.get("taskId") != task_id or event["kind"] not in TASK_KINDS:
            continue
        if dedup:
            pair = (event["kind"], event["userId"], event["sessionId"])
            if pair in seen_pairs:
                continue
            seen_pairs.add(pair)
        counts[event["kind"]] += 1
    return counts


def completion_samples(events: list[dict], task_id: str | None = None) -> list[dict]:
    """One sample per completed (userId, taskId): time from the latest
    same-session selected event to the first completed event. Pairs without
    a strictly earlier selected event yield no sample."""
    by_pair: dict[tuple[str, str], list[dict]] = {}
    for event in events:
        if event["kind"] not in ("selected", "completed") or not event.get("taskId"):
            continue
        if task_id is not None and event["taskId"] != task_id:
            continue
        by_pair.setdefault((event["userId"], event["taskId"]), []).append(event)
    samples = []
    for (user_id, tid), group in sorted(by_pair.items()):
        completed = [e for e in group if e["kind"] == "completed"]
        if not completed:
            continue
        first_done = min(completed, key=lambda e: (e["at"], e["eventId"]))
        candidates = [
            e for e in group
            if e["kind"] == "selected"
            and e["sessionId"] == first_done["sessionId"]
            and e["at"] < first_done["at"]
        ]
        if not candidates:
            continue
        chosen = max(candidates, key=lambda e: (e["at"], e["eventId"]))
        samples.append({
            "taskId": tid,
            "userId": user_id,
            "sessionId": first_done["sessionId"],
            "durationMs": first_done["at"] - chosen["at"],
        })
    return samples


def nearest_rank(sorted_values: list, p: float):
    """Nearest-rank quantile over an ascending list; None when empty."""
    if not sorted_values:
        return None
    rank = math.ceil(p * len(sorted_values))
    return sorted_values[max(rank, 1) - 1]


def stats_over(samples: list[dict]) -> dict:
    durations = sorted(s["durationMs"] for s in samples)
    if not durations:
        return {"n": 0, "meanMs": None, "p50Ms": None, "p90Ms": None}
    return {
        "n": len(durations),
        "meanMs": sum(durations) / len(durations),
        "p50Ms": nearest_rank(durations, 0.50),
        "p90Ms": nearest_rank(durations, 0.90),
    }


class MetricsService(Service):
    name = "metrics"
    mode = "replicated"

    def operations(self):
        return {
            "ingest": self.op_ingest,
            "counters": self.op_counters,
            "completion_stats": self.op_completion_stats,
        }

    def topics(self):
        return {"interaction": self.on_interaction}

    def op_ingest(self, payload: dict) -> dict:
        event = validate_event(payload.get("event", payload))
        return self._ingest(event)

    def on_interaction(self, payload: dict, env) -> None:
        # malformed events raise QrowdError; the fabric acks and drops them
        # so a poison event cannot wedge the subscription
        self._ingest(validate_event(payload))

    def _ingest(self, event: dict) -> dict:
        # idempotence on eventId: the claim is taken after the append so a
        # crash between the two can only duplicate a row (folds dedup on
        # eventId), never lose one
        if self.data.docs.get_or_none(self.name, CLAIMS, event["eventId"]) is not None:
            return {"accepted": True, "duplicate": True}
        row = {
            "eventId": event["eventId"],
            "kind": event["kind"],
            "userId": event["userId"],
            "sessionId": event["sessionId"],
            "at": event["at"],
        }
        for optional in ("taskId", "markerId"):
            if event.get(optional):
                row[optional] = event[optional]
        self.data.ts.append(self.name, INTERACTIONS, row)
        self.data.docs.put(self.name, CLAIMS, event["eventId"], {"eventId": event["eventId"]})
        return {"accepted": True, "duplicate": False}

    def op_counters(self, payload: dict) -> dict:
        task_id = require(payload, "taskId")
        dedup = bool(payload.get("dedup", False))
        events = dedup_events(self.data.ts.scan(self.name, INTERACTIONS))
        counts = fold_counters(events, task_id, dedup=dedup)
        return {"taskId": task_id, "dedup": dedup, **counts}

    def op_completion_stats(self, payload: dict) -> dict:
        task_id = require(payload, "taskId")
        events = dedup_events(self.data.ts.scan(self.name, INTERACTIONS))
        stats = stats_over(completion_samples(events, task_id))
        return {"taskId": task_id, **stats}
