"""Cross-store reporting: funnel, activity, ESM, and credit-flow extracts.

Reports are computed on demand by scanning the stores (no materialized
views) and are deterministic for frozen store contents: rows are keyed and
sorted by groupKey, and the funnel columns reuse the exact metric folds,
so taskFunnel always agrees with the metrics service. Day grouping uses
UTC calendar days.
"""

from __future__ import annotations

import csv
import io
import json
from datetime import datetime, timezone

from ..errors import QrowdError
from .base import Service, require_role
from .esm import INSTRUMENTS, RESPONSES as ESM_RESPONSES, ACTIVE_POINTER
from .metrics import INTERACTIONS, TASK_KINDS, completion_samples, dedup_events, fold_counters, stats_over
from .rewards import EFFECTIVE_STATES, LEDGER, REDEMPTIONS

KIND_MATRIX = {
    "taskFunnel": ("task",),
    "userActivity": ("user", "day"),
    "esmSummary": ("task", "day"),
    "creditFlow": ("user", "day"),
}

COLUMNS = {
    "taskFunnel": ("seen", "selected", "completed", "dropped", "n", "meanMs", "p50Ms", "p90Ms"),
    "userActivity": ("logins", "scans", "completed"),
    "esmSummary": ("n", "mean"),
    "creditFlow": ("awarded", "redeemed", "net"),
}

FORMATS = ("json", "csv")


def utc_day(at_ms: int) -> str:
    return datetime.fromtimestamp(at_ms / 1000, tz=timezone.utc).strftime("%Y-%m-%d")


def validate_spec(payload: dict) -> dict:
    kind = payload.get("kind")
    if kind not in KIND_MATRIX:
        raise QrowdError("UnsupportedCombination", f"unknown report kind {kind!r}")
    group_by = payload.get("groupBy")
    if group_by not in KIND_MATRIX[kind]:
        raise QrowdError(
            "UnsupportedCombination",
            f"kind {kind!r} supports groupBy {KIND_MATRIX[kind]}, not {group_by!r}",
        )
    from_ts = payload.get("fromTs")
    to_ts = payload.get("toTs")
    for name, value in (("fromTs", from_ts), ("toTs", to_ts)):
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise QrowdError("ValidationFailed", f"{name} must be a non-negative timestamp")
    if from_ts >= to_ts:
        raise QrowdError("ValidationFailed", "fromTs must be earlier than toTs")
    return {
        "kind": kind,
        "groupBy": group_by,
        "fromTs": from_ts,
        "toTs": to_ts,
        "dedup": bool(payload.get("dedup", False)),
    }


def export_rows(kind: str, rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, sort_keys=True)
    if fmt == "csv":
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\r\n")
        writer.writerow(("groupKey",) + COLUMNS[kind])
        for row in rows:
            writer.writerow(
                [row["groupKey"]]
                + ["" if row["columns"][c] is None else row["columns"][c] for c in COLUMNS[kind]]
            )
        return out.getvalue()
    raise QrowdError("ValidationFailed", f"format must be one of {FORMATS}")


class ReportingService(Service):
    name = "reporting"
    mode = "replicated"

    def operations(self):
        return {
            "run_report": self.op_run_report,
            "export_report": self.op_export_report,
        }

    def op_run_report(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        spec = validate_spec(payload)
        builder = {
            "taskFunnel": self._task_funnel,
            "userActivity": self._user_activity,
            "esmSummary": self._esm_summary,
            "creditFlow": self._credit_flow,
        }[spec["kind"]]
        rows = builder(spec)
        rows.sort(key=lambda r: r["groupKey"])
        return {"kind": spec["kind"], "groupBy": spec["groupBy"], "rows": rows}

    def op_export_report(self, payload: dict) -> dict:
        report = self.op_run_report(payload)
        fmt = payload.get("format", "json")
        content = export_rows(report["kind"], report["rows"], fmt)
        return {"format": fmt, "content": content}

    # builders ----------------------------------------------------------------
    def _events_in(self, spec: dict) -> list[dict]:
        rows = self.data.ts.range(self.name, INTERACTIONS, spec["fromTs"], spec["toTs"])
        return dedup_events(rows)

    def _task_funnel(self, spec: dict) -> list[dict]:
        events = self._events_in(spec)
        task_ids = sorted({e["taskId"] for e in events if e.get("taskId") and e["kind"] in TASK_KINDS})
        rows = []
        for task_id in task_ids:
            counters = fold_counters(events, task_id, dedup=spec["dedup"])
            stats = stats_over(completion_samples(events, task_id))
            columns = {**counters, "n": stats["n"], "meanMs": stats["meanMs"],
                       "p50Ms": stats["p50Ms"], "p90Ms": stats["p90Ms"]}
            rows.append({"groupKey": task_id, "columns": columns})
        return rows

    def _user_activity(self, spec: dict) -> list[dict]:
        groups: dict[str, dict] = {}
        for event in self._events_in(spec):
            if event["kind"] not in ("login", "scan", "completed"):
                continue
            key = event["userId"] if spec["groupBy"] == "user" else utc_day(event["at"])
            columns = groups.setdefault(key, {"logins": 0, "scans": 0, "completed": 0})
            if event["kind"] == "login":
                columns["logins"] += 1
            elif event["kind"] == "scan":
                columns["scans"] += 1
            else:
                columns["completed"] += 1
        return [{"groupKey": k, "columns": v} for k, v in groups.items()]

    def _esm_summary(self, spec: dict) -> list[dict]:
        instruments = {
            doc_id: doc for doc_id, doc in self.data.docs.scan(self.name, INSTRUMENTS)
            if doc_id != ACTIVE_POINTER
        }
        groups: dict[str, list] = {}
        for _, response in self.data.docs.scan(self.name, ESM_RESPONSES):
            if not spec["fromTs"] <= response["submittedAt"] < spec["toTs"]:
                continue
            instrument = instruments.get(response.get("instrumentId") or "")
            if instrument is None:
                continue
            prefix = response["taskId"] if spec["groupBy"] == "task" else utc_day(response["submittedAt"])
            for item in instrument["items"]:
                answer = response["answers"].get(item["itemId"])
                groups.setdefault(f"{prefix}:{item['itemId']}", []).append(
                    answer if item["scale"] != "freeText" else None
                )
        rows = []
        for key, answers in groups.items():
            numeric = [a for a in answers if isinstance(a, int)]
            mean = sum(numeric) / len(numeric) if numeric else None
            rows.append({"groupKey": key, "columns": {"n": len(answers), "mean": mean}})
        return rows

    def _credit_flow(self, spec: dict) -> list[dict]:
        redemptions = {rid: doc for rid, doc in self.data.docs.scan(self.name, REDEMPTIONS)}
        groups: dict[str, dict] = {}
        for _, entry in self.data.docs.scan(self.name, LEDGER):
            if not spec["fromTs"] <= entry["at"] < spec["toTs"]:
                continue
            key = entry["userId"] if spec["groupBy"] == "user" else utc_day(entry["at"])
            columns = groups.setdefault(key, {"awarded": 0, "redeemed": 0, "net": 0})
            if entry["kind"] == "award":
                columns["awarded"] += entry["amount"]
            elif entry["kind"] == "redemption":
                redemption = redemptions.get(entry["refId"])
                if redemption is not None and redemption["state"] in EFFECTIVE_STATES:
                    columns["redeemed"] += entry["amount"]
            columns["net"] = columns["awarded"] - columns["redeemed"]
        return [{"groupKey": k, "columns": v} for k, v in groups.items()]
