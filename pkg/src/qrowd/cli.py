"""Researcher command line against a running gateway.

Every subcommand maps onto exactly one gateway endpoint; the pairing lives
in ADMIN_ENDPOINTS so the parity test can diff it against the route table.
The CLI authenticates like any other client, with a bearer token from
QROWD_TOKEN, and never talks to the fabric directly.

Exit codes: 0 success, 1 domain error (code and message on stderr),
2 usage error. With --json the only stdout output is one JSON document.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone

import click
import requests

DEFAULT_TIMEOUT_S = 30.0

# admin command -> (method, gateway route); checked 1:1 against the gateway
ADMIN_ENDPOINTS = {
    "marker add": ("POST", "/admin/markers"),
    "marker list": ("GET", "/admin/markers"),
    "marker deactivate": ("POST", "/admin/markers/{markerId}/deactivate"),
    "task create": ("POST", "/admin/tasks"),
    "task list": ("GET", "/admin/tasks"),
    "task show": ("GET", "/admin/tasks/{taskId}"),
    "task publish": ("POST", "/admin/tasks/{taskId}/publish"),
    "task retire": ("POST", "/admin/tasks/{taskId}/retire"),
    "esm set-instrument": ("POST", "/admin/esm/instrument"),
    "esm show-instrument": ("GET", "/admin/esm/instrument"),
    "feedback list": ("GET", "/admin/feedback"),
    "feedback ack": ("POST", "/admin/feedback/{feedbackId}/ack"),
    "report run": ("POST", "/admin/reports"),
    "report export": ("POST", "/admin/reports/export"),
    "fleet status": ("GET", "/admin/fleet"),
    "fleet scale": ("POST", "/admin/fleet/scale"),
    "fleet redeploy": ("POST", "/admin/fleet/redeploy"),
}


class DomainError(click.ClickException):
    exit_code = 1

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass
class CliSession:
    url: str | None
    token: str | None
    json_mode: bool

    def call(self, method: str, path: str, body: dict | None = None,
             params: dict | None = None) -> dict:
        if not self.url:
            raise click.UsageError("no gateway address: set QROWD_URL or pass --url")
        headers = {}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.request(
                method, self.url.rstrip("/") + path,
                json=body, params=params, headers=headers, timeout=DEFAULT_TIMEOUT_S)
        except requests.RequestException as exc:
            raise DomainError("Unreachable", f"cannot reach {self.url}: {exc}") from None
        try:
            doc = resp.json()
        except ValueError:
            doc = {}
        if resp.status_code >= 400:
            raise DomainError(doc.get("code", f"Http{resp.status_code}"),
                              doc.get("message", "request failed"))
        return doc

    def emit(self, doc: dict, lines=None) -> None:
        if self.json_mode:
            click.echo(json.dumps(doc, sort_keys=True))
        elif lines is not None:
            for line in lines:
                click.echo(line)
        else:
            click.echo(json.dumps(doc, indent=2, sort_keys=True))


def parse_ts(value: str) -> int:
    """ISO-8601 date or datetime (naive means UTC), or epoch milliseconds."""
    if value.isdigit():
        return int(value)
    try:
        moment = datetime.fromisoformat(value)
    except ValueError:
        raise click.BadParameter(f"{value!r} is not ISO-8601 or epoch ms") from None
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=timezone.utc)
    return int(moment.timestamp() * 1000)


def load_json_file(path: str) -> object:
    stream = sys.stdin if path == "-" else open(path, "r", encoding="utf-8")
    try:
        return json.load(stream)
    except ValueError as exc:
        raise click.UsageError(f"{path}: not valid JSON ({exc})")
    finally:
        if stream is not sys.stdin:
            stream.close()


def render_table(rows: list[dict], columns: list[str]) -> list[str]:
    def cell(row, col):
        value = row.get(col, "")
        return "" if value is None else str(value)

    widths = [max(len(col), *(len(cell(r, col)) for r in rows)) if rows else len(col)
              for col in columns]
    lines = ["  ".join(col.ljust(w) for col, w in zip(columns, widths)).rstrip()]
    for row in rows:
        lines.append("  ".join(cell(row, col).ljust(w)
                               for col, w in zip(columns, widths)).rstrip())
    return lines


@click.group()
@click.option("--url", envvar="QROWD_URL", help="Gateway base URL (env: QROWD_URL).")
@click.option("--token", envvar="QROWD_TOKEN",
              help="Bearer token from `login` (env: QROWD_TOKEN).")
@click.option("--json", "json_mode", is_flag=True,
              help="Emit exactly one JSON document on stdout.")
@click.pass_context
def main(ctx, url, token, json_mode):
    """Administer a running crowdsourcing platform."""
    ctx.obj = CliSession(url=url, token=token, json_mode=json_mode)


@main.command()
@click.option("--email", required=True)
@click.option("--password", required=True, prompt=True, hide_input=True)
@click.pass_obj
def login(session, email, password):
    """Obtain a bearer token."""
    doc = session.call("POST", "/auth/login", {"email": email, "password": password})
    session.emit(doc, [
        f"logged in as {doc['userId']} ({doc['role']})",
        f"export QROWD_TOKEN={doc['token']}",
    ])


# markers ---------------------------------------------------------------------
@main.group()
def marker():
    """Location markers."""


@marker.command("add")
@click.option("--name", required=True)
@click.option("--lat", type=float, required=True)
@click.option("--lon", type=float, required=True)
@click.pass_obj
def marker_add(session, name, lat, lon):
    doc = session.call("POST", "/admin/markers",
                       {"name": name, "position": {"lat": lat, "lon": lon}})
    session.emit(doc, [f"marker {doc['markerId']} at ({lat}, {lon})",
                       f"qr payload: {doc['qrPayload']}"])


@marker.command("list")
@click.option("--active-only", is_flag=True)
@click.pass_obj
def marker_list(session, active_only):
    params = {"activeOnly": "true"} if active_only else None
    doc = session.call("GET", "/admin/markers", params=params)
    rows = [
        {**m, "lat": m["position"]["lat"], "lon": m["position"]["lon"]}
        for m in doc["markers"]
    ]
    session.emit(doc, render_table(rows, ["markerId", "name", "lat", "lon", "active"]))


@marker.command("deactivate")
@click.argument("marker_id")
@click.pass_obj
def marker_deactivate(session, marker_id):
    doc = session.call("POST", f"/admin/markers/{marker_id}/deactivate")
    session.emit(doc, [f"marker {marker_id} deactivated"])


# tasks -----------------------------------------------------------------------
@main.group()
def task():
    """Crowdsourcing tasks."""


@task.command("create")
@click.option("--file", "path", required=True,
              help="JSON task definition; '-' reads stdin.")
@click.pass_obj
def task_create(session, path):
    body = load_json_file(path)
    if not isinstance(body, dict):
        raise click.UsageError("task definition must be a JSON object")
    doc = session.call("POST", "/admin/tasks", body)
    session.emit(doc, [f"task {doc['taskId']} created (status {doc['status']})"])


@task.command("list")
@click.option("--status", type=click.Choice(["draft", "published", "retired"]))
@click.pass_obj
def task_list(session, status):
    params = {"status": status} if status else None
    doc = session.call("GET", "/admin/tasks", params=params)
    session.emit(doc, render_table(
        doc["tasks"], ["taskId", "title", "status", "responseType", "rewardAmount"]))


@task.command("show")
@click.argument("task_id")
@click.pass_obj
def task_show(session, task_id):
    doc = session.call("GET", f"/admin/tasks/{task_id}")
    lines = [f"{key}: {json.dumps(doc[key])}" for key in sorted(doc)]
    session.emit(doc, lines)


@task.command("publish")
@click.argument("task_id")
@click.pass_obj
def task_publish(session, task_id):
    doc = session.call("POST", f"/admin/tasks/{task_id}/publish")
    session.emit(doc, [f"task {task_id} published"])


@task.command("retire")
@click.argument("task_id")
@click.pass_obj
def task_retire(session, task_id):
    doc = session.call("POST", f"/admin/tasks/{task_id}/retire")
    session.emit(doc, [f"task {task_id} retired"])


# esm -------------------------------------------------------------------------
@main.group()
def esm():
    """Experience sampling instruments."""


@esm.command("set-instrument")
@click.option("--file", "path", required=True,
              help="JSON item list or {\"items\": [...]}; '-' reads stdin.")
@click.pass_obj
def esm_set_instrument(session, path):
    body = load_json_file(path)
    if isinstance(body, list):
        body = {"items": body}
    if not isinstance(body, dict):
        raise click.UsageError("instrument must be a JSON object or item list")
    doc = session.call("POST", "/admin/esm/instrument", body)
    session.emit(doc, [f"instrument {doc['instrumentId']} is now active"])


@esm.command("show-instrument")
@click.pass_obj
def esm_show_instrument(session):
    doc = session.call("GET", "/admin/esm/instrument")
    session.emit(doc, render_table(doc["items"], ["itemId", "scale", "prompt"]))


@esm.command("list-pending")
@click.pass_obj
def esm_list_pending(session):
    """Questionnaires pending for the calling account."""
    doc = session.call("GET", "/esm/pending")
    session.emit(doc, render_table(doc["pending"], ["taskId", "instrumentId"]))


# feedback --------------------------------------------------------------------
@main.group()
def feedback():
    """Participant feedback."""


@feedback.command("list")
@click.option("--status", type=click.Choice(["new", "acknowledged"]))
@click.pass_obj
def feedback_list(session, status):
    params = {"status": status} if status else None
    doc = session.call("GET", "/admin/feedback", params=params)
    session.emit(doc, render_table(
        doc["feedback"], ["feedbackId", "userId", "status", "text"]))


@feedback.command("ack")
@click.argument("feedback_id")
@click.pass_obj
def feedback_ack(session, feedback_id):
    doc = session.call("POST", f"/admin/feedback/{feedback_id}/ack")
    session.emit(doc, [f"feedback {feedback_id} acknowledged"])


# reports ---------------------------------------------------------------------
REPORT_KINDS = ["taskFunnel", "userActivity", "esmSummary", "creditFlow"]
DEFAULT_GROUP_BY = {"taskFunnel": "task", "userActivity": "user",
                    "esmSummary": "task", "creditFlow": "user"}


def report_spec(kind, from_ts, to_ts, group_by, dedup):
    return {
        "kind": kind,
        "groupBy": group_by or DEFAULT_GROUP_BY[kind],
        "fromTs": parse_ts(from_ts),
        "toTs": parse_ts(to_ts),
        "dedup": dedup,
    }


@main.group()
def report():
    """Analytics over interaction events."""


@report.command("run")
@click.argument("kind", type=click.Choice(REPORT_KINDS))
@click.option("--from", "from_ts", required=True, metavar="ISO8601")
@click.option("--to", "to_ts", required=True, metavar="ISO8601")
@click.option("--group-by")
@click.option("--dedup", is_flag=True)
@click.pass_obj
def report_run(session, kind, from_ts, to_ts, group_by, dedup):
    doc = session.call("POST", "/admin/reports",
                       report_spec(kind, from_ts, to_ts, group_by, dedup))
    rows = [{"groupKey": r["groupKey"], **r["columns"]} for r in doc["rows"]]
    columns = ["groupKey"] + sorted({k for r in rows for k in r if k != "groupKey"})
    session.emit(doc, render_table(rows, columns))


@report.command("export")
@click.argument("kind", type=click.Choice(REPORT_KINDS))
@click.option("--from", "from_ts", required=True, metavar="ISO8601")
@click.option("--to", "to_ts", required=True, metavar="ISO8601")
@click.option("--group-by")
@click.option("--dedup", is_flag=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv")
@click.pass_obj
def report_export(session, kind, from_ts, to_ts, group_by, dedup, fmt):
    """Print the rendered report; redirect stdout to save it."""
    spec = report_spec(kind, from_ts, to_ts, group_by, dedup)
    spec["format"] = fmt
    doc = session.call("POST", "/admin/reports/export", spec)
    if session.json_mode:
        session.emit(doc)
    else:
        click.echo(doc["content"], nl=False)


# fleet -----------------------------------------------------------------------
@main.group()
def fleet():
    """Service fleet operations."""


@fleet.command("status")
@click.pass_obj
def fleet_status(session):
    doc = session.call("GET", "/admin/fleet")
    lines = []
    for entry in doc["fleet"]:
        healthy = sum(1 for r in entry["instances"] if r["state"] == "healthy")
        flags = " degraded" if entry["degraded"] else ""
        lines.append(
            f"{entry['service']}: {healthy}/{entry['desired']} healthy "
            f"({entry['mode']}, {entry['requestsPerSecond']} req/s){flags}")
        for record in entry["instances"]:
            lines.append(f"  {record['instanceId']} {record['state']} "
                         f"{record['version']} {record['endpoint']}")
    session.emit(doc, lines)


@fleet.command("scale")
@click.argument("service")
@click.argument("replicas", type=int)
@click.pass_obj
def fleet_scale(session, service, replicas):
    doc = session.call("POST", "/admin/fleet/scale",
                       {"service": service, "replicas": replicas})
    session.emit(doc, [f"{name}: {count}" for name, count in sorted(doc["plan"].items())])


@fleet.command("redeploy")
@click.argument("service")
@click.option("--version")
@click.pass_obj
def fleet_redeploy(session, service, version):
    body = {"service": service}
    if version:
        body["version"] = version
    doc = session.call("POST", "/admin/fleet/redeploy", body)
    session.emit(doc, [
        f"{service} now at {doc['version']}: {doc['replaced']} instances replaced "
        f"in {doc['durationMs']} ms, {doc['failedRequests']} failed requests",
    ])
