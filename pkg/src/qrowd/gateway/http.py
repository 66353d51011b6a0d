"""The single external entry point.

Terminates client HTTP and push connections, verifies bearer tokens, and
maps the public endpoints onto internal fabric routes. Identity is the
gateway's one enforcement point: the authenticated userId and role are
injected into every forwarded payload and any client-supplied values for
those fields are stripped first.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from ..core import new_id, now_ms
from ..errors import QrowdError
from . import ws
from .push import PushRegistry

MAX_BODY_BYTES = 32 * 1024 * 1024

# kinds a client may report about itself; everything else is server-emitted
CLIENT_EVENT_KINDS = ("scan", "selected", "dropped")

STATUS_FOR_CODE = {
    "ValidationFailed": 400, "MalformedFix": 400, "MalformedQr": 400,
    "MalformedEvent": 400, "MalformedUpload": 400, "MalformedBody": 400,
    "MalformedLink": 400, "TypeMismatch": 400, "IncompleteAnswers": 400,
    "OutOfRange": 400, "WeakPassword": 400, "InvalidEmail": 400,
    "EmptyFeedback": 400, "UnsupportedCombination": 400, "BadTimeout": 400,
    "BelowMinimum": 400,
    "BadCredentials": 401, "TokenMissing": 401, "TokenInvalid": 401,
    "TokenExpired": 401,
    "AccessDenied": 403,
    "NotFound": 404, "NoSuchRoute": 404, "UnknownUser": 404,
    "UnknownMarker": 404, "UnknownTask": 404, "UnknownInstrument": 404,
    "UnknownRedemption": 404, "UnknownFeedback": 404, "UnknownService": 404,
    "NoActiveInstrument": 404,
    "EmailTaken": 409, "DuplicateResponse": 409, "DuplicateEsm": 409,
    "NoPendingEsm": 409, "TaskRetired": 409, "InvalidTransition": 409,
    "InsufficientCredits": 409, "InactiveMarker": 409,
    "CapExceeded": 409, "NewVersionUnhealthy": 409,
    "TooLarge": 413,
    "UnsupportedMediaType": 415,
    "RateLimited": 429,
    "DeviceUnreachable": 503, "SchemaMigrating": 503,
    "NoHealthyInstance": 503, "QueueUnavailable": 503, "InstanceStopped": 503,
    "Timeout": 504,
}


def status_for(code: str) -> int:
    return STATUS_FOR_CODE.get(code, 500)


@dataclass(frozen=True)
class GatewayRoute:
    method: str
    pattern: str
    handler: str
    auth: bool = True
    roles: tuple = ()  # empty means any authenticated role


ROUTES = (
    GatewayRoute("GET", "/health", "h_health", auth=False),
    GatewayRoute("POST", "/auth/register", "h_register", auth=False),
    GatewayRoute("POST", "/auth/login", "h_login", auth=False),
    GatewayRoute("GET", "/me", "h_me"),
    GatewayRoute("GET", "/markers/{markerId}", "h_marker"),
    GatewayRoute("GET", "/tasks", "h_tasks_for_marker"),
    GatewayRoute("POST", "/tasks/{taskId}/events", "h_task_event"),
    GatewayRoute("POST", "/tasks/{taskId}/response", "h_submit_response"),
    GatewayRoute("GET", "/esm/pending", "h_esm_pending"),
    GatewayRoute("GET", "/esm/{taskId}", "h_esm_instrument"),
    GatewayRoute("POST", "/esm/{taskId}", "h_esm_submit"),
    GatewayRoute("GET", "/credits", "h_credits"),
    GatewayRoute("GET", "/credits/ledger", "h_ledger"),
    GatewayRoute("POST", "/credits/redeem", "h_redeem"),
    GatewayRoute("GET", "/credits/redemptions/{redemptionId}", "h_redemption"),
    GatewayRoute("POST", "/feedback", "h_feedback"),
    GatewayRoute("POST", "/events", "h_client_event"),
    GatewayRoute("POST", "/uploads", "h_upload"),
    GatewayRoute("POST", "/admin/markers", "h_admin_add_marker", roles=("researcher",)),
    GatewayRoute("GET", "/admin/markers", "h_admin_list_markers", roles=("researcher",)),
    GatewayRoute("POST", "/admin/markers/{markerId}/deactivate",
                 "h_admin_deactivate_marker", roles=("researcher",)),
    GatewayRoute("POST", "/admin/tasks", "h_admin_create_task", roles=("researcher",)),
    GatewayRoute("GET", "/admin/tasks", "h_admin_list_tasks", roles=("researcher",)),
    GatewayRoute("GET", "/admin/tasks/{taskId}", "h_admin_get_task", roles=("researcher",)),
    GatewayRoute("POST", "/admin/tasks/{taskId}/publish", "h_admin_publish_task",
                 roles=("researcher",)),
    GatewayRoute("POST", "/admin/tasks/{taskId}/retire", "h_admin_retire_task",
                 roles=("researcher",)),
    GatewayRoute("POST", "/admin/esm/instrument", "h_admin_set_instrument",
                 roles=("researcher",)),
    GatewayRoute("GET", "/admin/esm/instrument", "h_admin_active_instrument",
                 roles=("researcher",)),
    GatewayRoute("GET", "/admin/feedback", "h_admin_list_feedback", roles=("researcher",)),
    GatewayRoute("POST", "/admin/feedback/{feedbackId}/ack", "h_admin_ack_feedback",
                 roles=("researcher",)),
    GatewayRoute("POST", "/admin/reports", "h_admin_run_report", roles=("researcher",)),
    GatewayRoute("POST", "/admin/reports/export", "h_admin_export_report",
                 roles=("researcher",)),
    GatewayRoute("GET", "/admin/fleet", "h_admin_fleet_status", roles=("researcher",)),
    GatewayRoute("POST", "/admin/fleet/scale", "h_admin_fleet_scale", roles=("researcher",)),
    GatewayRoute("POST", "/admin/fleet/redeploy", "h_admin_fleet_redeploy",
                 roles=("researcher",)),
)


def match_route(method: str, path: str):
    """Returns (route, path params) for the declared table, else None."""
    segments = [s for s in path.split("/") if s]
    for route in ROUTES:
        if route.method != method:
            continue
        pattern = [s for s in route.pattern.split("/") if s]
        if len(pattern) != len(segments):
            continue
        params = {}
        for want, got in zip(pattern, segments):
            if want.startswith("{") and want.endswith("}"):
                params[want[1:-1]] = got
            elif want != got:
                break
        else:
            return route, params
    return None


class RateLimiter:
    """Sliding-window counter per key."""

    def __init__(self, max_requests: int, window_s: float, clock=None):
        import time

        self.max_requests = max_requests
        self.window_s = window_s
        self.clock = clock or time.monotonic
        self._lock = threading.Lock()
        self._hits: dict[str, list] = {}

    def allow(self, key: str) -> bool:
        now = self.clock()
        with self._lock:
            hits = self._hits.setdefault(key, [])
            cutoff = now - self.window_s
            while hits and hits[0] <= cutoff:
                hits.pop(0)
            if len(hits) >= self.max_requests:
                return False
            hits.append(now)
            return True


@dataclass
class RequestContext:
    identity: dict | None
    params: dict
    query: dict
    body: dict = field(default_factory=dict)


class Gateway:
    def __init__(self, fabric, config, host: str = "127.0.0.1", port: int = 0):
        self.fabric = fabric
        self.config = config
        self.push = PushRegistry(config.push_buffer_size, config.push_offline_window_s)
        self.limiter = RateLimiter(config.rate_limit_max, config.rate_limit_window_s)
        self._ws_lock = threading.Lock()
        self._ws_socks: set = set()
        fabric.subscribe_callable("redemption.updated", "gateway-push", self._on_redemption)

        gateway = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def log_message(self, fmt, *args):
                pass

            def do_GET(self):
                if self.path.split("?", 1)[0] == "/push" and \
                        (self.headers.get("Upgrade") or "").lower() == "websocket":
                    gateway._serve_push(self)
                else:
                    gateway.handle(self, "GET")

            def do_POST(self):
                gateway.handle(self, "POST")

        class Server(ThreadingHTTPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self.port = self._server.server_address[1]
        self.url = f"http://{host}:{self.port}"
        self._thread = threading.Thread(
            target=self._server.serve_forever, name=f"gateway-{self.port}", daemon=True
        )
        self._thread.start()

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        with self._ws_lock:
            socks = list(self._ws_socks)
            self._ws_socks.clear()
        for sock in socks:
            try:
                sock.close()
            except OSError:
                pass

    # request path -----------------------------------------------------------
    def handle(self, handler, method: str) -> None:
        try:
            status, payload = self._process(handler, method)
        except QrowdError as err:
            status, payload = status_for(err.code), err.to_doc()
        except Exception:
            status, payload = 500, {"code": "InternalError", "message": "unexpected failure"}
        body = json.dumps(payload, sort_keys=True).encode("utf-8")
        try:
            handler.send_response(status)
            handler.send_header("Content-Type", "application/json")
            handler.send_header("Content-Length", str(len(body)))
            handler.end_headers()
            handler.wfile.write(body)
        except OSError:
            pass

    def _process(self, handler, method: str) -> tuple[int, dict]:
        split = urlsplit(handler.path)
        matched = match_route(method, split.path)
        if matched is None:
            raise QrowdError("NotFound", f"no route for {method} {split.path}")
        route, params = matched

        identity = None
        if route.auth:
            identity = self._authenticate(handler)
            if route.roles and identity["role"] not in route.roles:
                raise QrowdError("AccessDenied", f"requires role in {route.roles}")

        limit_key = identity["userId"] if identity else handler.client_address[0]
        if split.path != "/health" and not self.limiter.allow(limit_key):
            raise QrowdError("RateLimited", "too many requests, slow down")

        query = {k: v[0] for k, v in parse_qs(split.query).items()}
        ctx = RequestContext(identity, params, query, self._read_body(handler))
        return 200, getattr(self, route.handler)(ctx)

    def _authenticate(self, handler) -> dict:
        header = handler.headers.get("Authorization") or ""
        if not header.startswith("Bearer ") or not header[7:].strip():
            raise QrowdError("TokenMissing", "Authorization: Bearer <token> required")
        return self._verify_token(header[7:].strip())

    def _verify_token(self, token: str) -> dict:
        result = self.fabric.request("auth.verify", {"token": token}, sender="gateway")
        if not result.get("accepted"):
            reason = result.get("reason", "invalid")
            code = "TokenExpired" if reason == "expired" else "TokenInvalid"
            raise QrowdError(code, f"token rejected: {reason}")
        return {"userId": result["userId"], "role": result["role"]}

    def _read_body(self, handler) -> dict:
        length = int(handler.headers.get("Content-Length") or 0)
        if length > MAX_BODY_BYTES:
            raise QrowdError("TooLarge", f"request body exceeds {MAX_BODY_BYTES} bytes")
        if length == 0:
            return {}
        raw = handler.rfile.read(length)
        try:
            body = json.loads(raw)
        except ValueError:
            raise QrowdError("MalformedBody", "request body must be JSON") from None
        if not isinstance(body, dict):
            raise QrowdError("MalformedBody", "request body must be a JSON object")
        return body

    def _forward(self, route: str, payload: dict, identity: dict | None = None) -> dict:
        # clients cannot speak for anyone: their identity fields are dropped
        clean = {k: v for k, v in payload.items() if k not in ("userId", "role")}
        if identity is not None:
            clean["userId"] = identity["userId"]
            clean["role"] = identity["role"]
        return self.fabric.request(route, clean, sender="gateway")

    # push channel -----------------------------------------------------------
    def _on_redemption(self, payload: dict, env) -> None:
        user_id = payload.get("userId")
        if user_id:
            self.push.push(user_id, {"type": "redemption.updated", **payload})

    def _serve_push(self, handler) -> None:
        # browser WebSocket cannot set Authorization; such clients offer the
        # token through the subprotocol list as ("bearer", <token>) instead
        subprotocol = None
        try:
            if handler.headers.get("Authorization"):
                identity = self._authenticate(handler)
            else:
                offered = [p.strip() for p in
                           (handler.headers.get("Sec-WebSocket-Protocol") or "").split(",")
                           if p.strip()]
                if len(offered) == 2 and offered[0] == "bearer":
                    identity = self._verify_token(offered[1])
                    subprotocol = "bearer"
                else:
                    raise QrowdError(
                        "TokenMissing",
                        "Authorization header or 'bearer' subprotocol required")
        except QrowdError as err:
            self.handle_error_response(handler, err)
            return
        key = handler.headers.get("Sec-WebSocket-Key")
        if not key:
            self.handle_error_response(
                handler, QrowdError("ValidationFailed", "missing Sec-WebSocket-Key"))
            return
        # pushes arriving between the 101 and register() must buffer, not drop
        self.push.touch(identity["userId"])
        handler.send_response(101, "Switching Protocols")
        handler.send_header("Upgrade", "websocket")
        handler.send_header("Connection", "Upgrade")
        handler.send_header("Sec-WebSocket-Accept", ws.accept_key(key))
        if subprotocol:
            # browsers abort the connection unless an offered subprotocol is chosen
            handler.send_header("Sec-WebSocket-Protocol", subprotocol)
        handler.end_headers()
        handler.wfile.flush()

        conn = handler.connection
        write_lock = threading.Lock()

        def send(doc: dict) -> None:
            with write_lock:
                conn.sendall(ws.encode_text(json.dumps(doc, sort_keys=True)))

        with self._ws_lock:
            self._ws_socks.add(conn)
        user_id = identity["userId"]
        try:
            connection_id = self.push.register(user_id, send)
        except Exception:
            with self._ws_lock:
                self._ws_socks.discard(conn)
            handler.close_connection = True
            return
        try:
            while True:
                frame = ws.read_frame(handler.rfile)
                if frame is None:
                    break
                opcode, data = frame
                if opcode == ws.OP_PING:
                    with write_lock:
                        conn.sendall(ws.encode_frame(ws.OP_PONG, data))
                elif opcode == ws.OP_CLOSE:
                    try:
                        with write_lock:
                            conn.sendall(ws.encode_close())
                    except OSError:
                        pass
                    break
                # client text frames carry nothing the server acts on
        except OSError:
            pass
        finally:
            self.push.unregister(user_id, connection_id)
            with self._ws_lock:
                self._ws_socks.discard(conn)
            handler.close_connection = True

    def handle_error_response(self, handler, err: QrowdError) -> None:
        body = json.dumps(err.to_doc(), sort_keys=True).encode("utf-8")
        handler.send_response(status_for(err.code))
        handler.send_header("Content-Type", "application/json")
        handler.send_header("Content-Length", str(len(body)))
        handler.end_headers()
        handler.wfile.write(body)

    # public surface ----------------------------------------------------------
    def h_health(self, ctx) -> dict:
        return {"status": "ok"}

    def h_register(self, ctx) -> dict:
        return self._forward("auth.register", ctx.body)

    def h_login(self, ctx) -> dict:
        return self._forward("auth.login", ctx.body)

    def h_me(self, ctx) -> dict:
        return self._forward("auth.get_profile", {}, ctx.identity)

    def h_marker(self, ctx) -> dict:
        return self._forward("location.get_marker", {"markerId": ctx.params["markerId"]})

    def h_tasks_for_marker(self, ctx) -> dict:
        marker = ctx.query.get("marker")
        if not marker:
            raise QrowdError("ValidationFailed", "query parameter marker is required")
        payload = {"markerId": marker}
        if ctx.query.get("session"):
            payload["sessionId"] = ctx.query["session"]
        return self._forward("task.list_for_marker", payload, ctx.identity)

    def _client_event(self, ctx, task_id: str | None) -> dict:
        kind = ctx.body.get("kind")
        if kind not in CLIENT_EVENT_KINDS:
            raise QrowdError("ValidationFailed",
                             f"kind must be one of {CLIENT_EVENT_KINDS}")
        event = {
            "eventId": ctx.body.get("eventId") or new_id(),
            "kind": kind,
            "userId": ctx.identity["userId"],
            "sessionId": ctx.body.get("sessionId"),
            "at": ctx.body.get("at", now_ms()),
        }
        if task_id:
            event["taskId"] = task_id
        if ctx.body.get("markerId"):
            event["markerId"] = ctx.body["markerId"]
        # identity already sits inside the event; nothing else to inject
        return self.fabric.request("metrics.ingest", {"event": event}, sender="gateway")

    def h_task_event(self, ctx) -> dict:
        return self._client_event(ctx, ctx.params["taskId"])

    def h_client_event(self, ctx) -> dict:
        return self._client_event(ctx, ctx.body.get("taskId"))

    def h_submit_response(self, ctx) -> dict:
        payload = dict(ctx.body)
        payload["taskId"] = ctx.params["taskId"]
        return self._forward("task.submit_response", payload, ctx.identity)

    def h_esm_pending(self, ctx) -> dict:
        return self._forward("esm.pending_esm", {}, ctx.identity)

    def h_esm_instrument(self, ctx) -> dict:
        task_id = ctx.params["taskId"]
        pending = self._forward("esm.pending_esm", {}, ctx.identity)["pending"]
        entry = next((p for p in pending if p["taskId"] == task_id), None)
        if entry is None:
            raise QrowdError("NoPendingEsm", f"no pending questionnaire for task {task_id}")
        if not entry["instrumentId"]:
            return {"taskId": task_id, "instrumentId": None, "items": []}
        instrument = self._forward(
            "esm.get_instrument", {"instrumentId": entry["instrumentId"]})
        return {"taskId": task_id, "instrumentId": instrument["instrumentId"],
                "items": instrument["items"]}

    def h_esm_submit(self, ctx) -> dict:
        payload = {"taskId": ctx.params["taskId"], "answers": ctx.body.get("answers")}
        return self._forward("esm.submit_esm", payload, ctx.identity)

    def h_credits(self, ctx) -> dict:
        return self._forward("reward.balance", {}, ctx.identity)

    def h_ledger(self, ctx) -> dict:
        return self._forward("reward.ledger", {}, ctx.identity)

    def h_redeem(self, ctx) -> dict:
        payload = {"credits": ctx.body.get("credits")}
        if ctx.body.get("sessionId"):
            payload["sessionId"] = ctx.body["sessionId"]
        return self._forward("reward.redeem", payload, ctx.identity)

    def h_redemption(self, ctx) -> dict:
        reply = self._forward(
            "reward.get_redemption", {"redemptionId": ctx.params["redemptionId"]})
        # a participant may only see their own; a missing match reads as absent
        if ctx.identity["role"] != "researcher" and reply["userId"] != ctx.identity["userId"]:
            raise QrowdError("UnknownRedemption", "no such redemption")
        return reply

    def h_feedback(self, ctx) -> dict:
        payload = {"text": ctx.body.get("text")}
        if ctx.body.get("sessionId"):
            payload["sessionId"] = ctx.body["sessionId"]
        return self._forward("esm.submit_feedback", payload, ctx.identity)

    def h_upload(self, ctx) -> dict:
        payload = {"mediaType": ctx.body.get("mediaType"), "data": ctx.body.get("data")}
        return self._forward("task.upload_media", payload, ctx.identity)

    # administration ----------------------------------------------------------
    def h_admin_add_marker(self, ctx) -> dict:
        return self._forward("location.add_marker", ctx.body, ctx.identity)

    def h_admin_list_markers(self, ctx) -> dict:
        payload = {}
        if ctx.query.get("activeOnly") in ("true", "1"):
            payload["activeOnly"] = True
        return self._forward("location.list_markers", payload, ctx.identity)

    def h_admin_deactivate_marker(self, ctx) -> dict:
        return self._forward("location.deactivate_marker",
                             {"markerId": ctx.params["markerId"]}, ctx.identity)

    def h_admin_create_task(self, ctx) -> dict:
        return self._forward("task.create_task", ctx.body, ctx.identity)

    def h_admin_list_tasks(self, ctx) -> dict:
        payload = {}
        if ctx.query.get("status"):
            payload["status"] = ctx.query["status"]
        return self._forward("task.list_tasks", payload, ctx.identity)

    def h_admin_get_task(self, ctx) -> dict:
        return self._forward("task.get_task", {"taskId": ctx.params["taskId"]}, ctx.identity)

    def h_admin_publish_task(self, ctx) -> dict:
        return self._forward("task.publish_task", {"taskId": ctx.params["taskId"]},
                             ctx.identity)

    def h_admin_retire_task(self, ctx) -> dict:
        return self._forward("task.retire_task", {"taskId": ctx.params["taskId"]},
                             ctx.identity)

    def h_admin_set_instrument(self, ctx) -> dict:
        return self._forward("esm.set_instrument", ctx.body, ctx.identity)

    def h_admin_active_instrument(self, ctx) -> dict:
        return self._forward("esm.active_instrument", {}, ctx.identity)

    def h_admin_list_feedback(self, ctx) -> dict:
        payload = {}
        if ctx.query.get("status"):
            payload["status"] = ctx.query["status"]
        return self._forward("esm.list_feedback", payload, ctx.identity)

    def h_admin_ack_feedback(self, ctx) -> dict:
        return self._forward("esm.acknowledge_feedback",
                             {"feedbackId": ctx.params["feedbackId"]}, ctx.identity)

    def h_admin_run_report(self, ctx) -> dict:
        return self._forward("reporting.run_report", ctx.body, ctx.identity)

    def h_admin_export_report(self, ctx) -> dict:
        return self._forward("reporting.export_report", ctx.body, ctx.identity)

    def h_admin_fleet_status(self, ctx) -> dict:
        return self._forward("supervisor.status", {}, ctx.identity)

    def h_admin_fleet_scale(self, ctx) -> dict:
        payload = {"service": ctx.body.get("service"), "replicas": ctx.body.get("replicas")}
        return self._forward("supervisor.scale", payload, ctx.identity)

    def h_admin_fleet_redeploy(self, ctx) -> dict:
        payload = {"service": ctx.body.get("service")}
        if ctx.body.get("version") is not None:
            payload["version"] = ctx.body.get("version")
        return self._forward("supervisor.redeploy", payload, ctx.identity)
