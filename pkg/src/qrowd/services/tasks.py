"""Task management, location-based allocation, and response collection.

Tasks move draft -> published -> retired, are bound to one or more location
markers, and accept exactly one typed response per user. Submission emits
the "completed" interaction event and a "task.completed" domain event; the
credit award itself is gated on the ESM questionnaire downstream.
"""

from __future__ import annotations

import base64
import binascii
import math

from ..core import new_id
from ..datalayer import DataLink
from ..errors import QrowdError
from .base import Service, require, require_role
from .location import MARKERS

TASKS = "tasks"
RESPONSES = "responses"

DIFFICULTIES = ("easy", "medium", "hard")
RESPONSE_TYPES = ("text", "singleChoice", "multiChoice", "numeric", "photo", "audio")
CHOICE_TYPES = ("singleChoice", "multiChoice")

CARD_FIELDS = ("taskId", "title", "description", "difficulty", "responseType",
               "rewardAmount", "postedAt", "choices")


def response_key(task_id: str, user_id: str) -> str:
    return f"{task_id}_{user_id}"


def validate_definition(payload: dict) -> dict:
    """Check a task definition; returns the normalized field dict."""
    title = payload.get("title")
    if not isinstance(title, str) or not title.strip():
        raise QrowdError("ValidationFailed", "field title must be a non-empty string")
    description = payload.get("description", "")
    if not isinstance(description, str):
        raise QrowdError("ValidationFailed", "field description must be a string")
    difficulty = payload.get("difficulty")
    if difficulty not in DIFFICULTIES:
        raise QrowdError("ValidationFailed", f"field difficulty must be one of {DIFFICULTIES}")
    response_type = payload.get("responseType")
    if response_type not in RESPONSE_TYPES:
        raise QrowdError("ValidationFailed", f"field responseType must be one of {RESPONSE_TYPES}")
    reward = payload.get("rewardAmount")
    if not isinstance(reward, int) or isinstance(reward, bool) or reward <= 0:
        raise QrowdError("ValidationFailed", "field rewardAmount must be an integer > 0")
    marker_ids = payload.get("markerIds")
    if not isinstance(marker_ids, list) or not marker_ids or not all(
        isinstance(m, str) and m for m in marker_ids
    ):
        raise QrowdError("ValidationFailed", "field markerIds must be a non-empty list of marker ids")
    if len(set(marker_ids)) != len(marker_ids):
        raise QrowdError("ValidationFailed", "field markerIds contains duplicates")
    choices = payload.get("choices")
    if response_type in CHOICE_TYPES:
        if (
            not isinstance(choices, list)
            or len(choices) < 2
            or not all(isinstance(c, str) and c for c in choices)
            or len(set(choices)) != len(choices)
        ):
            raise QrowdError("ValidationFailed", "field choices needs >= 2 distinct non-empty options")
    elif choices is not None:
        raise QrowdError("ValidationFailed", f"field choices is not allowed for {response_type} tasks")
    return {
        "title": title,
        "description": description,
        "difficulty": difficulty,
        "responseType": response_type,
        "rewardAmount": reward,
        "markerIds": sorted(set(marker_ids)),
        "choices": choices if response_type in CHOICE_TYPES else None,
    }


class TaskService(Service):
    name = "task"
    mode = "replicated"

    def operations(self):
        return {
            "create_task": self.op_create_task,
            "publish_task": self.op_publish_task,
            "retire_task": self.op_retire_task,
            "get_task": self.op_get_task,
            "list_tasks": self.op_list_tasks,
            "list_for_marker": self.op_list_for_marker,
            "submit_response": self.op_submit_response,
            "upload_media": self.op_upload_media,
        }

    # administration --------------------------------------------------------
    def op_create_task(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        definition = validate_definition(payload)
        for marker_id in definition["markerIds"]:
            if self.data.docs.get_or_none(self.name, MARKERS, marker_id) is None:
                raise QrowdError("ValidationFailed", f"field markerIds names unknown marker {marker_id}")
        task_id = new_id()
        doc = dict(definition)
        doc.update({
            "taskId": task_id,
            "status": "draft",
            "createdAt": self.clock.next(),
            "postedAt": None,
        })
        self.data.docs.put(self.name, TASKS, task_id, doc)
        return {"taskId": task_id, "status": "draft"}

    def op_publish_task(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        task = self._task(require(payload, "taskId"))
        if task["status"] != "draft":
            raise QrowdError("InvalidTransition", f"cannot publish a {task['status']} task")
        task["status"] = "published"
        task["postedAt"] = self.clock.next()
        self.data.docs.put(self.name, TASKS, task["taskId"], task)
        return {"taskId": task["taskId"], "status": "published", "postedAt": task["postedAt"]}

    def op_retire_task(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        task = self._task(require(payload, "taskId"))
        if task["status"] != "published":
            raise QrowdError("InvalidTransition", f"cannot retire a {task['status']} task")
        task["status"] = "retired"
        self.data.docs.put(self.name, TASKS, task["taskId"], task)
        return {"taskId": task["taskId"], "status": "retired"}

    def op_get_task(self, payload: dict) -> dict:
        task = self._task(require(payload, "taskId"))
        card = {k: task[k] for k in CARD_FIELDS}
        card["status"] = task["status"]
        return card

    def op_list_tasks(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        status = payload.get("status")
        tasks = [doc for _, doc in self.data.docs.scan(self.name, TASKS)]
        if status is not None:
            tasks = [t for t in tasks if t["status"] == status]
        tasks.sort(key=lambda t: (t["createdAt"], t["taskId"]))
        return {"tasks": tasks}

    # participant flow ---------------------------------------------------------
    def op_list_for_marker(self, payload: dict) -> dict:
        marker_id = require(payload, "markerId")
        user_id = require(payload, "userId")
        if self.data.docs.get_or_none(self.name, MARKERS, marker_id) is None:
            raise QrowdError("UnknownMarker", f"no marker {marker_id}")
        session_id = payload.get("sessionId") or new_id()
        cards = []
        for _, task in self.data.docs.scan(self.name, TASKS):
            if task["status"] != "published" or marker_id not in task["markerIds"]:
                continue
            if self.data.docs.get_or_none(self.name, RESPONSES, response_key(task["taskId"], user_id)):
                continue
            cards.append({k: task[k] for k in CARD_FIELDS})
        cards.sort(key=lambda c: (-c["postedAt"], c["taskId"]))
        for card in cards:
            self.emit_interaction("seen", user_id, session_id=session_id,
                                  task_id=card["taskId"], marker_id=marker_id)
        return {"tasks": cards, "sessionId": session_id}

    def op_submit_response(self, payload: dict) -> dict:
        task_id = require(payload, "taskId")
        user_id = require(payload, "userId")
        marker_id = require(payload, "markerId")
        task = self.data.docs.get_or_none(self.name, TASKS, task_id)
        if task is None or task["status"] == "draft":
            raise QrowdError("UnknownTask", f"no task {task_id}")
        if task["status"] == "retired":
            raise QrowdError("TaskRetired", f"task {task_id} is no longer accepting responses")
        if "body" not in payload:
            raise QrowdError("TypeMismatch", "missing response body")
        body = self._check_body(task, payload["body"])
        congruence = self._congruence(marker_id, payload.get("fix"))
        submitted_at = self.clock.next()
        response = {
            "responseId": new_id(),
            "taskId": task_id,
            "userId": user_id,
            "markerId": marker_id,
            "submittedAt": submitted_at,
            "body": body,
            "congruence": congruence,
        }
        claimed = self.data.docs.put_if_absent(
            self.name, RESPONSES, response_key(task_id, user_id), response
        )
        if not claimed:
            raise QrowdError("DuplicateResponse", "this user already responded to this task")
        session_id = payload.get("sessionId") or new_id()
        self.emit_interaction("completed", user_id, session_id=session_id,
                              task_id=task_id, marker_id=marker_id, at=submitted_at)
        self.publish("task.completed", {
            "userId": user_id,
            "taskId": task_id,
            "responseId": response["responseId"],
            "rewardAmount": task["rewardAmount"],
            "completedAt": submitted_at,
        })
        return {
            "accepted": True,
            "pendingEsm": True,
            "responseId": response["responseId"],
            "congruence": congruence,
        }

    def op_upload_media(self, payload: dict) -> dict:
        media_type = require(payload, "mediaType")
        encoded = require(payload, "data")
        try:
            blob = base64.b64decode(encoded, validate=True)
        except (binascii.Error, ValueError):
            raise QrowdError("MalformedUpload", "data must be base64") from None
        link = self.data.files.put(self.name, blob, media_type)
        stored = self.data.files.get(self.name, link)
        return {"link": link.uri, "sizeBytes": stored.size_bytes, "checksum": stored.checksum}

    # internals ---------------------------------------------------------------
    def _task(self, task_id: str) -> dict:
        task = self.data.docs.get_or_none(self.name, TASKS, task_id)
        if task is None:
            raise QrowdError("UnknownTask", f"no task {task_id}")
        return task

    def _check_body(self, task: dict, body) -> object:
        rtype = task["responseType"]
        if rtype == "text":
            if not isinstance(body, str) or not body.strip():
                raise QrowdError("TypeMismatch", "text task needs a non-empty string body")
            return body
        if rtype == "numeric":
            if not isinstance(body, (int, float)) or isinstance(body, bool) or not math.isfinite(body):
                raise QrowdError("TypeMismatch", "numeric task needs a finite number body")
            return body
        if rtype == "singleChoice":
            if not isinstance(body, int) or isinstance(body, bool):
                raise QrowdError("TypeMismatch", "singleChoice task needs a choice index body")
            if not 0 <= body < len(task["choices"]):
                raise QrowdError("TypeMismatch", f"choice index {body} out of range")
            return body
        if rtype == "multiChoice":
            if (
                not isinstance(body, list)
                or not body
                or not all(isinstance(i, int) and not isinstance(i, bool) for i in body)
            ):
                raise QrowdError("TypeMismatch", "multiChoice task needs a non-empty list of choice indexes")
            if len(set(body)) != len(body) or not all(0 <= i < len(task["choices"]) for i in body):
                raise QrowdError("TypeMismatch", "choice indexes must be distinct and in range")
            return sorted(body)
        # photo | audio: the body is a DataLink into the file store
        try:
            link = DataLink.parse(body)
        except QrowdError:
            raise QrowdError("TypeMismatch", f"{rtype} task needs a file link body") from None
        if link.store != "file":
            raise QrowdError("TypeMismatch", f"{rtype} body must link into the file store")
        try:
            stored = self.data.files.get(self.name, link)
        except QrowdError:
            raise QrowdError("TypeMismatch", "linked file does not exist") from None
        family = "image/" if rtype == "photo" else "audio/"
        if not stored.media_type.startswith(family):
            raise QrowdError("TypeMismatch", f"{rtype} body must be {family}* media")
        return body

    def _congruence(self, marker_id: str, fix) -> dict:
        """Flagging only: failures downgrade to "unknown", never block."""
        if fix is None:
            return {"result": "unknown", "reason": "NoFix"}
        if self.fabric is None:
            return {"result": "unknown", "reason": "NoLocationService"}
        try:
            return self.fabric.request(
                "location.check_congruence",
                {"markerId": marker_id, "fix": fix},
                sender=self.name,
            )
        except QrowdError as exc:
            return {"result": "unknown", "reason": exc.code}
