"""Experience-sampling questionnaires and the user feedback channel.

Completing a task queues an event-contingent ESM questionnaire; credits
are awarded only after it is answered, which is enforced here by being the
sole publisher of "esm.completed". Feedback entries give participants a
channel to researchers.
"""

from __future__ import annotations

from ..core import new_id
from ..errors import QrowdError
from .base import Service, require, require_role

INSTRUMENTS = "esmInstruments"
PENDING = "esmPending"
RESPONSES = "esmResponses"
FEEDBACK = "feedback"

SCALES = ("likert5", "likert7", "freeText")
LIKERT_BOUNDS = {"likert5": 5, "likert7": 7}
MAX_FEEDBACK_CHARS = 4000

ACTIVE_POINTER = "active"  # well-known doc id holding the active instrument id


def pending_key(task_id: str, user_id: str) -> str:
    return f"{task_id}_{user_id}"


def validate_items(items: object) -> list[dict]:
    if not isinstance(items, list) or not items:
        raise QrowdError("ValidationFailed", "instrument needs at least one item")
    seen_ids = set()
    cleaned = []
    for item in items:
        if not isinstance(item, dict):
            raise QrowdError("ValidationFailed", "each item must be an object")
        item_id = item.get("itemId")
        prompt = item.get("prompt")
        scale = item.get("scale")
        if not isinstance(item_id, str) or not item_id:
            raise QrowdError("ValidationFailed", "each item needs a non-empty itemId")
        if item_id in seen_ids:
            raise QrowdError("ValidationFailed", f"duplicate itemId {item_id!r}")
        if not isinstance(prompt, str) or not prompt.strip():
            raise QrowdError("ValidationFailed", f"item {item_id!r} needs a prompt")
        if scale not in SCALES:
            raise QrowdError("ValidationFailed", f"item {item_id!r} scale must be one of {SCALES}")
        seen_ids.add(item_id)
        cleaned.append({"itemId": item_id, "prompt": prompt, "scale": scale})
    return cleaned


class EsmService(Service):
    name = "esm"
    mode = "replicated"

    def operations(self):
        return {
            "set_instrument": self.op_set_instrument,
            "active_instrument": self.op_active_instrument,
            "get_instrument": self.op_get_instrument,
            "pending_esm": self.op_pending_esm,
            "submit_esm": self.op_submit_esm,
            "submit_feedback": self.op_submit_feedback,
            "list_feedback": self.op_list_feedback,
            "acknowledge_feedback": self.op_acknowledge_feedback,
        }

    def topics(self):
        return {"task.completed": self.on_task_completed}

    # instruments ------------------------------------------------------------
    def op_set_instrument(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        items = validate_items(payload.get("items"))
        instrument_id = new_id()
        self.data.docs.put(self.name, INSTRUMENTS, instrument_id, {
            "instrumentId": instrument_id,
            "items": items,
            "active": True,
        })
        previous = self.data.docs.get_or_none(self.name, INSTRUMENTS, ACTIVE_POINTER)
        if previous is not None and previous.get("instrumentId"):
            old = self.data.docs.get_or_none(self.name, INSTRUMENTS, previous["instrumentId"])
            if old is not None:
                old["active"] = False
                self.data.docs.put(self.name, INSTRUMENTS, old["instrumentId"], old)
        self.data.docs.put(self.name, INSTRUMENTS, ACTIVE_POINTER, {"instrumentId": instrument_id})
        return {"instrumentId": instrument_id, "items": items}

    def op_active_instrument(self, payload: dict) -> dict:
        instrument = self._active_instrument()
        if instrument is None:
            raise QrowdError("NoActiveInstrument", "no ESM instrument has been configured")
        return instrument

    def op_get_instrument(self, payload: dict) -> dict:
        instrument_id = require(payload, "instrumentId")
        doc = self.data.docs.get_or_none(self.name, INSTRUMENTS, instrument_id)
        if doc is None or instrument_id == ACTIVE_POINTER:
            raise QrowdError("UnknownInstrument", f"no instrument {instrument_id}")
        return doc

    def _active_instrument(self) -> dict | None:
        pointer = self.data.docs.get_or_none(self.name, INSTRUMENTS, ACTIVE_POINTER)
        if pointer is None:
            return None
        return self.data.docs.get_or_none(self.name, INSTRUMENTS, pointer["instrumentId"])

    # completion gate -----------------------------------------------------------
    def on_task_completed(self, payload: dict, env) -> None:
        user_id = payload.get("userId")
        task_id = payload.get("taskId")
        if not user_id or not task_id:
            raise QrowdError("MalformedEvent", "task.completed needs userId and taskId")
        instrument = self._active_instrument()
        entry = {
            "userId": user_id,
            "taskId": task_id,
            "instrumentId": instrument["instrumentId"] if instrument else None,
            "rewardAmount": payload.get("rewardAmount", 0),
            "completedAt": payload.get("completedAt", self.clock.next()),
        }
        # put_if_absent doubles as the at-least-once dedup: a redelivered
        # event finds the entry (or the response) already present
        if self.data.docs.get_or_none(self.name, RESPONSES, pending_key(task_id, user_id)):
            return
        self.data.docs.put_if_absent(self.name, PENDING, pending_key(task_id, user_id), entry)

    def op_pending_esm(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        entries = [
            doc for _, doc in self.data.docs.scan(self.name, PENDING) if doc["userId"] == user_id
        ]
        entries.sort(key=lambda e: (e["completedAt"], e["taskId"]))
        return {
            "pending": [
                {"taskId": e["taskId"], "instrumentId": e["instrumentId"]} for e in entries
            ]
        }

    def op_submit_esm(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        task_id = require(payload, "taskId")
        answers = payload.get("answers")
        if not isinstance(answers, dict):
            raise QrowdError("IncompleteAnswers", "answers must be a map of itemId to answer")
        key = pending_key(task_id, user_id)
        if self.data.docs.get_or_none(self.name, RESPONSES, key) is not None:
            raise QrowdError("DuplicateEsm", "this questionnaire was already submitted")
        entry = self.data.docs.get_or_none(self.name, PENDING, key)
        if entry is None:
            raise QrowdError("NoPendingEsm", f"no pending questionnaire for task {task_id}")
        instrument = None
        if entry["instrumentId"]:
            instrument = self.data.docs.get_or_none(self.name, INSTRUMENTS, entry["instrumentId"])
        if instrument is not None:
            self._check_answers(instrument, answers)
        response = {
            "responseId": new_id(),
            "instrumentId": entry["instrumentId"],
            "taskId": task_id,
            "userId": user_id,
            "answers": answers,
            "submittedAt": self.clock.next(),
        }
        if not self.data.docs.put_if_absent(self.name, RESPONSES, key, response):
            raise QrowdError("DuplicateEsm", "this questionnaire was already submitted")
        self.data.docs.delete(self.name, PENDING, key)
        self.publish("esm.completed", {
            "userId": user_id,
            "taskId": task_id,
            "responseId": response["responseId"],
            "rewardAmount": entry["rewardAmount"],
        })
        return {"accepted": True, "responseId": response["responseId"]}

    def _check_answers(self, instrument: dict, answers: dict) -> None:
        item_ids = {item["itemId"] for item in instrument["items"]}
        missing = sorted(item_ids - set(answers))
        if missing:
            raise QrowdError("IncompleteAnswers", f"missing answers for items: {', '.join(missing)}")
        unknown = sorted(set(answers) - item_ids)
        if unknown:
            raise QrowdError("IncompleteAnswers", f"answers for unknown items: {', '.join(unknown)}")
        for item in instrument["items"]:
            value = answers[item["itemId"]]
            if item["scale"] == "freeText":
                if not isinstance(value, str):
                    raise QrowdError("OutOfRange", f"item {item['itemId']} expects text")
                continue
            bound = LIKERT_BOUNDS[item["scale"]]
            if not isinstance(value, int) or isinstance(value, bool) or not 1 <= value <= bound:
                raise QrowdError(
                    "OutOfRange", f"item {item['itemId']} expects an integer in [1, {bound}]"
                )

    # feedback --------------------------------------------------------------
    def op_submit_feedback(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise QrowdError("EmptyFeedback", "feedback text must be non-empty")
        if len(text) > MAX_FEEDBACK_CHARS:
            raise QrowdError("ValidationFailed", f"feedback longer than {MAX_FEEDBACK_CHARS} chars")
        feedback_id = new_id()
        created_at = self.clock.next()
        self.data.docs.put(self.name, FEEDBACK, feedback_id, {
            "feedbackId": feedback_id,
            "userId": user_id,
            "text": text,
            "createdAt": created_at,
            "status": "new",
        })
        self.emit_interaction("feedback", user_id, session_id=payload.get("sessionId"), at=created_at)
        return {"feedbackId": feedback_id}

    def op_list_feedback(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        status = payload.get("status")
        entries = [doc for _, doc in self.data.docs.scan(self.name, FEEDBACK)]
        if status is not None:
            entries = [e for e in entries if e["status"] == status]
        entries.sort(key=lambda e: (e["createdAt"], e["feedbackId"]))
        return {"feedback": entries}

    def op_acknowledge_feedback(self, payload: dict) -> dict:
        require_role(payload, "researcher")
        feedback_id = require(payload, "feedbackId")
        entry = self.data.docs.get_or_none(self.name, FEEDBACK, feedback_id)
        if entry is None:
            raise QrowdError("UnknownFeedback", f"no feedback {feedback_id}")
        entry["status"] = "acknowledged"
        self.data.docs.put(self.name, FEEDBACK, feedback_id, entry)
        return entry
