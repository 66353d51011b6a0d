"""Credit ledger and coin redemption.

The ledger is append-only and is the source of truth; per-user balances
are cached in memory (this service runs as a singleton) and rebuilt by
folding the ledger at startup. Redemptions are two-phase against the
dispenser: the ledger entry is written together with the redemption doc
at state "dispensing" only after the device acks, and a device error or
timeout fails the redemption and refunds automatically. A redemption the
device never acknowledged leaves no trace.
"""

from __future__ import annotations

from ..core import new_id
from ..errors import QrowdError
from .base import Service, require
from ..devices.dispenser import DeviceUnreachable

LEDGER = "ledger"
REDEMPTIONS = "redemptions"

EFFECTIVE_STATES = ("dispensing", "dispensed")


def fold_balances(entries: list[dict], redemptions: dict[str, dict]) -> dict[str, int]:
    """Recompute every balance from scratch: awards count fully, redemption
    entries count only while their redemption is dispensing or dispensed."""
    balances: dict[str, int] = {}
    for entry in entries:
        user = entry["userId"]
        if entry["kind"] == "award":
            balances[user] = balances.get(user, 0) + entry["amount"]
        elif entry["kind"] == "redemption":
            redemption = redemptions.get(entry["refId"])
            if redemption is not None and redemption["state"] in EFFECTIVE_STATES:
                balances[user] = balances.get(user, 0) - entry["amount"]
    return balances


class RewardService(Service):
    name = "reward"
    mode = "singleton"

    def __init__(self, data, config, device=None):
        super().__init__(data, config)
        self.device = device
        self._balances: dict[str, int] = {}
        self._rebuild()

    def operations(self):
        return {
            "balance": self.op_balance,
            "redeem": self.op_redeem,
            "get_redemption": self.op_get_redemption,
            "ledger": self.op_ledger,
        }

    def topics(self):
        return {"esm.completed": self.on_esm_completed}

    # cache ----------------------------------------------------------------
    def _rebuild(self) -> None:
        # A "dispensing" redemption found at startup lost its outcome watcher
        # with the previous process; refund it rather than leave credits in
        # limbo (conservative: the user may get free coins, never lose credits).
        for rid, doc in self.data.docs.scan(self.name, REDEMPTIONS):
            if doc["state"] in ("requested", "dispensing", "failed"):
                doc["state"] = "refunded"
                self.data.docs.put(self.name, REDEMPTIONS, rid, doc)
        entries = [doc for _, doc in self.data.docs.scan(self.name, LEDGER)]
        redemptions = {rid: doc for rid, doc in self.data.docs.scan(self.name, REDEMPTIONS)}
        self._balances = fold_balances(entries, redemptions)

    def _user_lock(self, user_id: str):
        return self.data.locks.lock(f"ledger:{user_id}")

    def balance_of(self, user_id: str) -> int:
        with self._user_lock(user_id):
            return self._balances.get(user_id, 0)

    # operations ---------------------------------------------------------------
    def op_balance(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        return {"userId": user_id, "balance": self.balance_of(user_id)}

    def op_redeem(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        credits = payload.get("credits")
        if not isinstance(credits, int) or isinstance(credits, bool) or credits <= 0:
            raise QrowdError("ValidationFailed", "credits must be a positive integer")
        if credits < self.config.coin_price:
            raise QrowdError(
                "BelowMinimum", f"minimum redemption is {self.config.coin_price} credits"
            )
        if self.device is None:
            raise DeviceUnreachable("no dispenser configured")
        coins = credits // self.config.coin_price
        nonce = new_id()
        redemption_id = new_id()
        with self._user_lock(user_id):
            balance = self._balances.get(user_id, 0)
            if credits > balance:
                raise QrowdError("InsufficientCredits", f"balance {balance} < {credits}")
            # device ack first: an unreachable device must leave no ledger entry
            self.device.dispense(
                nonce, coins,
                lambda outcome, reason: self._on_outcome(redemption_id, user_id, outcome, reason),
            )
            redemption = {
                "redemptionId": redemption_id,
                "userId": user_id,
                "credits": credits,
                "coins": coins,
                "state": "dispensing",
                "nonce": nonce,
                "at": self.clock.next(),
            }
            self.data.docs.put(self.name, REDEMPTIONS, redemption_id, redemption)
            entry_id = new_id()
            self.data.docs.put(self.name, LEDGER, entry_id, {
                "entryId": entry_id,
                "userId": user_id,
                "kind": "redemption",
                "amount": credits,
                "refId": redemption_id,
                "at": redemption["at"],
            })
            self._balances[user_id] = balance - credits
            # published under the lock so a fast device outcome cannot put
            # its failed/refunded updates ahead of this dispensing one
            self.publish("redemption.updated", self._public(redemption))
        self.emit_interaction("redeem", user_id, session_id=payload.get("sessionId"))
        return self._public(redemption)

    def _on_outcome(self, redemption_id: str, user_id: str, outcome: str, reason) -> None:
        with self._user_lock(user_id):
            redemption = self.data.docs.get_or_none(self.name, REDEMPTIONS, redemption_id)
            if redemption is None or redemption["state"] != "dispensing":
                return
            if outcome == "done":
                redemption["state"] = "dispensed"
                self.data.docs.put(self.name, REDEMPTIONS, redemption_id, redemption)
            else:
                redemption["state"] = "failed"
                redemption["failureReason"] = reason
                self.data.docs.put(self.name, REDEMPTIONS, redemption_id, redemption)
                self.publish("redemption.updated", self._public(redemption))
                redemption["state"] = "refunded"
                self.data.docs.put(self.name, REDEMPTIONS, redemption_id, redemption)
                self._balances[user_id] = self._balances.get(user_id, 0) + redemption["credits"]
        self.publish("redemption.updated", self._public(redemption))

    def op_get_redemption(self, payload: dict) -> dict:
        redemption_id = require(payload, "redemptionId")
        redemption = self.data.docs.get_or_none(self.name, REDEMPTIONS, redemption_id)
        if redemption is None:
            raise QrowdError("UnknownRedemption", f"no redemption {redemption_id}")
        return self._public(redemption)

    def op_ledger(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        entries = [
            doc for _, doc in self.data.docs.scan(self.name, LEDGER) if doc["userId"] == user_id
        ]
        entries.sort(key=lambda e: (e["at"], e["entryId"]))
        return {"userId": user_id, "entries": entries, "balance": self.balance_of(user_id)}

    # award gate ------------------------------------------------------------
    def on_esm_completed(self, payload: dict, env) -> None:
        user_id = payload.get("userId")
        task_id = payload.get("taskId")
        amount = payload.get("rewardAmount")
        if not user_id or not task_id:
            raise QrowdError("MalformedEvent", "esm.completed needs userId and taskId")
        if not isinstance(amount, int) or isinstance(amount, bool) or amount <= 0:
            return
        # award uniqueness per (userId, taskId) is the ledger doc key itself,
        # so claiming and appending are one atomic write: duplicate event
        # deliveries award at most once, and a crash can never leave a claim
        # without its entry
        entry_id = f"award_{user_id}_{task_id}"
        with self._user_lock(user_id):
            claimed = self.data.docs.put_if_absent(self.name, LEDGER, entry_id, {
                "entryId": entry_id,
                "userId": user_id,
                "kind": "award",
                "amount": amount,
                "refId": task_id,
                "at": self.clock.next(),
            })
            if not claimed:
                return
            self._balances[user_id] = self._balances.get(user_id, 0) + amount
        self.publish("credit.awarded", {
            "userId": user_id,
            "taskId": task_id,
            "amount": amount,
            "responseId": payload.get("responseId"),
        })

    def _public(self, redemption: dict) -> dict:
        return {
            "redemptionId": redemption["redemptionId"],
            "userId": redemption["userId"],
            "credits": redemption["credits"],
            "coins": redemption["coins"],
            "state": redemption["state"],
            "at": redemption["at"],
        }
