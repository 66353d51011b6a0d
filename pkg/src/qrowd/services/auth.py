"""Merged authentication and user-management service.

One service deliberately covers registration, login, token issuance and
verification, profiles, and aggregate per-user stats. Runs in singleton
mode: the account store serializes writes through the service inbox, and
stats fold asynchronously from "task.completed" and "credit.awarded"
events.

Tokens are three-part base64url (header.claims.signature) signed with
HMAC-SHA-256; the signing secret comes from the AUTH_SECRET environment
variable via the platform config.
"""

from __future__ import annotations

import base64
import hashlib
import hmac
import os

from ..core import canonical_json, email_invalid_reason, from_json, new_id
from ..errors import QrowdError
from .base import Service, require

USERS = "users"
EMAIL_INDEX = "emailIndex"
USER_STATS = "userStats"

_SCRYPT_R = 8
_SCRYPT_P = 1


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).decode("ascii").rstrip("=")


def _unb64url(text: str) -> bytes:
    return base64.urlsafe_b64decode(text + "=" * (-len(text) % 4))


def hash_password(password: str, scrypt_n: int) -> str:
    salt = os.urandom(16)
    digest = hashlib.scrypt(password.encode("utf-8"), salt=salt, n=scrypt_n, r=_SCRYPT_R, p=_SCRYPT_P)
    return f"scrypt${scrypt_n}${_b64url(salt)}${_b64url(digest)}"


def check_password(password: str, stored: str) -> bool:
    try:
        scheme, n, salt_b64, digest_b64 = stored.split("$")
        if scheme != "scrypt":
            return False
        salt = _unb64url(salt_b64)
        expect = _unb64url(digest_b64)
        got = hashlib.scrypt(password.encode("utf-8"), salt=salt, n=int(n), r=_SCRYPT_R, p=_SCRYPT_P)
        return hmac.compare_digest(got, expect)
    except (ValueError, TypeError):
        return False


class TokenCodec:
    """Issues and verifies signed bearer tokens. verify never raises."""

    def __init__(self, secret: str, ttl_ms: int):
        self._key = secret.encode("utf-8")
        self.ttl_ms = ttl_ms

    def issue(self, user_id: str, role: str, now: int) -> dict:
        header = _b64url(canonical_json({"alg": "HS256", "typ": "JWT"}))
        claims_doc = {
            "userId": user_id,
            "role": role,
            "issuedAt": now,
            "expiresAt": now + self.ttl_ms,
        }
        claims = _b64url(canonical_json(claims_doc))
        sig = _b64url(self._sign(f"{header}.{claims}"))
        return {"token": f"{header}.{claims}.{sig}", "expiresAt": claims_doc["expiresAt"]}

    def verify(self, token: object, now: int) -> dict:
        if not isinstance(token, str) or token.count(".") != 2:
            return {"accepted": False, "reason": "malformed"}
        header, claims_b64, sig = token.split(".")
        expect = _b64url(self._sign(f"{header}.{claims_b64}"))
        if not hmac.compare_digest(sig, expect):
            return {"accepted": False, "reason": "bad-signature"}
        try:
            claims = from_json(_unb64url(claims_b64))
            user_id = claims["userId"]
            role = claims["role"]
            expires_at = claims["expiresAt"]
        except (ValueError, KeyError, TypeError):
            return {"accepted": False, "reason": "malformed"}
        if not isinstance(expires_at, int) or expires_at < now:
            return {"accepted": False, "reason": "expired"}
        return {"accepted": True, "userId": user_id, "role": role, "expiresAt": expires_at}

    def _sign(self, signing_input: str) -> bytes:
        return hmac.new(self._key, signing_input.encode("ascii"), hashlib.sha256).digest()


class AuthService(Service):
    name = "auth"
    mode = "singleton"

    def __init__(self, data, config):
        super().__init__(data, config)
        self.tokens = TokenCodec(config.auth_secret, config.token_ttl_ms)

    def operations(self):
        return {
            "register": self.op_register,
            "login": self.op_login,
            "verify": self.op_verify,
            "get_profile": self.op_get_profile,
        }

    def topics(self):
        return {
            "task.completed": self.on_task_completed,
            "credit.awarded": self.on_credit_awarded,
        }

    # operations -----------------------------------------------------------
    def op_register(self, payload: dict) -> dict:
        email = require(payload, "email")
        password = require(payload, "password")
        user_id = self.create_account(email, password, role="participant")
        return {"userId": user_id}

    def create_account(self, email: str, password: str, role: str) -> str:
        reason = email_invalid_reason(email)
        if reason is not None:
            raise QrowdError("InvalidEmail", f"invalid email: {reason}")
        if len(password) < self.config.min_password_len:
            raise QrowdError(
                "WeakPassword", f"password must be at least {self.config.min_password_len} characters"
            )
        user_id = new_id()
        # the index claim is the uniqueness point: case-insensitive, atomic
        claimed = self.data.docs.put_if_absent(
            self.name, EMAIL_INDEX, email.lower(), {"userId": user_id, "email": email}
        )
        if not claimed:
            raise QrowdError("EmailTaken", "an account with this email already exists")
        self.data.docs.put(self.name, USERS, user_id, {
            "userId": user_id,
            "email": email,
            "passwordHash": hash_password(password, self.config.scrypt_n),
            "role": role,
            "createdAt": self.clock.next(),
            "lastLoginAt": None,
        })
        self.data.docs.put(self.name, USER_STATS, user_id, {
            "userId": user_id,
            "tasksCompleted": 0,
            "creditsEarned": 0,
            "lastLogin": None,
        })
        return user_id

    def op_login(self, payload: dict) -> dict:
        email = require(payload, "email")
        password = require(payload, "password")
        entry = self.data.docs.get_or_none(self.name, EMAIL_INDEX, email.lower())
        if entry is None:
            # burn comparable time so unknown emails are not distinguishable
            check_password(password, hash_password("decoy-password", self.config.scrypt_n))
            raise QrowdError("BadCredentials", "email or password incorrect")
        user = self.data.docs.get(self.name, USERS, entry["userId"])
        if not check_password(password, user["passwordHash"]):
            raise QrowdError("BadCredentials", "email or password incorrect")
        now = self.clock.next()
        token = self.tokens.issue(user["userId"], user["role"], now)
        user["lastLoginAt"] = now
        self.data.docs.put(self.name, USERS, user["userId"], user)
        stats = self.data.docs.get(self.name, USER_STATS, user["userId"])
        stats["lastLogin"] = now
        self.data.docs.put(self.name, USER_STATS, user["userId"], stats)
        self.emit_interaction("login", user["userId"], session_id=payload.get("sessionId"))
        return {
            "token": token["token"],
            "expiresAt": token["expiresAt"],
            "userId": user["userId"],
            "role": user["role"],
        }

    def op_verify(self, payload: dict) -> dict:
        return self.tokens.verify(payload.get("token"), self.clock.next())

    def op_get_profile(self, payload: dict) -> dict:
        user_id = require(payload, "userId")
        user = self.data.docs.get_or_none(self.name, USERS, user_id)
        if user is None:
            raise QrowdError("UnknownUser", f"no user {user_id}")
        stats = self.data.docs.get(self.name, USER_STATS, user_id)
        return {
            "userId": user["userId"],
            "email": user["email"],
            "role": user["role"],
            "createdAt": user["createdAt"],
            "lastLoginAt": user["lastLoginAt"],
            "stats": {
                "tasksCompleted": stats["tasksCompleted"],
                "creditsEarned": stats["creditsEarned"],
                "lastLogin": stats["lastLogin"],
            },
        }

    # event folds -------------------------------------------------------------
    def on_task_completed(self, payload: dict, env) -> None:
        if self.event_seen(env):
            return
        stats = self.data.docs.get_or_none(self.name, USER_STATS, payload.get("userId", ""))
        if stats is None:
            return
        stats["tasksCompleted"] += 1
        self.data.docs.put(self.name, USER_STATS, stats["userId"], stats)

    def on_credit_awarded(self, payload: dict, env) -> None:
        if self.event_seen(env):
            return
        stats = self.data.docs.get_or_none(self.name, USER_STATS, payload.get("userId", ""))
        if stats is None:
            return
        stats["creditsEarned"] += payload.get("amount", 0)
        self.data.docs.put(self.name, USER_STATS, stats["userId"], stats)
