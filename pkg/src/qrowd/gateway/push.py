"""Per-user push channels with bounded offline buffering.

A message to a connected user is delivered on every open channel; a user
seen within the offline window gets it buffered (bounded, oldest evicted);
anyone else loses it against a drop counter. One lock covers channels,
buffers, and the sends themselves, which is what guarantees per-channel
ordering between a buffered flush and live deliveries.
"""

from __future__ import annotations

import threading
import time
from collections import deque

from ..core import new_id


class PushRegistry:
    def __init__(self, buffer_size: int = 100, offline_window_s: float = 600.0,
                 clock=time.monotonic):
        self.buffer_size = buffer_size
        self.offline_window_s = offline_window_s
        self.clock = clock
        self.dropped = 0
        self._lock = threading.Lock()
        self._channels: dict[str, dict[str, object]] = {}
        self._buffers: dict[str, deque] = {}
        self._last_seen: dict[str, float] = {}

    def touch(self, user_id: str) -> None:
        """Mark the user reachable before their channel is live, so pushes
        racing the connection handshake buffer instead of dropping."""
        with self._lock:
            self._last_seen[user_id] = self.clock()

    def register(self, user_id: str, send) -> str:
        """Open a channel; anything buffered for the user flushes first."""
        connection_id = new_id()
        with self._lock:
            buffered = self._buffers.pop(user_id, None)
            if buffered:
                for message in buffered:
                    send(message)
            self._channels.setdefault(user_id, {})[connection_id] = send
            self._last_seen[user_id] = self.clock()
        return connection_id

    def unregister(self, user_id: str, connection_id: str) -> None:
        with self._lock:
            channels = self._channels.get(user_id)
            if channels is not None:
                channels.pop(connection_id, None)
                if not channels:
                    self._channels.pop(user_id, None)
            self._last_seen[user_id] = self.clock()

    def push(self, user_id: str, payload: dict) -> str:
        """Returns "delivered", "buffered", or "dropped"."""
        with self._lock:
            channels = self._channels.get(user_id)
            if channels:
                delivered = False
                for connection_id, send in list(channels.items()):
                    try:
                        send(payload)
                        delivered = True
                    except Exception:
                        channels.pop(connection_id, None)
                if not channels:
                    self._channels.pop(user_id, None)
                    self._last_seen[user_id] = self.clock()
                if delivered:
                    return "delivered"
            last = self._last_seen.get(user_id)
            if last is not None and self.clock() - last <= self.offline_window_s:
                buffer = self._buffers.setdefault(user_id, deque(maxlen=self.buffer_size))
                if len(buffer) == self.buffer_size:
                    self.dropped += 1
                buffer.append(payload)
                return "buffered"
            self.dropped += 1
            return "dropped"

    def open_channels(self, user_id: str) -> int:
        with self._lock:
            return len(self._channels.get(user_id, {}))

    def buffered(self, user_id: str) -> int:
        with self._lock:
            return len(self._buffers.get(user_id, ()))
