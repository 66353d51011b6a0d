"""At-least-once publish/subscribe core.

Subscriptions are durable per (topic, subscriberService): an event published
while the subscriber's instances are down stays queued and is redelivered
once delivery succeeds again, so consumers must deduplicate on messageId.
Per-topic order is preserved per publisher; queues are bounded by a
retention window and drop oldest on overflow.
"""

from __future__ import annotations

import threading
import time
from collections import deque
from typing import Callable

from ..errors import QueueUnavailable
from .envelope import Envelope

DeliverFn = Callable[[str, Envelope], None]

DEFAULT_RETENTION = 10_000


class _SubscriberQueue:
    def __init__(self, topic: str, subscriber: str, retention: int):
        self.topic = topic
        self.subscriber = subscriber
        self.items: deque[Envelope] = deque(maxlen=retention)
        self.cond = threading.Condition()
        self.running = True
        self.in_flight = False
        self.worker: threading.Thread | None = None


class Broker:
    """Topic fan-out with one delivery worker per (topic, subscriber).

    ``deliver`` is the transport hook: it must raise to signal a failed
    delivery attempt, in which case the event stays at the head of the
    queue and is retried after ``retry_backoff`` seconds.
    """

    def __init__(self, deliver: DeliverFn, retention: int = DEFAULT_RETENTION, retry_backoff: float = 0.05):
        self._deliver = deliver
        self._retention = retention
        self._retry_backoff = retry_backoff
        self._lock = threading.Lock()
        self._queues: dict[tuple[str, str], _SubscriberQueue] = {}
        self._running = True
        self.published = 0
        self.delivered = 0

    def subscribe(self, topic: str, subscriber: str) -> None:
        with self._lock:
            if not self._running:
                raise QueueUnavailable()
            key = (topic, subscriber)
            if key in self._queues:
                return
            q = _SubscriberQueue(topic, subscriber, self._retention)
            q.worker = threading.Thread(
                target=self._run_queue, args=(q,), name=f"broker-{topic}-{subscriber}", daemon=True
            )
            self._queues[key] = q
            q.worker.start()

    def unsubscribe(self, topic: str, subscriber: str) -> None:
        with self._lock:
            q = self._queues.pop((topic, subscriber), None)
        if q is not None:
            with q.cond:
                q.running = False
                q.cond.notify_all()

    def publish(self, env: Envelope) -> str:
        """Enqueue for all current subscribers of env.route; returns the messageId ack."""
        with self._lock:
            if not self._running:
                raise QueueUnavailable()
            targets = [q for (topic, _), q in self._queues.items() if topic == env.route]
            self.published += 1
        for q in targets:
            with q.cond:
                q.items.append(env)
                q.cond.notify_all()
        return env.message_id

    def _run_queue(self, q: _SubscriberQueue) -> None:
        while True:
            with q.cond:
                while q.running and not q.items:
                    q.in_flight = False
                    q.cond.notify_all()
                    q.cond.wait()
                if not q.running:
                    q.in_flight = False
                    q.cond.notify_all()
                    return
                env = q.items[0]
                q.in_flight = True
            try:
                self._deliver(q.subscriber, env)
            except Exception:
                time.sleep(self._retry_backoff)
                continue
            with q.cond:
                if q.items and q.items[0] is env:
                    q.items.popleft()
                with self._lock:
                    self.delivered += 1

    def pending(self) -> int:
        with self._lock:
            queues = list(self._queues.values())
        total = 0
        for q in queues:
            with q.cond:
                total += len(q.items) + (1 if q.in_flight else 0)
        return total

    def settle(self, timeout: float = 10.0) -> bool:
        """Block until every queue is drained and idle; False on timeout."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if self.pending() == 0:
                return True
            time.sleep(0.005)
        return self.pending() == 0

    def stop(self) -> None:
        with self._lock:
            self._running = False
            queues = list(self._queues.values())
            self._queues.clear()
        for q in queues:
            with q.cond:
                q.running = False
                q.cond.notify_all()
