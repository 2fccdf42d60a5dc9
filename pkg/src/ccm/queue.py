"""Fixed-capacity FIFO of (feature, label) pairs produced by the student."""

from __future__ import annotations

import numpy as np

from .errors import QueueError

QUEUE_MULTIPLE = 4


class KnowledgeQueue:
    """Ring buffer of raw student features with their labels, oldest first.

    Batches are pushed whole; when a push overflows the capacity, exactly the
    oldest entries are evicted.
    """

    def __init__(self, capacity: int, d: int):
        if capacity <= 0 or d <= 0:
            raise QueueError(f"capacity and d must be positive (got {capacity}, {d})")
        self.capacity = int(capacity)
        self.d = int(d)
        self._feats = np.zeros((self.capacity, self.d))
        self._labels = np.zeros(self.capacity, dtype=np.int64)
        self._start = 0
        self._len = 0
        self.total_pushed = 0

    def __len__(self) -> int:
        return self._len

    @property
    def warmed(self) -> bool:
        return self._len == self.capacity

    def push_batch(self, features, labels) -> "KnowledgeQueue":
        feats = np.asarray(getattr(features, "data", features), dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[1] != self.d:
            raise QueueError(f"feature width {feats.shape[-1] if feats.ndim else None} != queue d={self.d}")
        B = feats.shape[0]
        if labels.shape != (B,):
            raise QueueError(f"{B} feature rows but labels of shape {labels.shape}")
        if B > self.capacity:
            raise QueueError(f"batch of {B} exceeds capacity {self.capacity}")
        overflow = max(0, self._len + B - self.capacity)
        self._start = (self._start + overflow) % self.capacity
        self._len -= overflow
        idx = (self._start + self._len + np.arange(B)) % self.capacity
        self._feats[idx] = feats
        self._labels[idx] = labels
        self._len += B
        self.total_pushed += B
        return self

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of ``(Z_Q, Y_Q)`` ordered oldest first."""
        if self._len == 0:
            raise QueueError("queue not warmed: no entries yet")
        idx = (self._start + np.arange(self._len)) % self.capacity
        return self._feats[idx].copy(), self._labels[idx].copy()

    def state(self) -> dict[str, np.ndarray]:
        if self._len == 0:
            return {"queue.features": np.zeros((0, self.d)), "queue.labels": np.zeros(0, dtype=np.int64)}
        z, y = self.snapshot()
        return {"queue.features": z, "queue.labels": y}

    @classmethod
    def from_state(cls, capacity: int, d: int, arrays: dict[str, np.ndarray], total_pushed: int = 0):
        q = cls(capacity, d)
        z, y = arrays["queue.features"], arrays["queue.labels"]
        if len(y):
            q.push_batch(z, y)
        q.total_pushed = int(total_pushed)
        return q


def new_queue(batch_size: int, num_domains: int, d: int, multiple: int = QUEUE_MULTIPLE) -> KnowledgeQueue:
    """Queue sized ``multiple * batch_size * num_domains`` (multiple defaults to 4)."""
    for name, v in (("batch_size", batch_size), ("num_domains", num_domains), ("d", d), ("multiple", multiple)):
        if int(v) <= 0:
            raise QueueError(f"{name} must be positive, got {v}")
    return KnowledgeQueue(multiple * batch_size * num_domains, d)
