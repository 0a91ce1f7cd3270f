"""
Momentum-contrast machinery: the key encoder kept as a moving average of
the query encoder, the FIFO queue of negative keys, and the InfoNCE loss.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import ShapeError

logger = logging.getLogger(__name__)


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm key embeddings."""

    def __init__(self, capacity, dim):
        if capacity < 1 or dim < 1:
            raise ShapeError(f"queue needs capacity >= 1 and dim >= 1, got {capacity} and {dim}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.storage = np.zeros((self.capacity, self.dim), dtype=np.float32)
        self.cursor = 0
        self.fill = 0

    def __len__(self):
        return self.fill

    def enqueue_dequeue(self, keys):
        """Write ``keys`` at the cursor, overwriting the oldest entries."""
        keys = keys.data if isinstance(keys, ad.Tensor) else np.asarray(keys, dtype=np.float32)
        if keys.ndim == 1:
            keys = keys[None, :]
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"queue holds {self.dim}-d keys, got batch of shape {keys.shape}")
        offered = len(keys)
        if offered > self.capacity:
            # only the newest K survive; advance as if the older ones had been written
            self.cursor = (self.cursor + offered - self.capacity) % self.capacity
            keys = keys[-self.capacity:]
        idx = (self.cursor + np.arange(len(keys))) % self.capacity
        self.storage[idx] = keys
        self.cursor = int((self.cursor + len(keys)) % self.capacity)
        self.fill = min(self.capacity, self.fill + offered)

    def negatives(self):
        """The stored keys (order is irrelevant to the loss)."""
        return self.storage[:self.fill] if self.fill < self.capacity else self.storage

    def contents(self):
        """Stored keys from oldest to newest."""
        if self.fill < self.capacity:
            return self.storage[:self.fill].copy()
        return np.roll(self.storage, -self.cursor, axis=0)

    def state_arrays(self):
        return {
            'queue.storage': self.storage,
            'queue.state': np.array([self.cursor, self.fill], dtype=np.float32),
        }

    @classmethod
    def from_state_arrays(cls, arrays):
        storage = arrays['queue.storage']
        queue = cls(storage.shape[0], storage.shape[1])
        queue.storage = storage.astype(np.float32).copy()
        cursor, fill = arrays['queue.state']
        queue.cursor, queue.fill = int(cursor), int(fill)
        return queue


@dataclass
class MomentumPair:
    """Trainable query parameters and their momentum copy."""

    query: dict
    key: dict
    momentum: float

    def __post_init__(self):
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {self.momentum}")
        check_matching_shapes(self.query, self.key)

    @classmethod
    def from_query(cls, query, momentum):
        """The key network starts as an exact, gradient-free copy of the query network."""
        return cls(query=query, key=query.copy(requires_grad=False), momentum=momentum)


def check_matching_shapes(query, key):
    if list(query) != list(key):
        raise ShapeError(f"query and key parameter names differ: {list(query)} vs {list(key)}")
    for name in query:
        if query[name].shape != key[name].shape:
            raise ShapeError(f"{name}: query shape {query[name].shape} != key shape {key[name].shape}")


def momentum_update(pair):
    """key <- m * key + (1 - m) * query, elementwise."""
    check_matching_shapes(pair.query, pair.key)
    m = np.float32(pair.momentum)
    rest = np.float32(1.0 - pair.momentum)
    for name, key in pair.key.items():
        key.data = (m * key.data + rest * pair.query[name].data).astype(np.float32)


def info_nce(q, k_pos, negatives, tau):
    """Cross-entropy over [q.k+ ; q.k_i] / tau with the positive at index 0.

    ``q`` is [N,D] (or [D]) and grad-tracking; ``k_pos`` [N,D] and
    ``negatives`` [K,D] are treated as constants. Returns the batch mean.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if isinstance(negatives, NegativeQueue):
        negatives = negatives.negatives()
    negatives = np.asarray(negatives, dtype=np.float32)
    if negatives.ndim != 2 or len(negatives) == 0:
        raise ValueError("negative queue is empty")
    q = ad.as_tensor(q)
    if q.ndim == 1:
        q = ad.reshape(q, (1, q.shape[0]))
    k = ad.detach(k_pos)
    if k.ndim == 1:
        k = ad.reshape(k, (1, k.shape[0]))
    if k.shape != q.shape or negatives.shape[1] != q.shape[1]:
        raise ShapeError(f"q {q.shape}, k+ {k.shape} and negatives {negatives.shape} disagree")

    l_pos = ad.sum_(q * k, axis=1, keepdims=True) / tau
    l_neg = (q @ ad.Tensor(negatives.T)) / tau
    shift = ad.Tensor(np.maximum(l_pos.data, l_neg.data.max(axis=1, keepdims=True)))
    total = ad.exp(l_pos - shift) + ad.sum_(ad.exp(l_neg - shift), axis=1, keepdims=True)
    lse = ad.log(total) + shift
    return ad.mean(lse - l_pos)
