"""Universal object queue, momentum head mirroring, and the contrastive loss.

The queue is a fixed-capacity FIFO of unit-norm object embeddings produced
by the slowly-updated momentum head; its normalized mean (the object center)
acts as the anchor of the contrastive loss. Gradients never flow into the
queue or the momentum parameters.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, add, div, exp, log, matmul, sqrt, sub, tsum


class ObjectQueue:
    """Fixed-capacity FIFO of unit-norm embedding vectors."""

    def __init__(self, capacity=4096, dim=32):
        if capacity < 1 or dim < 1:
            raise ValueError("ObjectQueue: capacity and dim must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._store = np.zeros((self.capacity, self.dim), dtype=np.float32)
        self.count = 0
        self.cursor = 0

    def randomize(self, rng):
        """Fill to capacity with unit-normalized Gaussian vectors."""
        vecs = rng.standard_normal((self.capacity, self.dim))
        self._store = (vecs / np.linalg.norm(vecs, axis=1, keepdims=True)).astype(np.float32)
        self.count = self.capacity
        self.cursor = 0

    def enqueue(self, vectors):
        """Normalize and append vectors, evicting the oldest beyond capacity."""
        vectors = np.asarray(vectors, dtype=np.float32).reshape(-1, self.dim)
        norms = np.linalg.norm(vectors, axis=1)
        if np.any(norms == 0):
            raise ValueError("enqueue: zero vector cannot be normalized")
        vectors = vectors / norms[:, None]
        for v in vectors:
            self._store[self.cursor] = v
            self.cursor = (self.cursor + 1) % self.capacity
            self.count = min(self.count + 1, self.capacity)

    def contents(self):
        """Stored embeddings, oldest first."""
        if self.count < self.capacity:
            return self._store[:self.count].copy()
        return np.roll(self._store, -self.cursor, axis=0).copy()

    def __len__(self):
        return self.count

    def state_arrays(self, prefix="queue"):
        return {
            f"{prefix}.embeddings": self._store,
            f"{prefix}.meta": np.array([self.count, self.cursor], dtype=np.float32),
        }

    def load_state_arrays(self, arrays, prefix="queue"):
        store = np.asarray(arrays[f"{prefix}.embeddings"], dtype=np.float32)
        if store.shape != (self.capacity, self.dim):
            raise ValueError(
                f"queue state shape {store.shape} != ({self.capacity}, {self.dim})")
        self._store = store.copy()
        meta = arrays[f"{prefix}.meta"]
        self.count = int(round(float(meta[0])))
        self.cursor = int(round(float(meta[1])))


def object_center(queue):
    """Unit-normalized mean of all stored embeddings."""
    if len(queue) == 0:
        raise ValueError("object_center: queue is empty")
    mean = queue.contents().mean(axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise ValueError("object_center: stored embeddings sum to zero")
    return (mean / norm).astype(np.float32)


class ContrastiveHeads:
    """Online head parameters plus their EMA-updated momentum twin.

    ``online`` maps names to trainable Tensors; the momentum copies are plain
    arrays, initialized equal and moved by ``ema_update`` only.
    """

    def __init__(self, online, momentum_rate=0.999):
        if not 0.0 <= momentum_rate < 1.0:
            raise ValueError(f"momentum rate must be in [0, 1), got {momentum_rate}")
        self.online = online
        self.momentum_rate = float(momentum_rate)
        self.momentum = {k: p.data.copy() for k, p in online.items()}

    def ema_update(self):
        """theta' <- alpha * theta' + (1 - alpha) * theta, elementwise."""
        a = self.momentum_rate
        for k, p in self.online.items():
            m = self.momentum[k]
            m *= a
            m += (1.0 - a) * p.data

    def momentum_tensors(self):
        """Momentum weights wrapped as constant Tensors (no gradient flow)."""
        return {k: Tensor(v) for k, v in self.momentum.items()}

    def state_arrays(self, prefix="momentum"):
        return {f"{prefix}.{k}": v for k, v in self.momentum.items()}

    def load_state_arrays(self, arrays, prefix="momentum"):
        for k in self.momentum:
            self.momentum[k] = np.asarray(arrays[f"{prefix}.{k}"],
                                          dtype=self.momentum[k].dtype).copy()


def l2_normalize(x, eps=1e-12):
    """Row-normalize a Tensor along its last axis (differentiable)."""
    sq = tsum(x * x, axis=-1, keepdims=True)
    return div(x, sqrt(add(sq, eps)))


def contrastive_loss(center, positives, negatives=None):
    """-log( sum exp(v.k+) / (sum exp(v.k+) + sum exp(v.k-)) ).

    ``center`` is a plain unit vector (treated as constant); positives and
    negatives are Tensors of shape (n, D) holding normalized online-head
    embeddings. With no negatives the loss is exactly zero.
    """
    if positives.shape[0] == 0:
        raise ValueError("contrastive_loss: need at least one positive")
    v = Tensor(np.asarray(center, dtype=positives.dtype).reshape(-1, 1))
    s_pos = tsum(exp(matmul(positives, v)))
    if negatives is None or negatives.shape[0] == 0:
        return sub(log(s_pos), log(s_pos))
    s_neg = tsum(exp(matmul(negatives, v)))
    return sub(log(add(s_pos, s_neg)), log(s_pos))
