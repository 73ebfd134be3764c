"""
Un-prioritized FIFO replay buffer over CLRL transition records.
"""

import numpy as np

from scripts.dataset import record_dtype
from scripts.errors import EmptyDatasetError


class ReplayBuffer:
    def __init__(self, capacity, grid_side):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.storage = np.zeros(self.capacity, dtype=record_dtype(grid_side))
        self.ptr, self.size = 0, 0

    def __len__(self):
        return self.size

    def push(self, record):
        self.storage[self.ptr] = record
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def extend(self, records):
        for rec in records:
            self.push(rec)

    def sample(self, batch_size, rng):
        if self.size == 0:
            raise EmptyDatasetError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.storage[idx]

    def contents(self):
        """Stored records, oldest first."""
        if self.size < self.capacity:
            return self.storage[: self.size].copy()
        return np.concatenate([self.storage[self.ptr :], self.storage[: self.ptr]])
