"""Growable buffers and reusable scratch workspace.

Both follow the same reallocation-minimizing policy: grow to four times the
requested size once a request exceeds half the current capacity, and never
shrink while a run is alive. Each worker owns its arenas; nothing here is
shared across workers.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError, RejectedInputError, ResourceError

GROWTH_FACTOR = 4


def grown_capacity(capacity: int, requested: int) -> int:
    """Capacity after a request: 4x the request once the buffer is half-filled."""
    if requested > capacity // 2:
        return GROWTH_FACTOR * requested
    return capacity


class GrowBuffer:
    """A typed array that only ever grows.

    `data[:len]` is the live region. ensure_capacity preserves contents up to
    len and bumps realloc_count only when an actual reallocation happens.
    """

    def __init__(self, dtype=np.float64, element_shape: tuple[int, ...] = (),
                 capacity: int = 0):
        self.dtype = np.dtype(dtype)
        self.element_shape = tuple(element_shape)
        self.capacity = int(capacity)
        self.len = 0
        self.realloc_count = 0
        self.data = np.zeros((self.capacity, *self.element_shape), dtype=self.dtype)

    @property
    def element_size(self) -> int:
        n = self.dtype.itemsize
        for d in self.element_shape:
            n *= d
        return n

    def ensure_capacity(self, requested: int) -> "GrowBuffer":
        if requested < 0:
            raise RejectedInputError(f"requested capacity must be >= 0, got {requested}")
        new_cap = grown_capacity(self.capacity, requested)
        if new_cap != self.capacity:
            try:
                fresh = np.zeros((new_cap, *self.element_shape), dtype=self.dtype)
            except MemoryError as exc:
                raise ResourceError(
                    f"allocation of {new_cap} x {self.element_shape} "
                    f"{self.dtype} elements failed (requested {requested})") from exc
            fresh[:self.len] = self.data[:self.len]
            self.data = fresh
            self.capacity = new_cap
            self.realloc_count += 1
        return self

    def resize(self, new_len: int) -> np.ndarray:
        """Set the live length, growing capacity as needed; returns the live view."""
        self.ensure_capacity(new_len)
        self.len = new_len
        return self.data[:new_len]


class ScratchPool:
    """Reusable per-purpose workspace blocks keyed by a tag.

    A repeated request at or below a tag's high-water mark performs no
    allocation. Acquisition of a tag while it is still held is a contract
    violation: scratch is handed out between, not during, parallel phases.
    """

    def __init__(self):
        self._blocks: dict[str, np.ndarray] = {}
        self._in_use: set[str] = set()
        self.alloc_count = 0

    def high_water(self, tag: str) -> int:
        block = self._blocks.get(tag)
        return 0 if block is None else block.shape[0]

    def acquire(self, tag: str, size: int, dtype=np.float64) -> np.ndarray:
        if size < 0:
            raise RejectedInputError(f"scratch size must be >= 0, got {size}")
        if tag in self._in_use:
            raise ContractViolationError(f"scratch tag {tag!r} is already acquired")
        dtype = np.dtype(dtype)
        block = self._blocks.get(tag)
        old_cap = 0 if block is None or block.dtype != dtype else block.shape[0]
        new_cap = grown_capacity(old_cap, size)
        if new_cap != old_cap:
            try:
                block = np.empty(new_cap, dtype=dtype)
            except MemoryError as exc:
                raise ResourceError(
                    f"scratch allocation of {new_cap} x {dtype} for tag "
                    f"{tag!r} failed (requested {size})") from exc
            self._blocks[tag] = block
            self.alloc_count += 1
        elif block is None or block.dtype != dtype:
            block = np.empty(0, dtype=dtype)
            self._blocks[tag] = block
        self._in_use.add(tag)
        return block[:size]

    def release(self, tag: str) -> None:
        self._in_use.discard(tag)
