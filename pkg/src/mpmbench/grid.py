"""Sparse paged background grid.

Cells are keyed by 64-bit Morton codes interleaving three 21-bit coordinates
(x in the lowest slot). The low 6 bits address a cell inside a 4x4x4 block;
the remaining bits are the block code. Blocks that contain particles
(gblocks) are dilated by their 3x3x3 neighborhood into the physical block
set (pblocks), which is stored densely and addressed through an
open-addressed hash table.

Grid coordinates are biased by a fixed positive cell offset (CELL_BIAS) so
any sane simulation position maps to nonnegative cells.
"""

from __future__ import annotations

import threading

import numpy as np
from numba import njit

from .errors import ResourceError, SpatialDomainError
from .memory import GrowBuffer, grown_capacity

COORD_BITS = 21
COORD_MAX = 1 << COORD_BITS  # exclusive upper bound per axis
CELL_BIAS = 64  # cells added to every coordinate before encoding

# int64 view of the conventional all-ones empty sentinel (0xFFFF...FFFF)
EMPTY_KEY = np.int64(-1)
_HASH_MULT = np.int64(-7046029254386353131)  # 0x9E3779B97F4A7C15 as int64

GRID_CHANNELS = 4  # mass, mom_x, mom_y, mom_z (velocity after the update)
BLOCK_SLOTS = 64   # 4x4x4 cells per block, Morton-ordered


# ---------------------------------------------------------------------------
# Morton coding
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _part1by2(x):
    x &= 0x1FFFFF
    x = (x | (x << 32)) & 0x1F00000000FFFF
    x = (x | (x << 16)) & 0x1F0000FF0000FF
    x = (x | (x << 8)) & 0x100F00F00F00F00F
    x = (x | (x << 4)) & 0x10C30C30C30C30C3
    x = (x | (x << 2)) & 0x1249249249249249
    return x


@njit(cache=True, nogil=True)
def _compact1by2(x):
    x &= 0x1249249249249249
    x = (x ^ (x >> 2)) & 0x10C30C30C30C30C3
    x = (x ^ (x >> 4)) & 0x100F00F00F00F00F
    x = (x ^ (x >> 8)) & 0x1F0000FF0000FF
    x = (x ^ (x >> 16)) & 0x1F00000000FFFF
    x = (x ^ (x >> 32)) & 0x1FFFFF
    return x


@njit(cache=True, nogil=True)
def encode_cell(x, y, z):
    """Morton code of one cell coordinate triple (no range check)."""
    return _part1by2(x) | (_part1by2(y) << 1) | (_part1by2(z) << 2)


@njit(cache=True, nogil=True)
def decode_cell(code):
    return _compact1by2(code), _compact1by2(code >> 1), _compact1by2(code >> 2)


def encode(x: int, y: int, z: int) -> int:
    """Morton-interleaved cell code; coordinates must lie in [0, 2^21)."""
    for c in (x, y, z):
        if not (0 <= c < COORD_MAX):
            raise SpatialDomainError(
                f"cell coordinate {c} outside [0, {COORD_MAX})")
    return int(encode_cell(np.int64(x), np.int64(y), np.int64(z)))


def decode(code: int) -> tuple[int, int, int]:
    x, y, z = decode_cell(np.int64(code))
    return int(x), int(y), int(z)


def block_of(code: int) -> int:
    """Block code of a cell code: the low 6 within-block bits dropped."""
    return int(code) >> 6


def encode_batch(coords: np.ndarray) -> np.ndarray:
    """Vectorized Morton encode of an (n, 3) int array of cell coordinates."""
    c = np.asarray(coords)
    if c.size and (c.min() < 0 or c.max() >= COORD_MAX):
        bad = c[np.any((c < 0) | (c >= COORD_MAX), axis=1)][0]
        raise SpatialDomainError(
            f"cell coordinate {tuple(int(v) for v in bad)} outside [0, {COORD_MAX})")
    out = np.empty(c.shape[0], dtype=np.int64)
    _encode_batch(c.astype(np.int64), out)
    return out


@njit(cache=True, nogil=True)
def _encode_batch(coords, out):
    for i in range(coords.shape[0]):
        out[i] = encode_cell(coords[i, 0], coords[i, 1], coords[i, 2])


@njit(cache=True, nogil=True)
def _decode_batch(codes, out):
    for i in range(codes.shape[0]):
        x, y, z = decode_cell(codes[i])
        out[i, 0] = x
        out[i, 1] = y
        out[i, 2] = z


def decode_batch(codes: np.ndarray) -> np.ndarray:
    out = np.empty((len(codes), 3), dtype=np.int64)
    _decode_batch(np.asarray(codes, dtype=np.int64), out)
    return out


# ---------------------------------------------------------------------------
# Hash table
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _hash_slot(key, shift, mask):
    # multiply-shift: top bits of key * odd constant, masked to table range
    return ((key * _HASH_MULT) >> shift) & mask


@njit(cache=True, nogil=True)
def _hash_insert_batch(keys, vals, shift, mask, codes, out_idx, count_box):
    """Insert codes, assigning consecutive indices on first insertion.

    out_idx[i] receives the index of codes[i]; count_box[0] tracks the next
    free index. Single-writer only.
    """
    for i in range(codes.shape[0]):
        code = codes[i]
        j = _hash_slot(code, shift, mask)
        while True:
            k = keys[j]
            if k == code:
                out_idx[i] = vals[j]
                break
            if k == EMPTY_KEY:
                keys[j] = code
                idx = count_box[0]
                vals[j] = idx
                count_box[0] = idx + 1
                out_idx[i] = idx
                break
            j = (j + 1) & mask


@njit(cache=True, nogil=True)
def _hash_lookup_batch(keys, vals, shift, mask, codes, out_idx):
    for i in range(codes.shape[0]):
        code = codes[i]
        j = _hash_slot(code, shift, mask)
        while True:
            k = keys[j]
            if k == code:
                out_idx[i] = vals[j]
                break
            if k == EMPTY_KEY:
                out_idx[i] = -1
                break
            j = (j + 1) & mask


class BlockHashTable:
    """Open-addressed (linear probing) map from 64-bit block codes to
    consecutive dense indices.

    Capacity is a power of two and is regrown by the arena's 4x rule before
    the load factor would reach 0.5. The all-ones key is the empty sentinel.
    Concurrent inserts from several threads are serialized by a mutex; the
    table state itself is plain shared memory, so lookups from any thread
    observe a consistent map once inserts are quiesced.
    """

    NOT_FOUND = -1

    def __init__(self, capacity: int = 1024):
        capacity = max(int(capacity), 16)
        cap = 1 << (capacity - 1).bit_length()
        self._alloc(cap)
        self.count = 0
        self.realloc_count = 0
        self._lock = threading.Lock()

    def _alloc(self, cap: int) -> None:
        self.capacity = cap
        self._shift = np.int64(64 - cap.bit_length() + 1)
        self._mask = np.int64(cap - 1)
        self._keys = np.full(cap, EMPTY_KEY, dtype=np.int64)
        self._vals = np.full(cap, -1, dtype=np.int64)

    def clear(self) -> None:
        """Forget all entries, keeping capacity."""
        self._keys.fill(EMPTY_KEY)
        self._vals.fill(-1)
        self.count = 0

    @property
    def load_factor(self) -> float:
        return self.count / self.capacity

    def _ensure_room(self, extra: int) -> None:
        needed = 2 * (self.count + extra)  # keep load factor < 0.5
        new_cap = grown_capacity(self.capacity, needed)
        if new_cap == self.capacity:
            return
        new_cap = 1 << (int(new_cap) - 1).bit_length()
        if new_cap > (1 << 62):
            raise ResourceError(f"hash table cannot grow to {new_cap} slots")
        old_keys, old_vals = self._keys, self._vals
        live = old_keys != EMPTY_KEY
        codes = old_keys[live]
        idx = old_vals[live]
        self._alloc(new_cap)
        # reinsert preserving previously assigned indices
        _hash_reinsert(self._keys, self._vals, self._shift, self._mask, codes, idx)
        self.realloc_count += 1

    def insert_batch(self, codes: np.ndarray) -> np.ndarray:
        """Idempotent bulk insert; returns the dense index of each code."""
        codes = np.ascontiguousarray(codes, dtype=np.int64)
        self._ensure_room(len(codes))
        out = np.empty(len(codes), dtype=np.int64)
        box = np.array([self.count], dtype=np.int64)
        _hash_insert_batch(self._keys, self._vals, self._shift, self._mask,
                           codes, out, box)
        self.count = int(box[0])
        return out

    def insert(self, code: int) -> tuple[int, bool]:
        """Thread-safe single insert; returns (index, inserted)."""
        with self._lock:
            before = self.count
            idx = int(self.insert_batch(np.array([code], dtype=np.int64))[0])
            return idx, self.count != before

    def lookup_batch(self, codes: np.ndarray) -> np.ndarray:
        codes = np.ascontiguousarray(codes, dtype=np.int64)
        out = np.empty(len(codes), dtype=np.int64)
        _hash_lookup_batch(self._keys, self._vals, self._shift, self._mask,
                           codes, out)
        return out

    def lookup(self, code: int) -> int:
        return int(self.lookup_batch(np.array([code], dtype=np.int64))[0])


@njit(cache=True, nogil=True)
def _hash_reinsert(keys, vals, shift, mask, codes, idx):
    for i in range(codes.shape[0]):
        code = codes[i]
        j = _hash_slot(code, shift, mask)
        while keys[j] != EMPTY_KEY:
            j = (j + 1) & mask
        keys[j] = code
        vals[j] = idx[i]


# ---------------------------------------------------------------------------
# Block table: dense pblock arrays + neighbor lists + touched flags
# ---------------------------------------------------------------------------

# relative neighbor slot: (dz+1)*9 + (dy+1)*3 + (dx+1), x fastest
_NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)],
    dtype=np.int64)


@njit(cache=True, nogil=True)
def _dilate_and_link(keys, vals, shift, mask, count_box,
                     gblock_codes, n_gblocks, codes_out, neighbor_out):
    """Insert the 27-neighborhood of every gblock and fill neighbor rows.

    gblock codes occupy indices [0, n_gblocks); neighbors extend the dense
    range. Returns -1 on success or the index of a gblock whose neighborhood
    underflows the coordinate domain.
    """
    for g in range(n_gblocks):
        code = gblock_codes[g]
        bx = _compact1by2(code)
        by = _compact1by2(code >> 1)
        bz = _compact1by2(code >> 2)
        slot = 0
        for dz in range(-1, 2):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    nx = bx + dx
                    ny = by + dy
                    nz = bz + dz
                    if nx < 0 or ny < 0 or nz < 0 or \
                       nx >= (1 << 19) or ny >= (1 << 19) or nz >= (1 << 19):
                        return g
                    ncode = encode_cell(nx, ny, nz)
                    j = _hash_slot(ncode, shift, mask)
                    while True:
                        k = keys[j]
                        if k == ncode:
                            idx = vals[j]
                            break
                        if k == EMPTY_KEY:
                            keys[j] = ncode
                            idx = count_box[0]
                            vals[j] = idx
                            count_box[0] = idx + 1
                            codes_out[idx] = ncode
                            break
                        j = (j + 1) & mask
                    neighbor_out[g, slot] = idx
                    slot += 1
    return -1


class BlockTable:
    """Dense pblock directory for one worker.

    Indices [0, n_gblocks) are the particle-holding blocks, in first-insert
    order; the dilated neighbors follow. Neighbor rows are valid for gblock
    rows only. Touched flags come in two parity sets because the raw nodal
    buffers alternate between steps.
    """

    def __init__(self):
        self.hash = BlockHashTable()
        self.codes = GrowBuffer(np.int64)
        self.neighbor = GrowBuffer(np.int32, (27,))
        self.touched = (GrowBuffer(np.uint8), GrowBuffer(np.uint8))
        self.count = 0
        self.n_gblocks = 0

    @property
    def realloc_count(self) -> int:
        return (self.hash.realloc_count + self.codes.realloc_count +
                self.neighbor.realloc_count + self.touched[0].realloc_count +
                self.touched[1].realloc_count)

    def rebuild(self, gblock_codes: np.ndarray) -> np.ndarray:
        """Reset and rebuild from the blocks particles currently occupy.

        Returns the gblock index of each input code. Input order defines the
        dense gblock indexing (duplicates collapse onto one index).
        """
        self.hash.clear()
        codes = np.ascontiguousarray(gblock_codes, dtype=np.int64)
        gidx = self.hash.insert_batch(codes)
        n_g = self.hash.count
        # a gblock's dilation adds at most 26 blocks
        upper = n_g * 27
        self.codes.resize(upper)
        self.neighbor.resize(max(n_g, 1))
        dense = self.codes.data
        # the first n_g dense codes are the unique gblock codes in index order
        uniq = np.empty(n_g, dtype=np.int64)
        uniq[gidx] = codes
        dense[:n_g] = uniq
        self.hash._ensure_room(upper - n_g)
        box = np.array([n_g], dtype=np.int64)
        bad = _dilate_and_link(self.hash._keys, self.hash._vals,
                               self.hash._shift, self.hash._mask, box,
                               uniq, n_g, dense, self.neighbor.data)
        if bad >= 0:
            x, y, z = decode(int(uniq[bad]))
            raise SpatialDomainError(
                f"block ({x - CELL_BIAS // 4}, {y - CELL_BIAS // 4}, "
                f"{z - CELL_BIAS // 4}) touches the domain boundary; scenes "
                f"must leave a one-block margin")
        self.hash.count = int(box[0])
        self.count = int(box[0])
        self.n_gblocks = int(n_g)
        self.codes.len = self.count
        # touched flags are only resized here: the previous-parity set may
        # still be under peer reads, so zeroing is deferred to the owner
        for t in self.touched:
            t.resize(self.count)
        return gidx

    def is_gblock(self, index: int) -> bool:
        return 0 <= index < self.n_gblocks

    def lookup(self, code: int) -> int:
        return self.hash.lookup(code)

    def mark_touched(self, index: int, buffer: int = 0) -> None:
        self.touched[buffer].data[index] = 1

    def clear_touched(self, buffer: int = 0) -> None:
        self.touched[buffer].data[:self.count] = 0

    def touched_indices(self, buffer: int = 0) -> np.ndarray:
        return np.flatnonzero(self.touched[buffer].data[:self.count])


def build_block_tables(gblock_codes: np.ndarray) -> BlockTable:
    """Stand-alone construction of a BlockTable from gblock codes."""
    table = BlockTable()
    table.rebuild(np.asarray(gblock_codes, dtype=np.int64))
    return table


# ---------------------------------------------------------------------------
# Nodal storage
# ---------------------------------------------------------------------------

class GridStore:
    """AoSoA nodal storage for one worker.

    Per pblock and channel there are 64 Morton-ordered slots. `raw` holds
    the two scatter targets that alternate between steps: peers read the
    current step's raw buffer during the reduction, and the previous one may
    still be under peer reads while this worker runs ahead, so the roles
    flip. `vel` receives the reduced and updated nodal values and is never
    read by peers.
    """

    def __init__(self):
        self.raw = (GrowBuffer(np.float64, (GRID_CHANNELS, BLOCK_SLOTS)),
                    GrowBuffer(np.float64, (GRID_CHANNELS, BLOCK_SLOTS)))
        self.vel = GrowBuffer(np.float64, (GRID_CHANNELS, BLOCK_SLOTS))
        # pre-update velocities, allocated only when FLIP blending is on
        self.vel_old: GrowBuffer | None = None
        self.count = 0

    @property
    def realloc_count(self) -> int:
        return (self.raw[0].realloc_count + self.raw[1].realloc_count +
                self.vel.realloc_count)

    def ensure_blocks(self, count: int) -> None:
        """Size all buffers for `count` pblocks and zero the live region."""
        for buf in (*self.raw, self.vel):
            buf.resize(count)
            buf.data[:count] = 0.0
        self.count = count

    def raw_buffer(self, parity: int) -> np.ndarray:
        return self.raw[parity & 1].data

    def clear_raw_blocks(self, parity: int, indices: np.ndarray) -> None:
        if len(indices):
            self.raw[parity & 1].data[indices] = 0.0

    def clear_raw_full(self, parity: int) -> None:
        self.raw[parity & 1].data[:self.count] = 0.0
