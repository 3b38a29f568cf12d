"""AoSoA particle storage, particle coding, and the sorting machinery.

Particles live in fixed-width lane groups; each group draws all its active
lanes from a single particle block, so a group is also the unit of the
within-group radix sort and of the subgroup reduction in the scatter phase.
Padding lanes carry zeroed channels.

A full histogram sort to cell granularity happens only when the mapping is
rebuilt; between rebuilds only the 10-bit within-free-zone keys are kept
fresh and sorted per group.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .domain import MaterialKind
from .errors import ContractViolationError, SpatialDomainError
from .grid import CELL_BIAS, COORD_MAX, encode_batch
from .memory import GrowBuffer

# channel indices inside one AoSoA packet
CH_POS = 0            # 3 slots
CH_VEL = 3            # 3 slots
CH_C = 6              # 9 slots, row-major affine velocity matrix
CH_MASS = 15
CH_DEF = 16           # J (1 slot, fluid) or F (9 slots, elastic)

N_CHANNELS_FLUID = 17
N_CHANNELS_ELASTIC = 25

# local 10-bit key packing: lx + 10*(ly + 10*lz), lx/ly/lz in [0, 10)
LANE_KEY_LIMIT = 1000


def n_channels(kind: MaterialKind) -> int:
    return N_CHANNELS_FLUID if kind == MaterialKind.WEAKLY_COMPRESSIBLE_FLUID \
        else N_CHANNELS_ELASTIC


# ---------------------------------------------------------------------------
# Particle coding
# ---------------------------------------------------------------------------

def particle_code(pos, dx: float, bias: int = CELL_BIAS) -> int:
    """Morton code of the stencil base cell floor(pos/dx - 0.5) (+ bias)."""
    return int(particle_code_batch(np.asarray(pos, dtype=np.float64).reshape(1, 3),
                                   dx, bias)[0])


def particle_code_batch(pos: np.ndarray, dx: float, bias: int = CELL_BIAS) -> np.ndarray:
    cells = np.floor(pos / dx - 0.5).astype(np.int64) + bias
    if cells.size and (cells.min() < 0 or cells.max() >= COORD_MAX):
        bad = pos[np.any((cells < 0) | (cells >= COORD_MAX), axis=1)][0]
        raise SpatialDomainError(
            f"position {tuple(float(v) for v in bad)} maps outside the biased domain")
    return encode_batch(cells)


# ---------------------------------------------------------------------------
# Sorting
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _counting_sort_perm(keys, counts, perm):
    """Stable counting sort; perm receives source indices in key order."""
    n = keys.shape[0]
    counts[:] = 0
    for i in range(n):
        counts[keys[i]] += 1
    total = 0
    for k in range(counts.shape[0]):
        c = counts[k]
        counts[k] = total
        total += c
    for i in range(n):
        k = keys[i]
        perm[counts[k]] = i
        counts[k] += 1


def stable_counting_sort(keys: np.ndarray, domain: int | None = None) -> np.ndarray:
    """Permutation that stably sorts `keys`; equal keys keep input order."""
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    if domain is None:
        domain = int(keys.max()) + 1 if len(keys) else 1
    counts = np.zeros(domain, dtype=np.int64)
    perm = np.empty(len(keys), dtype=np.int64)
    _counting_sort_perm(keys, counts, perm)
    return perm


@njit(cache=True, nogil=True)
def _radix10_order(keys, length, order, scratch):
    """Stable 10-bit LSD radix sort of one lane group (two 5-bit passes).

    `order` and `scratch` must hold at least `length` entries; on return
    order[j] is the lane holding the j-th smallest key.
    """
    counts = np.zeros(32, dtype=np.int64)
    for l in range(length):
        order[l] = l
    # pass 1: low 5 bits
    for l in range(length):
        counts[keys[l] & 31] += 1
    total = 0
    for b in range(32):
        c = counts[b]
        counts[b] = total
        total += c
    for l in range(length):
        b = keys[l] & 31
        scratch[counts[b]] = l
        counts[b] += 1
    # pass 2: high 5 bits
    counts[:] = 0
    for j in range(length):
        counts[(keys[scratch[j]] >> 5) & 31] += 1
    total = 0
    for b in range(32):
        c = counts[b]
        counts[b] = total
        total += c
    for j in range(length):
        l = scratch[j]
        b = (keys[l] >> 5) & 31
        order[counts[b]] = l
        counts[b] += 1


def lane_radix_sort10(keys) -> np.ndarray:
    """Within-group order sorted by 10-bit key; equal keys stay contiguous."""
    keys = np.ascontiguousarray(keys, dtype=np.int64)
    if len(keys) > 64:
        raise ContractViolationError(
            f"lane group of {len(keys)} exceeds the maximum lane width 64")
    if len(keys) and (keys.min() < 0 or keys.max() >= 1024):
        raise ContractViolationError(
            f"lane key outside [0, 1024): the free-zone invariant was broken upstream")
    order = np.empty(len(keys), dtype=np.int64)
    scratch = np.empty(len(keys), dtype=np.int64)
    _radix10_order(keys, len(keys), order, scratch)
    return order


# ---------------------------------------------------------------------------
# Lane-group construction
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _build_groups(sorted_block, lane_width, group_len, group_block,
                  slot_group, slot_lane):
    """Assign (group, lane) slots to particles sorted by block then cell.

    A new group opens on a block change or when the current one fills; all
    active lanes of a group therefore share one particle block.
    """
    g = -1
    lane = lane_width
    prev = np.int64(-1)
    for i in range(sorted_block.shape[0]):
        b = sorted_block[i]
        if b != prev or lane == lane_width:
            g += 1
            group_block[g] = b
            lane = 0
            prev = b
        slot_group[i] = g
        slot_lane[i] = lane
        lane += 1
        group_len[g] = lane
    return g + 1


@njit(cache=True, nogil=True)
def _gather_live(data, group_len, quarantined, orig_id, flat, ids):
    """Compact live (non-quarantined) particles into flat rows."""
    n = 0
    for g in range(group_len.shape[0]):
        for l in range(group_len[g]):
            if quarantined[g, l]:
                continue
            for c in range(data.shape[1]):
                flat[n, c] = data[g, c, l]
            ids[n] = orig_id[g, l]
            n += 1
    return n


@njit(cache=True, nogil=True)
def _scatter_sorted(flat, ids, perm, slot_group, slot_lane, data, orig_id):
    for j in range(perm.shape[0]):
        src = perm[j]
        g = slot_group[j]
        l = slot_lane[j]
        for c in range(flat.shape[1]):
            data[g, c, l] = flat[src, c]
        orig_id[g, l] = ids[src]


@njit(cache=True, nogil=True)
def _gather_full(data, group_len, lane_key, quarantined, orig_id,
                 group_block, flat, keys, quar, ids, blocks):
    """Flatten all stored particles (including quarantined ones), carrying
    lane keys and flags; used by the between-rebuild full resort."""
    n = 0
    for g in range(group_len.shape[0]):
        for l in range(group_len[g]):
            for c in range(data.shape[1]):
                flat[n, c] = data[g, c, l]
            keys[n] = lane_key[g, l]
            quar[n] = quarantined[g, l]
            ids[n] = orig_id[g, l]
            blocks[n] = group_block[g]
            n += 1
    return n


@njit(cache=True, nogil=True)
def _scatter_full(flat, keys, quar, ids, perm, slot_group, slot_lane,
                  data, lane_key, quarantined, orig_id):
    for j in range(perm.shape[0]):
        src = perm[j]
        g = slot_group[j]
        l = slot_lane[j]
        for c in range(flat.shape[1]):
            data[g, c, l] = flat[src, c]
        lane_key[g, l] = keys[src]
        quarantined[g, l] = quar[src]
        orig_id[g, l] = ids[src]


@njit(cache=True, nogil=True)
def _recompute_lane_keys(data, group_len, group_origin, inv_dx, bias, lane_key):
    """10-bit within-free-zone keys from current positions.

    Keys are clamped into range; out-of-zone particles are about to trigger
    a rebuild anyway and their clamped key is never trusted.
    """
    for g in range(group_len.shape[0]):
        ox = group_origin[g, 0] - 4
        oy = group_origin[g, 1] - 4
        oz = group_origin[g, 2] - 4
        for l in range(group_len[g]):
            bx = np.int64(np.floor(data[g, CH_POS + 0, l] * inv_dx - 0.5)) + bias - ox
            by = np.int64(np.floor(data[g, CH_POS + 1, l] * inv_dx - 0.5)) + bias - oy
            bz = np.int64(np.floor(data[g, CH_POS + 2, l] * inv_dx - 0.5)) + bias - oz
            if bx < 0:
                bx = 0
            elif bx > 9:
                bx = 9
            if by < 0:
                by = 0
            elif by > 9:
                by = 9
            if bz < 0:
                bz = 0
            elif bz > 9:
                bz = 9
            lane_key[g, l] = bx + 10 * (by + 10 * bz)


# ---------------------------------------------------------------------------
# Store
# ---------------------------------------------------------------------------

class ParticleStore:
    """Particle state in lane_width-wide AoSoA packets.

    One packet per lane group: data[g, channel, lane]. Appended particles sit
    in a staging list until the next rebuild folds them in (additions are a
    rebuild trigger; deletions happen only as compaction of quarantined
    particles at rebuild time).
    """

    def __init__(self, kind: MaterialKind, lane_width: int = 32):
        self.kind = kind
        self.lane_width = int(lane_width)
        self.nch = n_channels(kind)
        self.data = GrowBuffer(np.float64, (self.nch, self.lane_width))
        self.orig_id = GrowBuffer(np.int64, (self.lane_width,))
        self.lane_key = GrowBuffer(np.int64, (self.lane_width,))
        self.quarantined = GrowBuffer(np.uint8, (self.lane_width,))
        self.group_len = GrowBuffer(np.int32)
        self.group_block = GrowBuffer(np.int32)
        self.group_origin = GrowBuffer(np.int32, (3,))
        self.n_groups = 0
        self.count = 0
        self._staged: list[tuple[np.ndarray, ...]] = []
        self._staged_count = 0
        self._next_id = 0

    @property
    def realloc_count(self) -> int:
        return sum(b.realloc_count for b in (
            self.data, self.orig_id, self.lane_key, self.quarantined,
            self.group_len, self.group_block, self.group_origin))

    @property
    def staged_count(self) -> int:
        return self._staged_count

    def default_deformation(self, n: int) -> np.ndarray:
        if self.kind == MaterialKind.WEAKLY_COMPRESSIBLE_FLUID:
            return np.ones((n, 1))
        return np.tile(np.eye(3).reshape(9), (n, 1))

    def stage_append(self, positions, velocities, masses,
                     deformation=None, affine=None, ids=None) -> int:
        """Queue particles for the next rebuild; returns how many were staged.

        ids default to a store-local counter; pass externally assigned ids to
        keep identities globally unique across workers.
        """
        pos = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        n = pos.shape[0]
        if n == 0:
            return 0
        vel = np.atleast_2d(np.asarray(velocities, dtype=np.float64))
        mass = np.broadcast_to(np.asarray(masses, dtype=np.float64), (n,)).copy()
        defo = self.default_deformation(n) if deformation is None \
            else np.asarray(deformation, dtype=np.float64).reshape(n, -1)
        C = np.zeros((n, 9)) if affine is None \
            else np.asarray(affine, dtype=np.float64).reshape(n, 9)
        if ids is None:
            ids = np.arange(self._next_id, self._next_id + n, dtype=np.int64)
            self._next_id += n
        else:
            ids = np.asarray(ids, dtype=np.int64).reshape(n)
            self._next_id = max(self._next_id, int(ids.max()) + 1)
        self._staged.append((pos, vel, C, mass, defo, ids))
        self._staged_count += n
        return n

    def gather_flat(self):
        """Live particles plus staging, flattened to (n, channels) rows."""
        total = self.count + self._staged_count
        flat = np.zeros((total, self.nch))
        ids = np.empty(total, dtype=np.int64)
        n = 0
        if self.n_groups:
            n = _gather_live(self.data.data[:self.n_groups],
                             self.group_len.data[:self.n_groups],
                             self.quarantined.data[:self.n_groups],
                             self.orig_id.data[:self.n_groups], flat, ids)
        for pos, vel, C, mass, defo, sid in self._staged:
            m = pos.shape[0]
            flat[n:n + m, CH_POS:CH_POS + 3] = pos
            flat[n:n + m, CH_VEL:CH_VEL + 3] = vel
            flat[n:n + m, CH_C:CH_C + 9] = C
            flat[n:n + m, CH_MASS] = mass
            flat[n:n + m, CH_DEF:CH_DEF + defo.shape[1]] = defo
            ids[n:n + m] = sid
            n += m
        self._staged.clear()
        self._staged_count = 0
        return flat[:n], ids[:n]

    def histogram_sort(self, flat: np.ndarray, ids: np.ndarray,
                       keys: np.ndarray, counts_scratch: np.ndarray | None = None,
                       perm_out: np.ndarray | None = None) -> np.ndarray:
        """Stable counting sort by (block index << 6 | cell bits) keys, then
        repack into lane groups padded to lane_width.

        Returns the sort permutation. Group block indices and lengths are
        rebuilt; group origins must be refreshed by the caller (they need the
        block code directory).
        """
        n = len(keys)
        domain = (int(keys.max()) >> 6) + 1 << 6 if n else 1
        if counts_scratch is None or counts_scratch.shape[0] < domain:
            counts_scratch = np.zeros(domain, dtype=np.int64)
        if perm_out is None or perm_out.shape[0] < n:
            perm_out = np.empty(n, dtype=np.int64)
        counts = counts_scratch[:domain]
        perm = perm_out[:n]
        _counting_sort_perm(np.ascontiguousarray(keys, dtype=np.int64), counts, perm)

        sorted_block = (keys[perm] >> 6).astype(np.int64)
        max_groups = n + 1  # every block change can open a group
        self.group_len.resize(max_groups)
        self.group_block.resize(max_groups)
        slot_group = np.empty(n, dtype=np.int64)
        slot_lane = np.empty(n, dtype=np.int64)
        ngroups = int(_build_groups(sorted_block, self.lane_width,
                                    self.group_len.data, self.group_block.data,
                                    slot_group, slot_lane)) if n else 0
        self.n_groups = ngroups
        self.group_len.len = ngroups
        self.group_block.len = ngroups
        self.group_origin.resize(max(ngroups, 1))

        for buf in (self.data, self.orig_id, self.lane_key, self.quarantined):
            buf.resize(max(ngroups, 1))
            buf.data[:ngroups] = 0
        if n:
            _scatter_sorted(flat, ids, perm, slot_group, slot_lane,
                            self.data.data[:ngroups], self.orig_id.data[:ngroups])
        self.count = n
        return perm

    def resort_within_blocks(self, scratch) -> None:
        """Re-sort all particles to cell granularity inside their assigned
        blocks (the full-sort-every-step ablation arm).

        Block assignment and therefore the group structure are unchanged;
        only the lane order within each block's groups tightens so subgroup
        reduction sees maximal runs.
        """
        n = self.count
        G = self.n_groups
        if n == 0:
            return
        flat = scratch.acquire("resort_flat", n * self.nch).reshape(n, self.nch)
        keys = scratch.acquire("resort_keys", n, np.int64)
        quar = scratch.acquire("resort_quar", n, np.uint8)
        ids = scratch.acquire("resort_ids", n, np.int64)
        blocks = scratch.acquire("resort_blocks", n, np.int64)
        try:
            _gather_full(self.data.data[:G], self.group_len.data[:G],
                         self.lane_key.data[:G], self.quarantined.data[:G],
                         self.orig_id.data[:G], self.group_block.data[:G],
                         flat, keys, quar, ids, blocks)
            sort_keys = (blocks << 10) | keys
            domain = ((int(blocks.max()) + 1) << 10)
            counts = scratch.acquire("resort_counts", domain, np.int64)
            perm = scratch.acquire("resort_perm", n, np.int64)
            try:
                _counting_sort_perm(sort_keys, counts, perm)
                slot_group = np.empty(n, dtype=np.int64)
                slot_lane = np.empty(n, dtype=np.int64)
                ngroups = int(_build_groups(blocks[perm], self.lane_width,
                                            self.group_len.data,
                                            self.group_block.data,
                                            slot_group, slot_lane))
                if ngroups != G:
                    raise ContractViolationError(
                        "full resort changed the group structure")
                _scatter_full(flat, keys, quar, ids, perm, slot_group,
                              slot_lane, self.data.data[:G],
                              self.lane_key.data[:G],
                              self.quarantined.data[:G],
                              self.orig_id.data[:G])
            finally:
                scratch.release("resort_counts")
                scratch.release("resort_perm")
        finally:
            for tag in ("resort_flat", "resort_keys", "resort_quar",
                        "resort_ids", "resort_blocks"):
                scratch.release(tag)

    def set_group_origins(self, block_coords: np.ndarray) -> None:
        """Record each group's block corner cell (biased), i.e. 4 * coords."""
        self.group_origin.data[:self.n_groups] = 4 * block_coords

    def refresh_lane_keys(self, dx: float, bias: int = CELL_BIAS) -> None:
        if self.n_groups:
            _recompute_lane_keys(self.data.data[:self.n_groups],
                                 self.group_len.data[:self.n_groups],
                                 self.group_origin.data[:self.n_groups],
                                 1.0 / dx, bias, self.lane_key.data[:self.n_groups])

    # convenience views -----------------------------------------------------

    def positions_with_ids(self):
        flat = np.empty((max(self.count, 1), self.nch))
        ids = np.empty(max(self.count, 1), dtype=np.int64)
        n = 0
        if self.n_groups:
            n = _gather_live(self.data.data[:self.n_groups],
                             self.group_len.data[:self.n_groups],
                             np.zeros_like(self.quarantined.data[:self.n_groups]),
                             self.orig_id.data[:self.n_groups], flat, ids)
        return flat[:n, CH_POS:CH_POS + 3].copy(), ids[:n].copy()

    def total_mass(self) -> float:
        if not self.n_groups:
            return 0.0
        return float(self.data.data[:self.n_groups, CH_MASS, :].sum())

    def total_momentum(self) -> np.ndarray:
        if not self.n_groups:
            return np.zeros(3)
        d = self.data.data[:self.n_groups]
        m = d[:, CH_MASS, :]
        return np.array([(m * d[:, CH_VEL + a, :]).sum() for a in range(3)])
