"""Per-step orchestration: amortized rebuild-mapping, fused transfers, grid
update with the cross-worker reduction hook, and the frame loop of one worker.

Phase order per step:

    [rebuild-mapping if flagged] -> clear previously touched raw regions ->
    scatter (P2G or fused G2P2G) -> barrier -> [re-tag if anyone rebuilt] ->
    reduce + grid update -> gather (G2P, unless fused)

The raw nodal buffer alternates between two physical buffers on step parity:
peers read the current step's raw buffer after the barrier, and the previous
one may still be under peer reads while this worker runs ahead, so a fixed
buffer role would race. The reduced result lives in a third, worker-local
buffer that peers never read.

Deterministic mode quantizes every nodal contribution to a fixed-point grid
(stored as integer-valued doubles), which makes nodal sums exact and
independent of lane order, worker count, and rebuild cadence; that is what
the bit-exact cross-configuration oracles rely on.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .domain import Material, SimParams, cfl_dt
from .domain import _corotated_tau
from .errors import ConfigError, ContractViolationError, ModeConflictError
from .grid import CELL_BIAS, BlockTable, GridStore, _compact1by2, decode_batch
from .memory import GrowBuffer, ScratchPool
from .particles import (CH_C, CH_DEF, CH_MASS, CH_POS, CH_VEL, ParticleStore,
                        _radix10_order, particle_code_batch)

log = logging.getLogger(__name__)

# fixed-point scales for deterministic accumulation; sums stay exactly
# representable in doubles while node totals are below 2^53 / scale
MASS_SCALE = float(2 ** 40)
MOM_SCALE = float(2 ** 32)

# free zone around a particle block, in cells relative to the block corner:
# exactly the positions whose stencil stays inside the 3x3x3 pblock
# neighborhood (10 dx wide). The fused transfer checks a one-cell-shrunken
# zone because it scatters immediately after advecting.
FREE_ZONE_LO_CELLS = 3.5
FREE_ZONE_HI_CELLS = 6.5
FUSED_MARGIN_CELLS = 1.0

DEFAULT_FUSED_THRESHOLD = 100_000

# diagnostics counter slots
N_COUNTERS = 6
C_ACCUM = 0        # fused accumulations (one per subgroup-node pair)
C_QUARANTINE = 1
C_DEGENERATE = 2
C_SVD_CLAMP = 3
C_ADDRESS_ERR = 4
C_SUBGROUPS = 5

REBUILD_MODES = ("amortized", "every_step")
SORT_MODES = ("amortized", "full_every_step", "none_between")
FUSION_MODES = ("merged", "split_stress", "split_bc", "split_clear")
TRANSFER_MODES = ("split", "g2p2g")


@dataclass
class PipelineOptions:
    """Ablation toggles and mode switches surfaced to the benchmark CLI."""

    rebuild: str = "amortized"
    sort: str = "amortized"
    fusion: str = "merged"
    transfer: str = "split"
    deterministic: bool = False
    fused_threshold: int = DEFAULT_FUSED_THRESHOLD
    collect_conservation: bool = False

    def __post_init__(self):
        for value, allowed, name in ((self.rebuild, REBUILD_MODES, "rebuild"),
                                     (self.sort, SORT_MODES, "sort"),
                                     (self.fusion, FUSION_MODES, "fusion"),
                                     (self.transfer, TRANSFER_MODES, "transfer")):
            if value not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


@dataclass
class StepFlags:
    rebuild_needed: bool = True  # first step always builds the mapping
    steps_since_rebuild: int = 0
    fused_mode: bool = False
    deterministic_mode: bool = False


@dataclass
class BoundaryBox:
    """Axis-aligned collision box; nodes outside it get their velocity
    clipped (slip: outward normal component) or zeroed (sticky)."""

    min_corner: tuple[float, float, float]
    max_corner: tuple[float, float, float]
    mode: str = "slip"

    def __post_init__(self):
        if self.mode not in ("slip", "sticky"):
            raise ConfigError(f"boundary mode must be slip or sticky, got {self.mode!r}")
        for a in range(3):
            if not self.min_corner[a] < self.max_corner[a]:
                raise ConfigError("boundary box must have min < max per axis")


def free_zone_check(pos, block_origin, dx: float) -> bool:
    """True iff `pos` left the (10 dx)^3 free zone of its particle block.

    block_origin is the world position of the block's corner node. The zone
    is [origin - 3.5 dx, origin + 6.5 dx) per axis: exactly the span whose
    quadratic stencil stays inside the block's 3x3x3 pblock neighborhood.
    """
    p = np.asarray(pos, dtype=np.float64)
    o = np.asarray(block_origin, dtype=np.float64)
    lo = o - FREE_ZONE_LO_CELLS * dx
    hi = o + FREE_ZONE_HI_CELLS * dx
    return bool(np.any(p < lo) | np.any(p >= hi))


# ---------------------------------------------------------------------------
# numba device helpers
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _axis_weights(p, inv_dx):
    b = np.floor(p * inv_dx - 0.5)
    f = p * inv_dx - b
    return np.int64(b), 0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, \
        0.5 * (f - 0.5) ** 2, f


@njit(cache=True, nogil=True, inline="always")
def _node_slot(cx, cy, cz):
    # Morton order of the low two bits per axis
    return (cx & 1) | ((cy & 1) << 1) | ((cz & 1) << 2) | \
        ((cx & 2) << 2) | ((cy & 2) << 3) | ((cz & 2) << 4)


@njit(cache=True, nogil=True)
def _fluid_tau(J, kappa, gamma, clamp_tension):
    # pressure-only stress: tau = -p I, p = kappa (J^-gamma - 1)
    p = kappa * (J ** (-gamma) - 1.0)
    if clamp_tension and p < 0.0:
        p = 0.0
    return -p


@njit(cache=True, nogil=True)
def _scatter_prep(data, quarantined, g, L, mat_kind, mu, lam, kappa, gamma,
                  clamp_tension, density, inv_dx, dx, dt, use_stress_buf,
                  stress_buf, valid, wx, wy, wz, fx, fy, fz, bx, by, bz,
                  mm, mvx, mvy, mvz, Q, counters):
    """Per-lane precomputation for the scatter: weights, momentum, and the
    combined affine term m C + dt * force."""
    coeff_base = -4.0 * dt * inv_dx * inv_dx / density
    for l in range(L):
        valid[l] = 0
        if quarantined[g, l]:
            continue
        m = data[g, CH_MASS, l]
        if m <= 0.0:
            continue
        px = data[g, CH_POS + 0, l]
        py = data[g, CH_POS + 1, l]
        pz = data[g, CH_POS + 2, l]
        vx = data[g, CH_VEL + 0, l]
        vy = data[g, CH_VEL + 1, l]
        vz = data[g, CH_VEL + 2, l]
        finite = np.isfinite(px) and np.isfinite(py) and np.isfinite(pz) and \
            np.isfinite(vx) and np.isfinite(vy) and np.isfinite(vz)
        if not finite:
            quarantined[g, l] = 1
            data[g, CH_MASS, l] = 0.0
            counters[C_QUARANTINE] += 1
            continue
        b, w0, w1, w2, f = _axis_weights(px, inv_dx)
        bx[l] = b
        wx[l, 0], wx[l, 1], wx[l, 2] = w0, w1, w2
        fx[l] = f
        b, w0, w1, w2, f = _axis_weights(py, inv_dx)
        by[l] = b
        wy[l, 0], wy[l, 1], wy[l, 2] = w0, w1, w2
        fy[l] = f
        b, w0, w1, w2, f = _axis_weights(pz, inv_dx)
        bz[l] = b
        wz[l, 0], wz[l, 1], wz[l, 2] = w0, w1, w2
        fz[l] = f
        mm[l] = m
        mvx[l] = m * vx
        mvy[l] = m * vy
        mvz[l] = m * vz
        coeff = coeff_base * m  # = -4 dt V0 / dx^2
        # stress
        if use_stress_buf:
            for r in range(9):
                Q[l, r] = m * data[g, CH_C + r, l] + coeff * stress_buf[g, r, l]
        elif mat_kind == 0:
            J = data[g, CH_DEF, l]
            if J <= 0.0:
                counters[C_DEGENERATE] += 1
                tau = 0.0
            else:
                tau = _fluid_tau(J, kappa, gamma, clamp_tension)
            for r in range(9):
                Q[l, r] = m * data[g, CH_C + r, l]
            Q[l, 0] += coeff * tau
            Q[l, 4] += coeff * tau
            Q[l, 8] += coeff * tau
        else:
            (t00, t01, t02, t10, t11, t12, t20, t21, t22, clamped) = \
                _corotated_tau(data[g, CH_DEF + 0, l], data[g, CH_DEF + 1, l],
                               data[g, CH_DEF + 2, l], data[g, CH_DEF + 3, l],
                               data[g, CH_DEF + 4, l], data[g, CH_DEF + 5, l],
                               data[g, CH_DEF + 6, l], data[g, CH_DEF + 7, l],
                               data[g, CH_DEF + 8, l], mu, lam)
            if clamped:
                counters[C_SVD_CLAMP] += 1
            Q[l, 0] = m * data[g, CH_C + 0, l] + coeff * t00
            Q[l, 1] = m * data[g, CH_C + 1, l] + coeff * t01
            Q[l, 2] = m * data[g, CH_C + 2, l] + coeff * t02
            Q[l, 3] = m * data[g, CH_C + 3, l] + coeff * t10
            Q[l, 4] = m * data[g, CH_C + 4, l] + coeff * t11
            Q[l, 5] = m * data[g, CH_C + 5, l] + coeff * t12
            Q[l, 6] = m * data[g, CH_C + 6, l] + coeff * t20
            Q[l, 7] = m * data[g, CH_C + 7, l] + coeff * t21
            Q[l, 8] = m * data[g, CH_C + 8, l] + coeff * t22
        valid[l] = 1


@njit(cache=True, nogil=True)
def _subgroup_scatter(lane_key, order, L, g, group_origin, neighbor_row,
                      raw, touched, valid, wx, wy, wz, fx, fy, fz,
                      mm, mvx, mvy, mvz, Q, dx, det, counters):
    """Scatter one group: per subgroup of equal cell keys, one fused
    accumulation per stencil node and channel."""
    ox = group_origin[g, 0]
    oy = group_origin[g, 1]
    oz = group_origin[g, 2]
    bcx = ox >> 2
    bcy = oy >> 2
    bcz = oz >> 2
    s0 = 0
    while s0 < L:
        key = lane_key[g, order[s0]]
        s1 = s0 + 1
        while s1 < L and lane_key[g, order[s1]] == key:
            s1 += 1
        counters[C_SUBGROUPS] += 1
        # base cell of this subgroup, from the 10-bit free-zone key
        basex = ox - 4 + key % 10
        basey = oy - 4 + (key // 10) % 10
        basez = oz - 4 + key // 100
        for i in range(3):
            cx = basex + i
            rx = (cx >> 2) - bcx + 1
            for j in range(3):
                cy = basey + j
                ry = (cy >> 2) - bcy + 1
                for k in range(3):
                    cz = basez + k
                    rz = (cz >> 2) - bcz + 1
                    if rx < 0 or rx > 2 or ry < 0 or ry > 2 or rz < 0 or rz > 2:
                        counters[C_ADDRESS_ERR] += 1
                        continue
                    nb = neighbor_row[(rz * 3 + ry) * 3 + rx]
                    if nb < 0:
                        counters[C_ADDRESS_ERR] += 1
                        continue
                    slot = _node_slot(cx, cy, cz)
                    a0 = 0.0
                    a1 = 0.0
                    a2 = 0.0
                    a3 = 0.0
                    for t in range(s0, s1):
                        l = order[t]
                        if not valid[l]:
                            continue
                        w = wx[l, i] * wy[l, j] * wz[l, k]
                        dpx = (i - fx[l]) * dx
                        dpy = (j - fy[l]) * dx
                        dpz = (k - fz[l]) * dx
                        c0 = w * mm[l]
                        c1 = w * (mvx[l] + Q[l, 0] * dpx + Q[l, 1] * dpy + Q[l, 2] * dpz)
                        c2 = w * (mvy[l] + Q[l, 3] * dpx + Q[l, 4] * dpy + Q[l, 5] * dpz)
                        c3 = w * (mvz[l] + Q[l, 6] * dpx + Q[l, 7] * dpy + Q[l, 8] * dpz)
                        if det:
                            c0 = np.rint(c0 * MASS_SCALE)
                            c1 = np.rint(c1 * MOM_SCALE)
                            c2 = np.rint(c2 * MOM_SCALE)
                            c3 = np.rint(c3 * MOM_SCALE)
                        a0 += c0
                        a1 += c1
                        a2 += c2
                        a3 += c3
                    raw[nb, 0, slot] += a0
                    raw[nb, 1, slot] += a1
                    raw[nb, 2, slot] += a2
                    raw[nb, 3, slot] += a3
                    touched[nb] = 1
                    counters[C_ACCUM] += 1
        s0 = s1


@njit(cache=True, nogil=True)
def _p2g_kernel(data, lane_key, quarantined, group_len, group_block,
                group_origin, neighbor, raw, touched, lane_width,
                mat_kind, mu, lam, kappa, gamma, clamp_tension, density,
                dx, dt, det, do_lane_sort, use_stress_buf, stress_buf,
                counters):
    inv_dx = 1.0 / dx
    LW = lane_width
    valid = np.empty(LW, dtype=np.uint8)
    wx = np.empty((LW, 3))
    wy = np.empty((LW, 3))
    wz = np.empty((LW, 3))
    fx = np.empty(LW)
    fy = np.empty(LW)
    fz = np.empty(LW)
    bx = np.empty(LW, dtype=np.int64)
    by = np.empty(LW, dtype=np.int64)
    bz = np.empty(LW, dtype=np.int64)
    mm = np.empty(LW)
    mvx = np.empty(LW)
    mvy = np.empty(LW)
    mvz = np.empty(LW)
    Q = np.empty((LW, 9))
    order = np.empty(LW, dtype=np.int64)
    scr = np.empty(LW, dtype=np.int64)
    for g in range(group_len.shape[0]):
        L = group_len[g]
        if L == 0:
            continue
        _scatter_prep(data, quarantined, g, L, mat_kind, mu, lam, kappa, gamma,
                      clamp_tension, density, inv_dx, dx, dt, use_stress_buf,
                      stress_buf, valid, wx, wy, wz, fx, fy, fz, bx, by, bz,
                      mm, mvx, mvy, mvz, Q, counters)
        if do_lane_sort:
            _radix10_order(lane_key[g], L, order, scr)
        else:
            for l in range(L):
                order[l] = l
        _subgroup_scatter(lane_key, order, L, g, group_origin,
                          neighbor[group_block[g]], raw, touched, valid,
                          wx, wy, wz, fx, fy, fz, mm, mvx, mvy, mvz, Q,
                          dx, det, counters)


@njit(cache=True, nogil=True)
def _stress_kernel(data, quarantined, group_len, mat_kind, mu, lam, kappa,
                   gamma, clamp_tension, stress_buf, counters):
    """Split-stress ablation arm: evaluate stress in its own pass."""
    for g in range(group_len.shape[0]):
        for l in range(group_len[g]):
            if quarantined[g, l] or data[g, CH_MASS, l] <= 0.0:
                continue
            if mat_kind == 0:
                J = data[g, CH_DEF, l]
                if J <= 0.0:
                    counters[C_DEGENERATE] += 1
                    tau = 0.0
                else:
                    tau = _fluid_tau(J, kappa, gamma, clamp_tension)
                for r in range(9):
                    stress_buf[g, r, l] = 0.0
                stress_buf[g, 0, l] = tau
                stress_buf[g, 4, l] = tau
                stress_buf[g, 8, l] = tau
            else:
                (t00, t01, t02, t10, t11, t12, t20, t21, t22, clamped) = \
                    _corotated_tau(data[g, CH_DEF + 0, l], data[g, CH_DEF + 1, l],
                                   data[g, CH_DEF + 2, l], data[g, CH_DEF + 3, l],
                                   data[g, CH_DEF + 4, l], data[g, CH_DEF + 5, l],
                                   data[g, CH_DEF + 6, l], data[g, CH_DEF + 7, l],
                                   data[g, CH_DEF + 8, l], mu, lam)
                if clamped:
                    counters[C_SVD_CLAMP] += 1
                stress_buf[g, 0, l] = t00
                stress_buf[g, 1, l] = t01
                stress_buf[g, 2, l] = t02
                stress_buf[g, 3, l] = t10
                stress_buf[g, 4, l] = t11
                stress_buf[g, 5, l] = t12
                stress_buf[g, 6, l] = t20
                stress_buf[g, 7, l] = t21
                stress_buf[g, 8, l] = t22


@njit(cache=True, nogil=True)
def _gather_advect(data, lane_key, quarantined, group_len, group_block,
                   group_origin, neighbor, vel, vel_old, flip_blend,
                   mat_kind, dx, dt, bias, margin_lo, margin_hi,
                   g_lo, g_hi, out_stats, counters):
    """G2P: gather velocities and affine matrix, advect, update deformation,
    refresh lane keys, and fold in the free-zone check.

    Processes groups [g_lo, g_hi) so the fused transfer can interleave it
    per group. out_stats[0] is OR-ed with 1.0 on any free-zone violation;
    out_stats[1] accumulates the maximum squared particle speed.
    """
    inv_dx = 1.0 / dx
    d_inv = 4.0 * inv_dx * inv_dx
    use_flip = flip_blend > 0.0
    for g in range(g_lo, g_hi):
        L = group_len[g]
        if L == 0:
            continue
        nbrrow = neighbor[group_block[g]]
        ox = group_origin[g, 0]
        oy = group_origin[g, 1]
        oz = group_origin[g, 2]
        bcx = ox >> 2
        bcy = oy >> 2
        bcz = oz >> 2
        # free-zone bounds in world coordinates
        zx0 = (ox - bias - margin_lo) * dx
        zy0 = (oy - bias - margin_lo) * dx
        zz0 = (oz - bias - margin_lo) * dx
        zx1 = (ox - bias + 4.0 + margin_hi) * dx
        zy1 = (oy - bias + 4.0 + margin_hi) * dx
        zz1 = (oz - bias + 4.0 + margin_hi) * dx
        for l in range(L):
            if quarantined[g, l] or data[g, CH_MASS, l] <= 0.0:
                continue
            px = data[g, CH_POS + 0, l]
            py = data[g, CH_POS + 1, l]
            pz = data[g, CH_POS + 2, l]
            bxl, wx0, wx1, wx2, fxl = _axis_weights(px, inv_dx)
            byl, wy0, wy1, wy2, fyl = _axis_weights(py, inv_dx)
            bzl, wz0, wz1, wz2, fzl = _axis_weights(pz, inv_dx)
            bxl += bias
            byl += bias
            bzl += bias
            vx = 0.0
            vy = 0.0
            vz = 0.0
            dvx = 0.0
            dvy = 0.0
            dvz = 0.0
            b00 = 0.0
            b01 = 0.0
            b02 = 0.0
            b10 = 0.0
            b11 = 0.0
            b12 = 0.0
            b20 = 0.0
            b21 = 0.0
            b22 = 0.0
            for i in range(3):
                wxi = wx0 if i == 0 else (wx1 if i == 1 else wx2)
                cx = bxl + i
                rx = (cx >> 2) - bcx + 1
                dpx = (i - fxl) * dx
                for j in range(3):
                    wyj = wy0 if j == 0 else (wy1 if j == 1 else wy2)
                    cy = byl + j
                    ry = (cy >> 2) - bcy + 1
                    dpy = (j - fyl) * dx
                    for k in range(3):
                        wzk = wz0 if k == 0 else (wz1 if k == 1 else wz2)
                        cz = bzl + k
                        rz = (cz >> 2) - bcz + 1
                        if rx < 0 or rx > 2 or ry < 0 or ry > 2 or rz < 0 or rz > 2:
                            counters[C_ADDRESS_ERR] += 1
                            continue
                        nb = nbrrow[(rz * 3 + ry) * 3 + rx]
                        if nb < 0:
                            counters[C_ADDRESS_ERR] += 1
                            continue
                        slot = _node_slot(cx, cy, cz)
                        w = wxi * wyj * wzk
                        vnx = vel[nb, 1, slot]
                        vny = vel[nb, 2, slot]
                        vnz = vel[nb, 3, slot]
                        dpz = (k - fzl) * dx
                        vx += w * vnx
                        vy += w * vny
                        vz += w * vnz
                        if use_flip:
                            dvx += w * (vnx - vel_old[nb, 0, slot])
                            dvy += w * (vny - vel_old[nb, 1, slot])
                            dvz += w * (vnz - vel_old[nb, 2, slot])
                        b00 += w * vnx * dpx
                        b01 += w * vnx * dpy
                        b02 += w * vnx * dpz
                        b10 += w * vny * dpx
                        b11 += w * vny * dpy
                        b12 += w * vny * dpz
                        b20 += w * vnz * dpx
                        b21 += w * vnz * dpy
                        b22 += w * vnz * dpz
            c00 = d_inv * b00
            c01 = d_inv * b01
            c02 = d_inv * b02
            c10 = d_inv * b10
            c11 = d_inv * b11
            c12 = d_inv * b12
            c20 = d_inv * b20
            c21 = d_inv * b21
            c22 = d_inv * b22
            if use_flip:
                ovx = data[g, CH_VEL + 0, l]
                ovy = data[g, CH_VEL + 1, l]
                ovz = data[g, CH_VEL + 2, l]
                nvx = (1.0 - flip_blend) * vx + flip_blend * (ovx + dvx)
                nvy = (1.0 - flip_blend) * vy + flip_blend * (ovy + dvy)
                nvz = (1.0 - flip_blend) * vz + flip_blend * (ovz + dvz)
            else:
                nvx = vx
                nvy = vy
                nvz = vz
            npx = px + dt * nvx
            npy = py + dt * nvy
            npz = pz + dt * nvz
            finite = np.isfinite(npx) and np.isfinite(npy) and np.isfinite(npz) \
                and np.isfinite(nvx) and np.isfinite(nvy) and np.isfinite(nvz)
            if not finite:
                quarantined[g, l] = 1
                data[g, CH_MASS, l] = 0.0
                counters[C_QUARANTINE] += 1
                continue
            data[g, CH_POS + 0, l] = npx
            data[g, CH_POS + 1, l] = npy
            data[g, CH_POS + 2, l] = npz
            data[g, CH_VEL + 0, l] = nvx
            data[g, CH_VEL + 1, l] = nvy
            data[g, CH_VEL + 2, l] = nvz
            data[g, CH_C + 0, l] = c00
            data[g, CH_C + 1, l] = c01
            data[g, CH_C + 2, l] = c02
            data[g, CH_C + 3, l] = c10
            data[g, CH_C + 4, l] = c11
            data[g, CH_C + 5, l] = c12
            data[g, CH_C + 6, l] = c20
            data[g, CH_C + 7, l] = c21
            data[g, CH_C + 8, l] = c22
            if mat_kind == 0:
                data[g, CH_DEF, l] *= 1.0 + dt * (c00 + c11 + c22)
            else:
                f00 = data[g, CH_DEF + 0, l]
                f01 = data[g, CH_DEF + 1, l]
                f02 = data[g, CH_DEF + 2, l]
                f10 = data[g, CH_DEF + 3, l]
                f11 = data[g, CH_DEF + 4, l]
                f12 = data[g, CH_DEF + 5, l]
                f20 = data[g, CH_DEF + 6, l]
                f21 = data[g, CH_DEF + 7, l]
                f22 = data[g, CH_DEF + 8, l]
                a00 = 1.0 + dt * c00
                a01 = dt * c01
                a02 = dt * c02
                a10 = dt * c10
                a11 = 1.0 + dt * c11
                a12 = dt * c12
                a20 = dt * c20
                a21 = dt * c21
                a22 = 1.0 + dt * c22
                data[g, CH_DEF + 0, l] = a00 * f00 + a01 * f10 + a02 * f20
                data[g, CH_DEF + 1, l] = a00 * f01 + a01 * f11 + a02 * f21
                data[g, CH_DEF + 2, l] = a00 * f02 + a01 * f12 + a02 * f22
                data[g, CH_DEF + 3, l] = a10 * f00 + a11 * f10 + a12 * f20
                data[g, CH_DEF + 4, l] = a10 * f01 + a11 * f11 + a12 * f21
                data[g, CH_DEF + 5, l] = a10 * f02 + a11 * f12 + a12 * f22
                data[g, CH_DEF + 6, l] = a20 * f00 + a21 * f10 + a22 * f20
                data[g, CH_DEF + 7, l] = a20 * f01 + a21 * f11 + a22 * f21
                data[g, CH_DEF + 8, l] = a20 * f02 + a21 * f12 + a22 * f22
            # free-zone check on the advected position
            if npx < zx0 or npx >= zx1 or npy < zy0 or npy >= zy1 or \
               npz < zz0 or npz >= zz1:
                out_stats[0] = 1.0
            sp = nvx * nvx + nvy * nvy + nvz * nvz
            if sp > out_stats[1]:
                out_stats[1] = sp
            # refresh the 10-bit within-free-zone key
            kx = np.int64(np.floor(npx * inv_dx - 0.5)) + bias - (ox - 4)
            ky = np.int64(np.floor(npy * inv_dx - 0.5)) + bias - (oy - 4)
            kz = np.int64(np.floor(npz * inv_dx - 0.5)) + bias - (oz - 4)
            if kx < 0:
                kx = 0
            elif kx > 9:
                kx = 9
            if ky < 0:
                ky = 0
            elif ky > 9:
                ky = 9
            if kz < 0:
                kz = 0
            elif kz > 9:
                kz = 9
            lane_key[g, l] = kx + 10 * (ky + 10 * kz)


@njit(cache=True, nogil=True)
def _g2p2g_kernel(data, lane_key, quarantined, group_len, group_block,
                  group_origin, neighbor, vel, vel_old, flip_blend, raw,
                  touched, lane_width, mat_kind, mu, lam, kappa, gamma,
                  clamp_tension, density, dx, dt_prev, dt, bias,
                  margin_lo, margin_hi, det, do_lane_sort, out_stats,
                  counters):
    """Fused transfer: the previous step's gather+advect immediately followed
    by this step's scatter, one lane-group at a time."""
    inv_dx = 1.0 / dx
    LW = lane_width
    valid = np.empty(LW, dtype=np.uint8)
    wx = np.empty((LW, 3))
    wy = np.empty((LW, 3))
    wz = np.empty((LW, 3))
    fx = np.empty(LW)
    fy = np.empty(LW)
    fz = np.empty(LW)
    bx = np.empty(LW, dtype=np.int64)
    by = np.empty(LW, dtype=np.int64)
    bz = np.empty(LW, dtype=np.int64)
    mm = np.empty(LW)
    mvx = np.empty(LW)
    mvy = np.empty(LW)
    mvz = np.empty(LW)
    Q = np.empty((LW, 9))
    order = np.empty(LW, dtype=np.int64)
    scr = np.empty(LW, dtype=np.int64)
    for g in range(group_len.shape[0]):
        L = group_len[g]
        if L == 0:
            continue
        # previous step's gather and advection for this group only
        _gather_advect(data, lane_key, quarantined, group_len, group_block,
                       group_origin, neighbor, vel, vel_old, flip_blend,
                       mat_kind, dx, dt_prev, bias, margin_lo, margin_hi,
                       g, g + 1, out_stats, counters)
        # this step's scatter with the advected state
        _scatter_prep(data, quarantined, g, L, mat_kind, mu, lam, kappa, gamma,
                      clamp_tension, density, inv_dx, dx, dt, False,
                      _DUMMY_STRESS, valid, wx, wy, wz, fx, fy, fz, bx, by, bz,
                      mm, mvx, mvy, mvz, Q, counters)
        if do_lane_sort:
            _radix10_order(lane_key[g], L, order, scr)
        else:
            for l in range(L):
                order[l] = l
        _subgroup_scatter(lane_key, order, L, g, group_origin,
                          neighbor[group_block[g]], raw, touched, valid,
                          wx, wy, wz, fx, fy, fz, mm, mvx, mvy, mvz, Q,
                          dx, det, counters)


_DUMMY_STRESS = np.zeros((1, 9, 1))


@njit(cache=True, nogil=True)
def _grid_finalize(vel, touched_idx, codes, det, dt, gx, gy, gz,
                   blo_x, blo_y, blo_z, bhi_x, bhi_y, bhi_z, bc_sticky,
                   apply_bc, dx, bias, vel_old, save_old):
    """Turn reduced nodal sums into velocities: v = mom/mass + dt g, then
    resolve boundary collisions (fused here unless ablated out)."""
    inv_sm = 1.0 / MASS_SCALE
    inv_sp = 1.0 / MOM_SCALE
    for t in range(touched_idx.shape[0]):
        b = touched_idx[t]
        code = codes[b]
        # block corner cell, unbiased
        x0 = 4 * _compact1by2(code) - bias
        y0 = 4 * _compact1by2(code >> 1) - bias
        z0 = 4 * _compact1by2(code >> 2) - bias
        for slot in range(64):
            m = vel[b, 0, slot]
            if m <= 0.0:
                vel[b, 0, slot] = 0.0
                vel[b, 1, slot] = 0.0
                vel[b, 2, slot] = 0.0
                vel[b, 3, slot] = 0.0
                continue
            if det:
                mass = m * inv_sm
                vx = vel[b, 1, slot] * inv_sp / mass
                vy = vel[b, 2, slot] * inv_sp / mass
                vz = vel[b, 3, slot] * inv_sp / mass
            else:
                mass = m
                vx = vel[b, 1, slot] / m
                vy = vel[b, 2, slot] / m
                vz = vel[b, 3, slot] / m
            if save_old:
                vel_old[b, 0, slot] = vx
                vel_old[b, 1, slot] = vy
                vel_old[b, 2, slot] = vz
            vx += dt * gx
            vy += dt * gy
            vz += dt * gz
            if apply_bc:
                sx = (slot & 1) | ((slot >> 2) & 2)
                sy = ((slot >> 1) & 1) | ((slot >> 3) & 2)
                sz = ((slot >> 2) & 1) | ((slot >> 4) & 2)
                px = (x0 + sx) * dx
                py = (y0 + sy) * dx
                pz = (z0 + sz) * dx
                if bc_sticky:
                    if px <= blo_x or px >= bhi_x or py <= blo_y or \
                       py >= bhi_y or pz <= blo_z or pz >= bhi_z:
                        vx = 0.0
                        vy = 0.0
                        vz = 0.0
                else:
                    if (px <= blo_x and vx < 0.0) or (px >= bhi_x and vx > 0.0):
                        vx = 0.0
                    if (py <= blo_y and vy < 0.0) or (py >= bhi_y and vy > 0.0):
                        vy = 0.0
                    if (pz <= blo_z and vz < 0.0) or (pz >= bhi_z and vz > 0.0):
                        vz = 0.0
            vel[b, 0, slot] = mass
            vel[b, 1, slot] = vx
            vel[b, 2, slot] = vy
            vel[b, 3, slot] = vz


@njit(cache=True, nogil=True)
def _grid_bc(vel, touched_idx, codes, blo_x, blo_y, blo_z,
             bhi_x, bhi_y, bhi_z, bc_sticky, dx, bias):
    """Split boundary-resolve ablation arm: a second pass over touched nodes."""
    for t in range(touched_idx.shape[0]):
        b = touched_idx[t]
        code = codes[b]
        x0 = 4 * _compact1by2(code) - bias
        y0 = 4 * _compact1by2(code >> 1) - bias
        z0 = 4 * _compact1by2(code >> 2) - bias
        for slot in range(64):
            if vel[b, 0, slot] <= 0.0:
                continue
            vx = vel[b, 1, slot]
            vy = vel[b, 2, slot]
            vz = vel[b, 3, slot]
            sx = (slot & 1) | ((slot >> 2) & 2)
            sy = ((slot >> 1) & 1) | ((slot >> 3) & 2)
            sz = ((slot >> 2) & 1) | ((slot >> 4) & 2)
            px = (x0 + sx) * dx
            py = (y0 + sy) * dx
            pz = (z0 + sz) * dx
            if bc_sticky:
                if px <= blo_x or px >= bhi_x or py <= blo_y or \
                   py >= bhi_y or pz <= blo_z or pz >= bhi_z:
                    vx = 0.0
                    vy = 0.0
                    vz = 0.0
            else:
                if (px <= blo_x and vx < 0.0) or (px >= bhi_x and vx > 0.0):
                    vx = 0.0
                if (py <= blo_y and vy < 0.0) or (py >= bhi_y and vy > 0.0):
                    vy = 0.0
                if (pz <= blo_z and vz < 0.0) or (pz >= bhi_z and vz > 0.0):
                    vz = 0.0
            vel[b, 1, slot] = vx
            vel[b, 2, slot] = vy
            vel[b, 3, slot] = vz


# ---------------------------------------------------------------------------
# Worker
# ---------------------------------------------------------------------------

@dataclass
class WorkerStepState:
    """What one worker publishes for a step, right before the barrier.

    Peers capture these references only after the barrier and stop using
    them before their next barrier passage, which is what makes the
    alternating raw buffers race-free.
    """

    raw: np.ndarray
    touched: np.ndarray
    codes: np.ndarray
    code_count: int
    rebuilt: bool


_PHASES = ("rebuild", "sort", "p2g", "grid", "g2p")


class Worker:
    """One domain-decomposition worker: owns its particles, block table and
    nodal buffers; interacts with peers only through the shared runtime."""

    def __init__(self, wid: int, runtime, params: SimParams, material: Material,
                 boundary: BoundaryBox | None, options: PipelineOptions):
        self.wid = wid
        self.runtime = runtime
        self.params = params
        self.material = material
        self.boundary = boundary
        self.options = options
        self.store = ParticleStore(material.kind, params.lane_width)
        self.table = BlockTable()
        self.grid = GridStore()
        self.scratch = ScratchPool()
        self.flags = StepFlags(deterministic_mode=options.deterministic)
        self.counters = np.zeros(N_COUNTERS, dtype=np.int64)
        self.conservation: list[tuple] = []
        self.rebuild_steps: list[int] = []
        self.dt = params.dt
        self._vel_dt = params.dt
        self._global_step = 0
        self._pending_gather = False
        self._pending_full_clear_parity = -1
        self._pub_codes = (GrowBuffer(np.int64), GrowBuffer(np.int64))
        self._published_codes = (self._pub_codes[0].data, 0)
        self._rebuild_counter = 0
        self._peer_map: list[np.ndarray | None] = [None] * runtime.n_workers
        self._peer_states: list[WorkerStepState] | None = None
        self._stress_buf = GrowBuffer(np.float64, (9, params.lane_width)) \
            if options.fusion == "split_stress" else None
        self._fused_fallback_logged = False
        self._phase_ms = {k: 0.0 for k in _PHASES}
        self._frame_steps = 0
        self._frame_rebuilds = 0
        self.cfl_mode = False
        k = material.kind
        self._mat = (int(k), material.mu, material.lam, material.bulk_modulus,
                     material.gamma, bool(material.clamp_tension), material.density)

    # -- population --------------------------------------------------------

    def seed_particles(self, positions, velocities, masses, ids) -> int:
        """Initial population; bypasses the fused-mode append restriction."""
        n = self.store.stage_append(positions, velocities, masses, ids=ids)
        self.flags.rebuild_needed = True
        return n

    def append_particles(self, positions, velocities, masses, ids=None) -> int:
        """Queue a particle source emission; forces a rebuild next step."""
        if len(np.atleast_2d(positions)) == 0:
            return 0
        if self.flags.fused_mode:
            raise ModeConflictError(
                "cannot add particles while the fused G2P2G transfer is active")
        n = self.store.stage_append(positions, velocities, masses, ids=ids)
        if n:
            self.flags.rebuild_needed = True
        return n

    # -- per-frame ----------------------------------------------------------

    def begin_frame(self) -> None:
        self._phase_ms = {k: 0.0 for k in _PHASES}
        self._frame_steps = 0
        self._frame_rebuilds = 0

    def run_frame(self) -> None:
        self.begin_frame()
        if self.cfl_mode:
            # particle speeds lag by two steps (published pre-barrier, read
            # post-barrier); the cfl headroom and the sound-speed term absorb
            # the lag, and every worker reads the same slots so the step
            # schedule is identical across worker counts
            c_sound = self.material.sound_speed()
            t = 0.0
            while t < self.params.frame_dt - 1e-12:
                vmax = self.runtime.global_vmax((self._global_step - 2) % 3)
                self.dt = cfl_dt(vmax + c_sound, self.params,
                                 self.params.frame_dt - t)
                self.run_step(self._global_step)
                t += self.dt
                self._frame_steps += 1
        else:
            self.dt = self.params.dt
            for _ in range(self.params.steps_per_frame):
                self.run_step(self._global_step)
                self._frame_steps += 1
        if self._pending_gather:
            # fused mode leaves the last gather for the next step; a frame
            # boundary needs fully advected particles
            self._flush_gather()

    @property
    def frame_steps(self) -> int:
        return self._frame_steps

    @property
    def frame_rebuilds(self) -> int:
        return self._frame_rebuilds

    @property
    def phase_ms(self) -> dict:
        return dict(self._phase_ms)

    @property
    def realloc_count(self) -> int:
        n = (self.store.realloc_count + self.table.realloc_count +
             self.grid.realloc_count + self.scratch.alloc_count +
             self._pub_codes[0].realloc_count + self._pub_codes[1].realloc_count)
        if self._stress_buf is not None:
            n += self._stress_buf.realloc_count
        return n

    # -- one step ------------------------------------------------------------

    def run_step(self, step: int) -> None:
        opts = self.options
        par = step & 1
        if opts.rebuild == "every_step":
            self.flags.rebuild_needed = True
        rebuilt = False
        if self.flags.rebuild_needed:
            if self._pending_gather:
                self._flush_gather()
            self._rebuild(step, par)
            rebuilt = True
        else:
            if opts.sort == "full_every_step" and self.store.count:
                self._full_resort()
            self._clear(par)
        fused_now = self._fused_active()
        self.flags.fused_mode = fused_now
        if fused_now and self._pending_gather:
            self._run_g2p2g(step, par)
        else:
            if self._pending_gather:
                self._flush_gather()
            if opts.fusion == "split_stress":
                self._stress_pass()
            self._run_p2g(step, par)
        self._publish(par, rebuilt)
        self.runtime.barrier_wait(self.wid)
        self._post_barrier(par)
        self._reduce_and_update(par)
        if fused_now:
            self._pending_gather = True
        else:
            self._run_g2p(step)
            self._pending_gather = False
        self.flags.steps_since_rebuild += 1
        self._global_step = step + 1

    # -- phases ---------------------------------------------------------------

    def _fused_active(self) -> bool:
        if self.options.transfer != "g2p2g":
            return False
        if self.store.staged_count:
            return False
        if self.store.count >= self.options.fused_threshold:
            if not self._fused_fallback_logged:
                log.info("worker %d: %d particles exceed the fused-transfer "
                         "threshold of %d; using split transfers",
                         self.wid, self.store.count, self.options.fused_threshold)
                self._fused_fallback_logged = True
            return False
        return True

    def _rebuild(self, step: int, par: int) -> None:
        t0 = time.perf_counter()
        st = self.store
        total = st.count + st.staged_count
        nch = st.nch
        flat_view = self.scratch.acquire("rebuild_flat", max(total, 1) * nch
                                         ).reshape(max(total, 1), nch)
        ids_view = self.scratch.acquire("rebuild_ids", max(total, 1), np.int64)
        try:
            flat, ids = st.gather_flat()
            n = len(ids)
            flat_view[:n] = flat
            ids_view[:n] = ids
            flat = flat_view[:n]
            ids = ids_view[:n]
            codes = particle_code_batch(flat[:, CH_POS:CH_POS + 3], self.params.dx) \
                if n else np.empty(0, dtype=np.int64)
            gidx = self.table.rebuild(codes >> 6)
            t1 = time.perf_counter()
            self._phase_ms["rebuild"] += (t1 - t0) * 1e3
            keys = (gidx << 6) | (codes & 63)
            domain = ((int(keys.max()) >> 6) + 1) << 6 if n else 64
            counts = self.scratch.acquire("sort_counts", domain, np.int64)
            perm = self.scratch.acquire("sort_perm", max(n, 1), np.int64)
            try:
                st.histogram_sort(flat, ids, keys, counts, perm)
            finally:
                self.scratch.release("sort_counts")
                self.scratch.release("sort_perm")
            if st.n_groups:
                bcodes = self.table.codes.data[
                    st.group_block.data[:st.n_groups].astype(np.int64)]
                st.set_group_origins(decode_batch(bcodes).astype(np.int32))
                st.refresh_lane_keys(self.params.dx)
            self._phase_ms["sort"] += (time.perf_counter() - t1) * 1e3
        finally:
            self.scratch.release("rebuild_flat")
            self.scratch.release("rebuild_ids")
        count = self.table.count
        self.grid.vel.resize(count)
        self.grid.vel.data[:count] = 0.0
        self.grid.raw[par].resize(count)
        self.grid.raw[par].data[:count] = 0.0
        self.grid.raw[1 - par].resize(count)
        if self.grid.vel_old is not None:
            self.grid.vel_old.resize(count)
        self.grid.count = count
        self.table.touched[par].data[:count] = 0
        self._pending_full_clear_parity = 1 - par
        pub = self._pub_codes[self._rebuild_counter & 1]
        pub.resize(max(count, 1))
        pub.data[:count] = self.table.codes.data[:count]
        self._rebuild_counter += 1
        self._published_codes = (pub.data, count)
        self.flags.rebuild_needed = False
        self.flags.steps_since_rebuild = 0
        self.rebuild_steps.append(step)
        self._frame_rebuilds += 1

    def _full_resort(self) -> None:
        t0 = time.perf_counter()
        self.store.resort_within_blocks(self.scratch)
        self._phase_ms["sort"] += (time.perf_counter() - t0) * 1e3

    def _clear(self, par: int) -> None:
        count = self.table.count
        rawbuf = self.grid.raw[par]
        tbuf = self.table.touched[par]
        if self._pending_full_clear_parity == par or \
                self.options.fusion == "split_clear":
            rawbuf.resize(count)
            rawbuf.data[:count] = 0.0
            tbuf.data[:count] = 0
            if self._pending_full_clear_parity == par:
                self._pending_full_clear_parity = -1
        else:
            idx = np.flatnonzero(tbuf.data[:count])
            if len(idx):
                rawbuf.data[idx] = 0.0
                tbuf.data[idx] = 0

    def _stress_pass(self) -> None:
        st = self.store
        if not st.n_groups:
            return
        t0 = time.perf_counter()
        self._stress_buf.resize(st.n_groups)
        kind, mu, lam, kappa, gamma, clamp, _ = self._mat
        _stress_kernel(st.data.data[:st.n_groups], st.quarantined.data[:st.n_groups],
                       st.group_len.data[:st.n_groups], kind, mu, lam, kappa,
                       gamma, clamp, self._stress_buf.data[:st.n_groups],
                       self.counters)
        self._phase_ms["p2g"] += (time.perf_counter() - t0) * 1e3

    def _run_p2g(self, step: int, par: int) -> None:
        st = self.store
        if not st.n_groups:
            return
        t0 = time.perf_counter()
        kind, mu, lam, kappa, gamma, clamp, density = self._mat
        use_sb = self.options.fusion == "split_stress"
        sb = self._stress_buf.data[:st.n_groups] if use_sb else _DUMMY_STRESS
        _p2g_kernel(st.data.data[:st.n_groups], st.lane_key.data[:st.n_groups],
                    st.quarantined.data[:st.n_groups],
                    st.group_len.data[:st.n_groups],
                    st.group_block.data[:st.n_groups],
                    st.group_origin.data[:st.n_groups],
                    self.table.neighbor.data, self.grid.raw[par].data,
                    self.table.touched[par].data, st.lane_width,
                    kind, mu, lam, kappa, gamma, clamp, density,
                    self.params.dx, self.dt, self.options.deterministic,
                    self.options.sort != "none_between", use_sb, sb,
                    self.counters)
        self._check_addressing()
        self._phase_ms["p2g"] += (time.perf_counter() - t0) * 1e3

    def _gather_args(self):
        st = self.store
        g = self.grid
        save_old = self.params.flip_blend > 0.0
        if save_old and g.vel_old is None:
            g.vel_old = GrowBuffer(np.float64, (3, 64))
            g.vel_old.resize(self.table.count)
        vel_old = g.vel_old.data if save_old else g.vel.data
        return st, vel_old

    def _run_g2p(self, step: int) -> None:
        st, vel_old = self._gather_args()
        if not st.n_groups:
            self.runtime.publish_vmax(step % 3, self.wid, 0.0)
            return
        t0 = time.perf_counter()
        stats = np.zeros(2)
        _gather_advect(st.data.data[:st.n_groups], st.lane_key.data[:st.n_groups],
                       st.quarantined.data[:st.n_groups],
                       st.group_len.data[:st.n_groups],
                       st.group_block.data[:st.n_groups],
                       st.group_origin.data[:st.n_groups],
                       self.table.neighbor.data, self.grid.vel.data, vel_old,
                       self.params.flip_blend, self._mat[0], self.params.dx,
                       self._vel_dt, CELL_BIAS, FREE_ZONE_LO_CELLS,
                       FREE_ZONE_HI_CELLS - 4.0, 0, st.n_groups, stats,
                       self.counters)
        self._check_addressing()
        if stats[0] > 0.0:
            self.flags.rebuild_needed = True
        self.runtime.publish_vmax(step % 3, self.wid, float(np.sqrt(stats[1])))
        self._phase_ms["g2p"] += (time.perf_counter() - t0) * 1e3

    def _flush_gather(self) -> None:
        self._run_g2p(self._global_step)
        self._pending_gather = False

    def _run_g2p2g(self, step: int, par: int) -> None:
        st, vel_old = self._gather_args()
        if not st.n_groups:
            return
        t0 = time.perf_counter()
        kind, mu, lam, kappa, gamma, clamp, density = self._mat
        stats = np.zeros(2)
        _g2p2g_kernel(st.data.data[:st.n_groups], st.lane_key.data[:st.n_groups],
                      st.quarantined.data[:st.n_groups],
                      st.group_len.data[:st.n_groups],
                      st.group_block.data[:st.n_groups],
                      st.group_origin.data[:st.n_groups],
                      self.table.neighbor.data, self.grid.vel.data, vel_old,
                      self.params.flip_blend, self.grid.raw[par].data,
                      self.table.touched[par].data, st.lane_width,
                      kind, mu, lam, kappa, gamma, clamp, density,
                      self.params.dx, self._vel_dt, self.dt, CELL_BIAS,
                      FREE_ZONE_LO_CELLS - FUSED_MARGIN_CELLS,
                      FREE_ZONE_HI_CELLS - 4.0 - FUSED_MARGIN_CELLS,
                      self.options.deterministic,
                      self.options.sort != "none_between", stats, self.counters)
        self._check_addressing()
        if stats[0] > 0.0:
            self.flags.rebuild_needed = True
        self.runtime.publish_vmax(step % 3, self.wid, float(np.sqrt(stats[1])))
        dt_ms = (time.perf_counter() - t0) * 1e3
        self._phase_ms["p2g"] += 0.5 * dt_ms
        self._phase_ms["g2p"] += 0.5 * dt_ms

    def _publish(self, par: int, rebuilt: bool) -> None:
        codes, count = self._published_codes
        self.runtime.publish_step(par, self.wid, WorkerStepState(
            raw=self.grid.raw[par].data,
            touched=self.table.touched[par].data,
            codes=codes, code_count=count, rebuilt=rebuilt))

    def _post_barrier(self, par: int) -> None:
        if self.runtime.n_workers == 1:
            return
        states = [self.runtime.peer_step(par, q)
                  for q in range(self.runtime.n_workers)]
        if any(s.rebuilt for s in states):
            t0 = time.perf_counter()
            for q, s in enumerate(states):
                if q == self.wid:
                    continue
                codes = s.codes[:s.code_count]
                idx = self.table.hash.lookup_batch(codes)
                m = np.full(self.table.count, -1, dtype=np.int64)
                found = np.flatnonzero(idx >= 0)
                m[idx[found]] = found
                self._peer_map[q] = m
            self._phase_ms["rebuild"] += (time.perf_counter() - t0) * 1e3
        self._peer_states = states

    def _reduce_and_update(self, par: int) -> None:
        t0 = time.perf_counter()
        count = self.table.count
        touched_idx = np.flatnonzero(self.table.touched[par].data[:count])
        vel = self.grid.vel.data
        raw = self.grid.raw[par].data
        vel[touched_idx] = raw[touched_idx]
        if self.runtime.n_workers > 1 and self._peer_states is not None:
            for q, s in enumerate(self._peer_states):
                if q == self.wid:
                    continue
                m = self._peer_map[q]
                if m is None or not len(touched_idx):
                    continue
                sub = m[touched_idx]
                sel = sub >= 0
                if not sel.any():
                    continue
                tloc = touched_idx[sel]
                tq = sub[sel]
                live = s.touched[tq] == 1
                if live.any():
                    vel[tloc[live]] += s.raw[tq[live]]
        if self.options.collect_conservation:
            det = self.options.deterministic
            if len(touched_idx):
                own = raw[touched_idx]
                gm = float(own[:, 0, :].sum())
                gmom = own[:, 1:4, :].sum(axis=(0, 2))
            else:
                gm = 0.0
                gmom = np.zeros(3)
            if det:
                gm /= MASS_SCALE
                gmom = gmom / MOM_SCALE
            self.conservation.append(
                (self.store.total_mass(), *self.store.total_momentum(),
                 gm, *gmom))
        gx, gy, gz = self.params.gravity
        bc = self.boundary
        apply_bc = bc is not None and self.options.fusion != "split_bc"
        save_old = self.params.flip_blend > 0.0
        if save_old and self.grid.vel_old is None:
            self.grid.vel_old = GrowBuffer(np.float64, (3, 64))
        if save_old:
            self.grid.vel_old.resize(count)
        vel_old = self.grid.vel_old.data if save_old else vel
        if bc is not None:
            blo = bc.min_corner
            bhi = bc.max_corner
            sticky = bc.mode == "sticky"
        else:
            blo = (-1e30, -1e30, -1e30)
            bhi = (1e30, 1e30, 1e30)
            sticky = False
        _grid_finalize(vel, touched_idx, self.table.codes.data,
                       self.options.deterministic, self.dt, gx, gy, gz,
                       blo[0], blo[1], blo[2], bhi[0], bhi[1], bhi[2],
                       sticky, apply_bc, self.params.dx, CELL_BIAS,
                       vel_old, save_old)
        if bc is not None and self.options.fusion == "split_bc":
            _grid_bc(vel, touched_idx, self.table.codes.data,
                     blo[0], blo[1], blo[2], bhi[0], bhi[1], bhi[2],
                     sticky, self.params.dx, CELL_BIAS)
        self._vel_dt = self.dt
        self._phase_ms["grid"] += (time.perf_counter() - t0) * 1e3

    def _check_addressing(self) -> None:
        if self.counters[C_ADDRESS_ERR]:
            raise ContractViolationError(
                f"worker {self.wid}: {int(self.counters[C_ADDRESS_ERR])} "
                f"stencil accesses left the 27-neighbor pblock set (free-zone "
                f"invariant broken)")
