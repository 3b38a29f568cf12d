"""Simulation parameters, material models, and the interpolation/stress math
shared by all pipeline phases.

Everything here is a pure function of its value inputs and may be called from
any number of workers concurrently. Units are CGS: cm, g, s, dyne/cm^2.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import DegenerateStateError, RejectedInputError

# Floor applied to singular values when the deformation gradient collapses.
SINGULAR_VALUE_FLOOR = 1e-4
# Determinant below which the deformation gradient is treated as collapsed.
DEGENERATE_DET = 1e-10

_SPEED_EPS = 1e-12


class MaterialKind(enum.IntEnum):
    WEAKLY_COMPRESSIBLE_FLUID = 0
    FIXED_COROTATED = 1


@dataclass
class SimParams:
    """Global step parameters.

    dx is the grid cell width in cm, dt the step size in seconds. gravity is
    a 3-vector in cm/s^2. lane_width is the number of particles per lane
    group and must be a power of two no larger than 64.
    """

    dx: float
    dt: float
    gravity: tuple[float, float, float] = (0.0, 0.0, -981.0)
    frame_dt: float = 1.0 / 48.0
    steps_per_frame: int = 36
    cfl: float = 0.5
    lane_width: int = 32
    flip_blend: float = 0.0

    def __post_init__(self):
        if not (self.dx > 0.0):
            raise RejectedInputError(f"dx must be positive, got {self.dx}")
        if not (self.dt > 0.0):
            raise RejectedInputError(f"dt must be positive, got {self.dt}")
        if self.steps_per_frame < 1:
            raise RejectedInputError(
                f"steps_per_frame must be >= 1, got {self.steps_per_frame}")
        if not (0.0 < self.cfl <= 1.0):
            raise RejectedInputError(f"cfl must be in (0, 1], got {self.cfl}")
        lw = self.lane_width
        if lw < 1 or lw > 64 or (lw & (lw - 1)) != 0:
            raise RejectedInputError(
                f"lane_width must be a power of two <= 64, got {lw}")
        if not (0.0 <= self.flip_blend <= 1.0):
            raise RejectedInputError(
                f"flip_blend must be in [0, 1], got {self.flip_blend}")
        self.gravity = tuple(float(g) for g in self.gravity)


@dataclass
class Material:
    """Constitutive parameters for one particle population.

    Fluids use (density, bulk_modulus, gamma); elastic solids use
    (density, mu, lam). clamp_tension zeroes negative fluid pressure.
    """

    kind: MaterialKind
    density: float
    bulk_modulus: float = 0.0
    gamma: float = 7.0
    mu: float = 0.0
    lam: float = 0.0
    clamp_tension: bool = False

    def __post_init__(self):
        if not (self.density > 0.0):
            raise RejectedInputError(f"density must be positive, got {self.density}")
        if self.kind == MaterialKind.WEAKLY_COMPRESSIBLE_FLUID and not (self.bulk_modulus > 0.0):
            raise RejectedInputError(
                f"fluid bulk modulus must be positive, got {self.bulk_modulus}")
        if self.kind == MaterialKind.FIXED_COROTATED and (self.mu < 0.0 or self.lam < 0.0):
            raise RejectedInputError(
                f"elastic moduli must be nonnegative, got mu={self.mu} lam={self.lam}")

    def sound_speed(self) -> float:
        """Small-strain acoustic speed; the CFL clamp adds it to the particle
        speed so pressure waves cannot outrun the step."""
        if self.kind == MaterialKind.WEAKLY_COMPRESSIBLE_FLUID:
            return float(np.sqrt(self.gamma * self.bulk_modulus / self.density))
        return float(np.sqrt((self.lam + 2.0 * self.mu) / self.density))

    @staticmethod
    def fluid(density: float, bulk_modulus: float, gamma: float = 7.0,
              clamp_tension: bool = False) -> "Material":
        return Material(MaterialKind.WEAKLY_COMPRESSIBLE_FLUID, density,
                        bulk_modulus=bulk_modulus, gamma=gamma,
                        clamp_tension=clamp_tension)

    @staticmethod
    def fixed_corotated(density: float, young: float, poisson: float) -> "Material":
        mu = young / (2.0 * (1.0 + poisson))
        lam = young * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
        return Material(MaterialKind.FIXED_COROTATED, density, mu=mu, lam=lam)


@dataclass
class WeightStencil:
    """Quadratic B-spline stencil anchor and per-axis weights.

    base_cell holds the lowest cell index touched per axis; w[axis] holds the
    three weights for nodes base_cell..base_cell+2 on that axis.
    """

    base_cell: np.ndarray  # (3,) int64
    w: np.ndarray          # (3, 3) float64


@dataclass
class Diagnostics:
    """Counters for states the pipeline repairs instead of aborting on."""

    singular_clamps: int = 0
    degenerate_states: int = 0
    quarantined: int = 0


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _weights_1d(f):
    # f = x/dx - base, in [0.5, 1.5)
    w0 = 0.5 * (1.5 - f) * (1.5 - f)
    w1 = 0.75 - (f - 1.0) * (f - 1.0)
    w2 = 0.5 * (f - 0.5) * (f - 0.5)
    return w0, w1, w2


def quadratic_weights(position, dx: float) -> WeightStencil:
    """Stencil of the quadratic B-spline centred on `position`.

    The anchor is base = floor(position/dx - 0.5) per axis; the three weights
    per axis are nonnegative and sum to one.
    """
    pos = np.asarray(position, dtype=np.float64)
    if pos.shape != (3,) or not np.all(np.isfinite(pos)):
        raise RejectedInputError(f"position must be a finite 3-vector, got {position!r}")
    base = np.floor(pos / dx - 0.5).astype(np.int64)
    f = pos / dx - base
    w = np.empty((3, 3), dtype=np.float64)
    for a in range(3):
        w[a, 0], w[a, 1], w[a, 2] = _weights_1d(f[a])
    return WeightStencil(base_cell=base, w=w)


def quadratic_weights_arrays(positions: np.ndarray, dx: float):
    """Vectorized form of quadratic_weights for (n, 3) positions.

    Returns (base (n,3) int64, w (n,3,3) float64).
    """
    pos = np.asarray(positions, dtype=np.float64)
    if not np.all(np.isfinite(pos)):
        raise RejectedInputError("positions must be finite")
    base = np.floor(pos / dx - 0.5).astype(np.int64)
    f = pos / dx - base
    w = np.empty(pos.shape[:-1] + (3, 3), dtype=np.float64)
    w[..., 0] = 0.5 * (1.5 - f) ** 2
    w[..., 1] = 0.75 - (f - 1.0) ** 2
    w[..., 2] = 0.5 * (f - 0.5) ** 2
    return base, w


# ---------------------------------------------------------------------------
# 3x3 decompositions (shared by the stress paths and the transfer kernels)
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True, inline="always")
def _det3_scalars(f00, f01, f02, f10, f11, f12, f20, f21, f22):
    return f00 * (f11 * f22 - f12 * f21) - f01 * (f10 * f22 - f12 * f20) \
        + f02 * (f10 * f21 - f11 * f20)


@njit(cache=True, nogil=True)
def _svd3_scalars(f00, f01, f02, f10, f11, f12, f20, f21, f22):
    """Allocation-free 3x3 SVD on scalar components.

    Jacobi-diagonalizes F^T F for V and the singular values, rebuilds U from
    F V with a cross-product third column so U is always a proper rotation,
    and absorbs any reflection into the sign of the smallest singular value.
    Returns (u00..u22, s0, s1, s2, v00..v22).
    """
    a00 = f00 * f00 + f10 * f10 + f20 * f20
    a01 = f00 * f01 + f10 * f11 + f20 * f21
    a02 = f00 * f02 + f10 * f12 + f20 * f22
    a11 = f01 * f01 + f11 * f11 + f21 * f21
    a12 = f01 * f02 + f11 * f12 + f21 * f22
    a22 = f02 * f02 + f12 * f12 + f22 * f22
    v00 = 1.0
    v01 = 0.0
    v02 = 0.0
    v10 = 0.0
    v11 = 1.0
    v12 = 0.0
    v20 = 0.0
    v21 = 0.0
    v22 = 1.0
    for _ in range(30):
        m01 = abs(a01)
        m02 = abs(a02)
        m12 = abs(a12)
        big = m01
        pair = 0
        if m02 > big:
            big = m02
            pair = 1
        if m12 > big:
            big = m12
            pair = 2
        if big <= 1e-15 * (abs(a00) + abs(a11) + abs(a22)) + 1e-300:
            break
        if pair == 0:
            apq = a01
            theta = 0.5 * (a11 - a00) / apq
        elif pair == 1:
            apq = a02
            theta = 0.5 * (a22 - a00) / apq
        else:
            apq = a12
            theta = 0.5 * (a22 - a11) / apq
        if theta >= 0.0:
            t = 1.0 / (theta + np.sqrt(1.0 + theta * theta))
        else:
            t = -1.0 / (-theta + np.sqrt(1.0 + theta * theta))
        c = 1.0 / np.sqrt(1.0 + t * t)
        s = t * c
        if pair == 0:
            app = a00
            aqq = a11
            a00 = c * c * app - 2.0 * s * c * apq + s * s * aqq
            a11 = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a01 = 0.0
            arp = a02
            arq = a12
            a02 = c * arp - s * arq
            a12 = s * arp + c * arq
            tmp = v00
            v00 = c * tmp - s * v01
            v01 = s * tmp + c * v01
            tmp = v10
            v10 = c * tmp - s * v11
            v11 = s * tmp + c * v11
            tmp = v20
            v20 = c * tmp - s * v21
            v21 = s * tmp + c * v21
        elif pair == 1:
            app = a00
            aqq = a22
            a00 = c * c * app - 2.0 * s * c * apq + s * s * aqq
            a22 = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a02 = 0.0
            arp = a01
            arq = a12
            a01 = c * arp - s * arq
            a12 = s * arp + c * arq
            tmp = v00
            v00 = c * tmp - s * v02
            v02 = s * tmp + c * v02
            tmp = v10
            v10 = c * tmp - s * v12
            v12 = s * tmp + c * v12
            tmp = v20
            v20 = c * tmp - s * v22
            v22 = s * tmp + c * v22
        else:
            app = a11
            aqq = a22
            a11 = c * c * app - 2.0 * s * c * apq + s * s * aqq
            a22 = s * s * app + 2.0 * s * c * apq + c * c * aqq
            a12 = 0.0
            arp = a01
            arq = a02
            a01 = c * arp - s * arq
            a02 = s * arp + c * arq
            tmp = v01
            v01 = c * tmp - s * v02
            v02 = s * tmp + c * v02
            tmp = v11
            v11 = c * tmp - s * v12
            v12 = s * tmp + c * v12
            tmp = v21
            v21 = c * tmp - s * v22
            v22 = s * tmp + c * v22
    w0 = a00
    w1 = a11
    w2 = a22
    # sort eigen pairs descending with a 3-element swap network
    if w0 < w1:
        w0, w1 = w1, w0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20
    if w1 < w2:
        w1, w2 = w2, w1
        v01, v02 = v02, v01
        v11, v12 = v12, v11
        v21, v22 = v22, v21
    if w0 < w1:
        w0, w1 = w1, w0
        v00, v01 = v01, v00
        v10, v11 = v11, v10
        v20, v21 = v21, v20
    detv = _det3_scalars(v00, v01, v02, v10, v11, v12, v20, v21, v22)
    if detv < 0.0:
        v02 = -v02
        v12 = -v12
        v22 = -v22
    s0 = np.sqrt(w0) if w0 > 0.0 else 0.0
    s1 = np.sqrt(w1) if w1 > 0.0 else 0.0
    s2 = np.sqrt(w2) if w2 > 0.0 else 0.0
    # U columns: F v0, F v1 orthonormalized; third column by cross product
    u00 = f00 * v00 + f01 * v10 + f02 * v20
    u10 = f10 * v00 + f11 * v10 + f12 * v20
    u20 = f20 * v00 + f21 * v10 + f22 * v20
    n = np.sqrt(u00 * u00 + u10 * u10 + u20 * u20)
    if n < 1e-30:
        u00 = 1.0
        u10 = 0.0
        u20 = 0.0
    else:
        u00 /= n
        u10 /= n
        u20 /= n
    u01 = f00 * v01 + f01 * v11 + f02 * v21
    u11 = f10 * v01 + f11 * v11 + f12 * v21
    u21 = f20 * v01 + f21 * v11 + f22 * v21
    d = u01 * u00 + u11 * u10 + u21 * u20
    u01 -= d * u00
    u11 -= d * u10
    u21 -= d * u20
    n = np.sqrt(u01 * u01 + u11 * u11 + u21 * u21)
    if n < 1e-30:
        u01 = -u10
        u11 = u00
        u21 = 0.0
        n2 = np.sqrt(u01 * u01 + u11 * u11)
        if n2 < 1e-30:
            u01 = 0.0
            u11 = 1.0
            u21 = 0.0
        else:
            u01 /= n2
            u11 /= n2
    else:
        u01 /= n
        u11 /= n
        u21 /= n
    u02 = u10 * u21 - u20 * u11
    u12 = u20 * u01 - u00 * u21
    u22_ = u00 * u11 - u10 * u01
    # absorb any remaining reflection into s2
    fv0 = f00 * v02 + f01 * v12 + f02 * v22
    fv1 = f10 * v02 + f11 * v12 + f12 * v22
    fv2 = f20 * v02 + f21 * v12 + f22 * v22
    if fv0 * u02 + fv1 * u12 + fv2 * u22_ < 0.0:
        s2 = -s2
    return (u00, u01, u02, u10, u11, u12, u20, u21, u22_,
            s0, s1, s2,
            v00, v01, v02, v10, v11, v12, v20, v21, v22)


@njit(cache=True, nogil=True)
def _corotated_tau(f00, f01, f02, f10, f11, f12, f20, f21, f22, mu, lam):
    """Scalar fixed-corotated stress; returns the 9 components and the
    singular-clamp flag. This is the production path of the scatter kernels;
    the array API below wraps it."""
    J = _det3_scalars(f00, f01, f02, f10, f11, f12, f20, f21, f22)
    (u00, u01, u02, u10, u11, u12, u20, u21, u22,
     s0, s1, s2,
     v00, v01, v02, v10, v11, v12, v20, v21, v22) = \
        _svd3_scalars(f00, f01, f02, f10, f11, f12, f20, f21, f22)
    clamped = False
    if J <= DEGENERATE_DET:
        if s0 < SINGULAR_VALUE_FLOOR:
            s0 = SINGULAR_VALUE_FLOOR
        if s1 < SINGULAR_VALUE_FLOOR:
            s1 = SINGULAR_VALUE_FLOOR
        if s2 < SINGULAR_VALUE_FLOOR:
            s2 = SINGULAR_VALUE_FLOOR
        J = s0 * s1 * s2
        clamped = True
    # Fw = U diag(s) V^T (equals F up to roundoff unless clamped), R = U V^T
    w00 = s0 * u00 * v00 + s1 * u01 * v01 + s2 * u02 * v02
    w01 = s0 * u00 * v10 + s1 * u01 * v11 + s2 * u02 * v12
    w02 = s0 * u00 * v20 + s1 * u01 * v21 + s2 * u02 * v22
    w10 = s0 * u10 * v00 + s1 * u11 * v01 + s2 * u12 * v02
    w11 = s0 * u10 * v10 + s1 * u11 * v11 + s2 * u12 * v12
    w12 = s0 * u10 * v20 + s1 * u11 * v21 + s2 * u12 * v22
    w20 = s0 * u20 * v00 + s1 * u21 * v01 + s2 * u22 * v02
    w21 = s0 * u20 * v10 + s1 * u21 * v11 + s2 * u22 * v12
    w22 = s0 * u20 * v20 + s1 * u21 * v21 + s2 * u22 * v22
    r00 = u00 * v00 + u01 * v01 + u02 * v02
    r01 = u00 * v10 + u01 * v11 + u02 * v12
    r02 = u00 * v20 + u01 * v21 + u02 * v22
    r10 = u10 * v00 + u11 * v01 + u12 * v02
    r11 = u10 * v10 + u11 * v11 + u12 * v12
    r12 = u10 * v20 + u11 * v21 + u12 * v22
    r20 = u20 * v00 + u21 * v01 + u22 * v02
    r21 = u20 * v10 + u21 * v11 + u22 * v12
    r22 = u20 * v20 + u21 * v21 + u22 * v22
    d00 = w00 - r00
    d01 = w01 - r01
    d02 = w02 - r02
    d10 = w10 - r10
    d11 = w11 - r11
    d12 = w12 - r12
    d20 = w20 - r20
    d21 = w21 - r21
    d22 = w22 - r22
    two_mu = 2.0 * mu
    diag = lam * (J - 1.0) * J
    t00 = two_mu * (d00 * w00 + d01 * w01 + d02 * w02) + diag
    t01 = two_mu * (d00 * w10 + d01 * w11 + d02 * w12)
    t02 = two_mu * (d00 * w20 + d01 * w21 + d02 * w22)
    t10 = two_mu * (d10 * w00 + d11 * w01 + d12 * w02)
    t11 = two_mu * (d10 * w10 + d11 * w11 + d12 * w12) + diag
    t12 = two_mu * (d10 * w20 + d11 * w21 + d12 * w22)
    t20 = two_mu * (d20 * w00 + d21 * w01 + d22 * w02)
    t21 = two_mu * (d20 * w10 + d21 * w11 + d22 * w12)
    t22 = two_mu * (d20 * w20 + d21 * w21 + d22 * w22) + diag
    return t00, t01, t02, t10, t11, t12, t20, t21, t22, clamped


@njit(cache=True, nogil=True)
def svd3(F):
    """Singular value decomposition of a 3x3 matrix, F = U diag(s) V^T.

    U and V are proper rotations; a reflection is absorbed into the sign of
    the smallest singular value (s[2] may be negative).
    """
    (u00, u01, u02, u10, u11, u12, u20, u21, u22, s0, s1, s2,
     v00, v01, v02, v10, v11, v12, v20, v21, v22) = _svd3_scalars(
        F[0, 0], F[0, 1], F[0, 2], F[1, 0], F[1, 1], F[1, 2],
        F[2, 0], F[2, 1], F[2, 2])
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    s = np.empty(3)
    U[0, 0], U[0, 1], U[0, 2] = u00, u01, u02
    U[1, 0], U[1, 1], U[1, 2] = u10, u11, u12
    U[2, 0], U[2, 1], U[2, 2] = u20, u21, u22
    V[0, 0], V[0, 1], V[0, 2] = v00, v01, v02
    V[1, 0], V[1, 1], V[1, 2] = v10, v11, v12
    V[2, 0], V[2, 1], V[2, 2] = v20, v21, v22
    s[0], s[1], s[2] = s0, s1, s2
    return U, s, V


@njit(cache=True, nogil=True)
def polar_rotation(F):
    """Rotation factor of the polar decomposition F = R S."""
    U, _, V = svd3(F)
    R = np.empty((3, 3))
    for r in range(3):
        for c in range(3):
            R[r, c] = U[r, 0] * V[c, 0] + U[r, 1] * V[c, 1] + U[r, 2] * V[c, 2]
    return R


@njit(cache=True, nogil=True)
def _fixed_corotated_core(F, mu, lam):
    """Kirchhoff-type stress 2 mu (F - R) F^T + lam (J - 1) J I.

    Clamps singular values to SINGULAR_VALUE_FLOOR when det(F) collapses;
    returns (stress, clamped flag).
    """
    (t00, t01, t02, t10, t11, t12, t20, t21, t22, clamped) = _corotated_tau(
        F[0, 0], F[0, 1], F[0, 2], F[1, 0], F[1, 1], F[1, 2],
        F[2, 0], F[2, 1], F[2, 2], mu, lam)
    out = np.empty((3, 3))
    out[0, 0], out[0, 1], out[0, 2] = t00, t01, t02
    out[1, 0], out[1, 1], out[1, 2] = t10, t11, t12
    out[2, 0], out[2, 1], out[2, 2] = t20, t21, t22
    return out, clamped


# ---------------------------------------------------------------------------
# Stress models
# ---------------------------------------------------------------------------

def stress_fluid(J: float, material: Material) -> np.ndarray:
    """Pressure-only stress -p I for a weakly compressible fluid.

    p = kappa (J^-gamma - 1); zero at rest (J = 1), positive in compression.
    """
    if not (J > 0.0):
        raise DegenerateStateError(f"fluid volume ratio must be positive, got {J}")
    p = material.bulk_modulus * (J ** (-material.gamma) - 1.0)
    if material.clamp_tension and p < 0.0:
        p = 0.0
    return -p * np.eye(3)


def stress_fixed_corotated(F, material: Material,
                           diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Kirchhoff-type fixed corotated stress of a deformation gradient."""
    Fm = np.ascontiguousarray(np.asarray(F, dtype=np.float64).reshape(3, 3))
    stress, clamped = _fixed_corotated_core(Fm, material.mu, material.lam)
    if clamped and diagnostics is not None:
        diagnostics.singular_clamps += 1
    return stress


def cfl_dt(max_speed: float, params: SimParams, frame_remaining: float) -> float:
    """Step size limited so per-step travel stays below cfl * dx.

    Never exceeds the remaining frame time; a floor on max_speed keeps the
    static case finite (it then returns the frame remainder).
    """
    if max_speed < 0.0 or not np.isfinite(max_speed):
        raise RejectedInputError(f"max_speed must be finite and >= 0, got {max_speed}")
    dt = params.cfl * params.dx / max(max_speed, _SPEED_EPS)
    return min(frame_remaining, dt)
