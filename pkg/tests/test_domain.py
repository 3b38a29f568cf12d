import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpmbench import Material, MaterialKind, SimParams, cfl_dt, \
    quadratic_weights, stress_fixed_corotated, stress_fluid
from mpmbench.domain import Diagnostics, polar_rotation, \
    quadratic_weights_arrays, svd3
from mpmbench.errors import DegenerateStateError, RejectedInputError

pos_floats = st.floats(min_value=-50.0, max_value=50.0,
                       allow_nan=False, allow_infinity=False)


def spline_oracle(x, dx):
    """Direct evaluation of the quadratic B-spline N((x - xi)/dx) at the
    three nodes of the stencil, independent of the production formula."""
    def N(u):
        u = abs(u)
        if u < 0.5:
            return 0.75 - u * u
        if u < 1.5:
            return 0.5 * (1.5 - u) ** 2
        return 0.0
    base = int(np.floor(x / dx - 0.5))
    return base, [N(x / dx - (base + k)) for k in range(3)]


class TestQuadraticWeights:
    def test_node_center(self):
        # particle exactly at a node: center weight 0.75, sides 0.125
        st_ = quadratic_weights((1.0, 2.0, 3.0), 1.0)
        assert np.allclose(st_.w, [[0.125, 0.75, 0.125]] * 3)
        assert list(st_.base_cell) == [0, 1, 2]

    def test_half_offset(self):
        # half a cell from the base node: weights (0.5, 0.5, 0.0)
        st_ = quadratic_weights((1.5, 1.5, 1.5), 1.0)
        assert np.allclose(st_.w[0], [0.5, 0.5, 0.0])

    @given(x=pos_floats, y=pos_floats, z=pos_floats)
    @settings(max_examples=200, deadline=None)
    def test_partition_of_unity(self, x, y, z):
        st_ = quadratic_weights((x, y, z), 0.37)
        assert np.allclose(st_.w.sum(axis=1), 1.0, atol=1e-6)
        assert (st_.w >= 0.0).all() and (st_.w <= 0.75 + 1e-12).all()

    def test_matches_direct_spline_evaluation(self, rng):
        for _ in range(200):
            p = rng.uniform(-10, 10, 3)
            st_ = quadratic_weights(p, 0.25)
            for a in range(3):
                base, w = spline_oracle(p[a], 0.25)
                assert base == st_.base_cell[a]
                assert np.allclose(st_.w[a], w, atol=1e-12)

    def test_partition_of_unity_bulk(self, rng):
        pos = rng.uniform(-100.0, 100.0, (1_000_000, 3))
        _, w = quadratic_weights_arrays(pos, 25.0 / 64.0)
        sums = w.sum(axis=-1)
        assert np.abs(sums - 1.0).max() < 1e-6
        assert w.min() >= 0.0 and w.max() <= 0.75 + 1e-12

    def test_stencil_locality(self, rng):
        # every node with nonzero weight lies in base_cell + {0,1,2}
        dx = 0.4
        for _ in range(100):
            p = rng.uniform(0, 20, 3)
            st_ = quadratic_weights(p, dx)
            for a in range(3):
                for k in range(3):
                    node = (st_.base_cell[a] + k) * dx
                    assert abs(p[a] - node) < 1.5 * dx + 1e-9
                # the next nodes out carry no weight
                _, w = spline_oracle(p[a], dx)
                assert abs(p[a] / dx - (st_.base_cell[a] - 1)) >= 1.5 - 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(RejectedInputError):
            quadratic_weights((np.nan, 0.0, 0.0), 1.0)


class TestStressFluid:
    def test_rest_state(self):
        mat = Material.fluid(1.0, 1e5)
        assert np.allclose(stress_fluid(1.0, mat), 0.0)

    def test_compression_value(self):
        mat = Material.fluid(1.0, 1e5, gamma=7.0)
        tau = stress_fluid(0.99, mat)
        p = 1e5 * (0.99 ** -7.0 - 1.0)  # scalar oracle
        assert np.allclose(tau, -p * np.eye(3))
        assert abs(p - 7.29e3) / 7.29e3 < 2e-3

    def test_tension_sign_and_clamp(self):
        mat = Material.fluid(1.0, 1e5)
        tau = stress_fluid(1.01, mat)
        assert tau[0, 0] > 0.0  # -p with p < 0
        clamped = Material.fluid(1.0, 1e5, clamp_tension=True)
        assert np.allclose(stress_fluid(1.01, clamped), 0.0)

    def test_degenerate_volume(self):
        mat = Material.fluid(1.0, 1e5)
        with pytest.raises(DegenerateStateError):
            stress_fluid(0.0, mat)
        with pytest.raises(DegenerateStateError):
            stress_fluid(-0.5, mat)


def corotated_oracle(F, mu, lam):
    """Brute-force evaluation through scipy's SVD: an implementation of the
    same formula that shares no code with the production path."""
    import scipy.linalg
    U, s, Vt = scipy.linalg.svd(F)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
        s[-1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1] *= -1
        s[-1] *= -1
    R = U @ Vt
    J = np.linalg.det(F)
    return 2.0 * mu * (F - R) @ F.T + lam * (J - 1.0) * J * np.eye(3)


def random_rotation(rng):
    import scipy.linalg
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestFixedCorotated:
    MAT = Material.fixed_corotated(2.0, 1.0e5, 0.3)

    def test_rest_configuration(self):
        assert np.allclose(stress_fixed_corotated(np.eye(3), self.MAT), 0.0)

    def test_rotation_invariance(self, rng):
        unit = Material(MaterialKind.FIXED_COROTATED, 1.0, mu=1.0, lam=1.0)
        for _ in range(50):
            R = random_rotation(rng)
            tau = stress_fixed_corotated(R, unit)
            assert np.abs(tau).max() < 1e-6

    def test_matches_svd_oracle(self, rng):
        for _ in range(200):
            F = np.eye(3) + 0.4 * rng.normal(size=(3, 3))
            if np.linalg.det(F) <= 0.05:
                continue
            got = stress_fixed_corotated(F, self.MAT)
            want = corotated_oracle(F, self.MAT.mu, self.MAT.lam)
            scale = max(np.abs(want).max(), 1.0)
            assert np.abs(got - want).max() / scale < 1e-6

    def test_degenerate_clamp_counted(self):
        diag = Diagnostics()
        F = np.diag([1.0, 1.0, 0.0])  # det = 0
        tau = stress_fixed_corotated(F, self.MAT, diagnostics=diag)
        assert np.isfinite(tau).all()
        assert diag.singular_clamps == 1

    def test_symmetry(self, rng):
        for _ in range(20):
            F = np.eye(3) + 0.3 * rng.normal(size=(3, 3))
            if np.linalg.det(F) <= 0.05:
                continue
            tau = stress_fixed_corotated(F, self.MAT)
            assert np.allclose(tau, tau.T, atol=1e-8 * max(1.0, np.abs(tau).max()))


class TestSVD3:
    def test_against_scipy(self, rng):
        import scipy.linalg
        for _ in range(300):
            F = rng.normal(size=(3, 3))
            U, s, V = svd3(F)
            s_ref = scipy.linalg.svdvals(F)
            assert np.allclose(np.abs(s), s_ref, rtol=1e-8, atol=1e-10)
            assert np.allclose(U @ U.T, np.eye(3), atol=1e-9)
            assert np.allclose(V @ V.T, np.eye(3), atol=1e-9)
            assert np.allclose(U @ np.diag(s) @ V.T, F, atol=1e-8)
            assert np.linalg.det(U) > 0.0
            assert np.linalg.det(V) > 0.0

    def test_polar_rotation(self, rng):
        for _ in range(100):
            F = np.eye(3) + 0.5 * rng.normal(size=(3, 3))
            if np.linalg.det(F) <= 0.05:
                continue
            R = polar_rotation(F)
            assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
            S = R.T @ F
            assert np.allclose(S, S.T, atol=1e-8)


class TestCflDt:
    PARAMS = SimParams(dx=1.0, dt=1e-3, cfl=1.0)

    def test_static_scene(self):
        assert cfl_dt(0.0, self.PARAMS, 0.25) == 0.25

    def test_direct_formula(self):
        assert np.isclose(cfl_dt(100.0, self.PARAMS, 1.0), 0.01)

    @given(speed=st.floats(min_value=0.0, max_value=1e6),
           remaining=st.floats(min_value=1e-6, max_value=1.0))
    @settings(max_examples=200, deadline=None)
    def test_travel_bound_and_frame_clamp(self, speed, remaining):
        params = SimParams(dx=0.4, dt=1e-3, cfl=0.5)
        dt = cfl_dt(speed, params, remaining)
        assert dt <= remaining + 1e-15
        assert dt * speed <= params.cfl * params.dx + 1e-12

    def test_rejects_bad_speed(self):
        with pytest.raises(RejectedInputError):
            cfl_dt(-1.0, self.PARAMS, 1.0)


class TestValidation:
    def test_sim_params(self):
        with pytest.raises(RejectedInputError):
            SimParams(dx=0.0, dt=1e-3)
        with pytest.raises(RejectedInputError):
            SimParams(dx=1.0, dt=1e-3, lane_width=33)
        with pytest.raises(RejectedInputError):
            SimParams(dx=1.0, dt=1e-3, lane_width=128)
        with pytest.raises(RejectedInputError):
            SimParams(dx=1.0, dt=1e-3, cfl=0.0)
        assert SimParams(dx=1.0, dt=1e-3, lane_width=64).lane_width == 64

    def test_material(self):
        with pytest.raises(RejectedInputError):
            Material.fluid(0.0, 1e5)
        with pytest.raises(RejectedInputError):
            Material.fluid(1.0, 0.0)
        with pytest.raises(RejectedInputError):
            Material(MaterialKind.FIXED_COROTATED, 1.0, mu=-1.0)
