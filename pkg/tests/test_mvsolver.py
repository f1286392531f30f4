import numpy as np
import pytest

from oblique_mv import library
from oblique_mv.convexcore import (
    ConvexConstraint,
    InteriorCertificate,
    normal_cone_residual,
    project,
)
from oblique_mv.dynamics import CoefficientField, ObliqueField
from oblique_mv.errors import ConfigurationError, DivergenceError
from oblique_mv.measures import second_moment_sup
from oblique_mv.mvsolver import (
    NoiseSource,
    System,
    TimeGrid,
    euler_iteration,
    interior_reflection_margin,
    oblique_skorohod_step,
    residual_report,
    simulate_penalized,
    simulate_projected,
)


def free_system(x0, state_dim=1):
    """Zero drift and diffusion on the half-line (or a ball in 2-d)."""
    coeffs = CoefficientField(
        lambda x, mu: 0.0 * x,
        lambda x, mu: np.zeros((state_dim, 1)),
        1e-9, state_dim, 1, uses_measure=False, normalized=True,
    )
    constraint = ConvexConstraint.half_line() if state_dim == 1 \
        else ConvexConstraint.ball(np.zeros(state_dim), 1.0)
    return System(coeffs, ObliqueField.identity(state_dim), constraint, x0)


class TestTimeGrid:
    def test_dyadic_snap_frozen(self):
        grid = TimeGrid(0.0, 1.0, 8, dyadic_level=2)
        assert grid.dyadic_snap(0.7) == 0.5

    def test_snap_bracket_property(self):
        rng = np.random.default_rng(0)
        grid = TimeGrid(0.0, 1.0, 16, dyadic_level=3)
        for t in rng.uniform(0, 1, 200):
            s = grid.dyadic_snap(t)
            assert s <= t < s + 2.0**-3 + 1e-12

    def test_grid_nodes_uniform(self):
        grid = TimeGrid(0.5, 1.5, 4)
        np.testing.assert_allclose(grid.times, [0.5, 0.75, 1.0, 1.25, 1.5])
        assert grid.h == pytest.approx(0.25)

    def test_invalid_grids(self):
        with pytest.raises(ConfigurationError):
            TimeGrid(1.0, 0.0, 4)
        with pytest.raises(ConfigurationError):
            TimeGrid(0.0, 1.0, 0)
        with pytest.raises(ConfigurationError):
            TimeGrid(0.0, 1.0, 4).dyadic_snap(0.3)


class TestNoiseSource:
    def test_stream_reproducibility(self):
        n = NoiseSource(42).for_replication(3)
        a = n.gaussians(7, 100, 2)
        b = n.gaussians(7, 100, 2)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        n = NoiseSource(42)
        assert not np.allclose(n.gaussians(0, 50, 1), n.gaussians(1, 50, 1))
        assert not np.allclose(
            n.for_replication(0).gaussians(0, 50, 1),
            n.for_replication(1).gaussians(0, 50, 1),
        )

    def test_brownian_scaling(self):
        inc = NoiseSource(1).brownian(64, 256, 1, h=0.01)
        assert inc.shape == (64, 256, 1)
        assert np.var(inc) == pytest.approx(0.01, rel=0.05)


class TestSkorohodStep:
    def test_identity_matrix_reduces_to_projection(self):
        hs = ConvexConstraint.half_space([1.0, 0.0])
        x, dk = oblique_skorohod_step(hs, np.eye(2), np.array([-2.0, 3.0]))
        np.testing.assert_allclose(x, [0.0, 3.0], atol=1e-14)
        np.testing.assert_allclose(dk, [-2.0, 0.0], atol=1e-14)

    def test_oblique_halfspace_hand_case(self):
        hs = ConvexConstraint.half_space([1.0, 0.0])
        x, dk = oblique_skorohod_step(hs, np.diag([2.0, 1.0]), np.array([-2.0, 3.0]))
        np.testing.assert_allclose(x, [0.0, 3.0], atol=1e-14)
        np.testing.assert_allclose(dk, [-1.0, 0.0], atol=1e-14)

    def test_interior_point_untouched(self):
        ball = ConvexConstraint.ball([0.0, 0.0], 1.0)
        y = np.array([0.2, -0.1])
        x, dk = oblique_skorohod_step(ball, np.diag([2.0, 3.0]), y)
        np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(dk, 0.0)

    @pytest.mark.parametrize("geometry", ["half-space", "box", "ball", "intersection"])
    def test_postconditions_random(self, geometry):
        rng = np.random.default_rng(5)
        for _ in range(120):
            m = int(rng.integers(2, 4))
            if geometry == "half-space":
                n = rng.standard_normal(m)
                c = ConvexConstraint.half_space(n, -abs(rng.normal()))
            elif geometry == "box":
                lo = -rng.uniform(0.2, 2.0, m)
                hi = rng.uniform(0.2, 2.0, m)
                c = ConvexConstraint.box(lo, hi)
            elif geometry == "ball":
                c = ConvexConstraint.ball(np.zeros(m), rng.uniform(0.5, 2.0))
            else:
                k = int(rng.integers(2, 5))
                c = ConvexConstraint.half_space_intersection(
                    rng.standard_normal((k, m)), -rng.uniform(0.1, 1.0, k)
                )
            q, _ = np.linalg.qr(rng.standard_normal((m, m)))
            H = (q * np.exp(rng.uniform(0, np.log(100), m))) @ q.T
            y = 3 * rng.standard_normal(m)
            x, dk = oblique_skorohod_step(c, H, y)
            assert float(c.distance(x)) <= 1e-10
            assert np.linalg.norm(x + H @ dk - y) <= 1e-10 * max(1, np.linalg.norm(y))
            probes = project(c, rng.standard_normal((64, m)))
            assert normal_cone_residual(c, x, dk, probes) <= 1e-8


class TestSimulators:
    def test_zero_coefficients_constant_paths(self):
        sys1 = free_system([0.5])
        grid = TimeGrid(0.0, 1.0, 64)
        for ens in (
            simulate_projected(sys1, grid, 8, NoiseSource(0)),
            simulate_penalized(sys1, 0.1, grid, 8, NoiseSource(0)),
        ):
            assert np.all(ens.states == 0.5)
            assert np.all(ens.reflection == 0.0)
            assert np.all(ens.variation == 0.0)

    def test_penalized_relaxation_matches_exact_ode(self):
        # with no noise and an infeasible start the smoothed flow solves
        # x' = -x/eps, so x(t) = -exp(-t/eps)
        sys1 = free_system([-1.0])
        eps = 0.5
        errs = []
        for steps in (64, 256, 1024):
            grid = TimeGrid(0.0, 1.0, steps)
            ens = simulate_penalized(sys1, eps, grid, 1, NoiseSource(0))
            exact = -np.exp(-grid.times / eps)
            errs.append(np.max(np.abs(ens.states[0, :, 0] - exact)))
        assert errs[2] < errs[1] < errs[0]
        assert errs[2] <= 5e-3

    def test_inward_drift_never_reflects(self):
        coeffs = CoefficientField(
            lambda x, mu: 2.0 + 0.0 * x, lambda x, mu: np.array([[0.2]]),
            1e-9, 1, 1, uses_measure=False, normalized=False,
        )
        sys1 = System(coeffs, ObliqueField.identity(1),
                      ConvexConstraint.half_line(), [1.0])
        ens = simulate_projected(sys1, TimeGrid(0.0, 1.0, 512), 64, NoiseSource(3))
        assert np.all(ens.variation == 0.0)

    def test_reflected_bm_mean(self):
        rbm = library.make_system("rbm")
        grid = TimeGrid(0.0, 1.0, 4096)
        ends = []
        for r in range(6):
            ens = simulate_projected(rbm, grid, 256, NoiseSource(7).for_replication(r))
            ends.append(ens.states[:, -1, 0])
        ends = np.concatenate(ends)
        target = np.sqrt(2.0 / np.pi)
        stderr = ends.std(ddof=1) / np.sqrt(ends.size)
        assert abs(ends.mean() - target) <= 3 * stderr + 0.6 * np.sqrt(grid.h)

    def test_feasibility_and_complementarity(self):
        ou = library.make_system("ou")
        ens = simulate_projected(ou, TimeGrid(0.0, 1.0, 1024), 64, NoiseSource(11))
        assert ens.feasibility_gap() <= 1e-10
        # reflection increments only at the boundary
        dk = ens.density * ens.grid.h
        moving = np.abs(dk[:, :, 0]) > 0
        assert np.max(np.abs(ens.states[:, 1:, 0][moving])) <= 1e-12
        # variation dominates the reflection displacement
        total_disp = np.linalg.norm(ens.reflection[:, -1, :], axis=1)
        assert np.all(ens.variation[:, -1] >= total_disp - 1e-12)

    def test_determinism_bitwise(self):
        ex = library.make_system("example31")
        grid = TimeGrid(0.0, 0.5, 128)
        a = simulate_projected(ex, grid, 32, NoiseSource(5).for_replication(1))
        b = simulate_projected(ex, grid, 32, NoiseSource(5).for_replication(1))
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.reflection, b.reflection)

    def test_divergence_guard_names_step(self):
        coeffs = CoefficientField(
            lambda x, mu: 50.0 * x, lambda x, mu: np.zeros((1, 1)),
            50.0, 1, 1, uses_measure=False, normalized=True,
        )
        sys1 = System(coeffs, ObliqueField.identity(1),
                      ConvexConstraint.half_line(), [1.0])
        with pytest.raises(DivergenceError) as err:
            simulate_projected(sys1, TimeGrid(0.0, 10.0, 10), 1, NoiseSource(0))
        assert err.value.step is not None

    def test_penalized_feasibility_shrinks_with_eps(self):
        ou = library.make_system("ou")
        grid = TimeGrid(0.0, 1.0, 2048)
        noise = NoiseSource(13)
        inc = noise.brownian(128, grid.steps, 1, grid.h)
        gaps = []
        for eps in (2**-3, 2**-5, 2**-7):
            ens = simulate_penalized(ou, eps, grid, 128, noise, increments=inc)
            sq = np.maximum(-ens.states[:, :, 0], 0.0) ** 2
            gaps.append(np.mean(np.max(sq, axis=1)))
        assert gaps[2] < gaps[1] < gaps[0]

    def test_penalized_approaches_projected(self):
        ou = library.make_system("ou")
        grid = TimeGrid(0.0, 1.0, 2048)
        noise = NoiseSource(17)
        inc = noise.brownian(128, grid.steps, 1, grid.h)
        ref = simulate_projected(ou, grid, 128, noise, increments=inc)
        dists = []
        for eps in (2**-3, 2**-5, 2**-7):
            ens = simulate_penalized(ou, eps, grid, 128, noise, increments=inc)
            gap = np.max(np.abs(ens.states - ref.states), axis=1)
            dists.append(np.mean(gap**2))
        assert dists[2] < dists[1] < dists[0]


class TestEulerIteration:
    def test_constant_coefficients_converge_immediately(self):
        coeffs = CoefficientField(
            lambda x, mu: np.full_like(x, -0.5), lambda x, mu: np.array([[0.3]]),
            1e-9, 1, 1, uses_measure=False, normalized=False,
        )
        sys1 = System(coeffs, ObliqueField.identity(1),
                      ConvexConstraint.half_line(), [0.5])
        iterates, dists = euler_iteration(sys1, 3, 3, TimeGrid(0.0, 1.0, 256),
                                          16, NoiseSource(19))
        np.testing.assert_array_equal(iterates[0].states, iterates[1].states)
        assert dists[0] == 0.0

    def test_cauchy_distances_decrease(self):
        ex = library.make_system("example31")
        iterates, dists = euler_iteration(ex, 4, 5, TimeGrid(0.0, 1.0, 256),
                                          64, NoiseSource(23))
        assert len(iterates) == 5 and len(dists) == 4
        for a, b in zip(dists[1:], dists[2:]):
            assert b <= a + 1e-12

    def test_common_noise_across_iterates(self):
        ex = library.make_system("ou")
        iterates, _ = euler_iteration(ex, 3, 2, TimeGrid(0.0, 1.0, 128),
                                      8, NoiseSource(29))
        np.testing.assert_array_equal(iterates[0].increments, iterates[1].increments)


class TestDiagnostics:
    def test_constant_feasible_path_all_zero(self):
        sys1 = free_system([0.5])
        ens = simulate_projected(sys1, TimeGrid(0.0, 1.0, 64), 4, NoiseSource(0))
        rep = residual_report(ens, sys1, probes=[np.array([1.0])])
        assert rep.equation_residual <= 1e-12
        assert rep.feasibility_gap == 0.0
        assert rep.inequality_residual <= 1e-12

    def test_projected_scheme_residuals(self):
        ou = library.make_system("ou")
        ens = simulate_projected(ou, TimeGrid(0.0, 1.0, 512), 32, NoiseSource(31))
        rep = residual_report(ens, ou, probes=[np.array([0.0]), np.array([1.0])],
                              shifts=[np.array([0.5])])
        assert rep.equation_residual <= 1e-9
        assert rep.feasibility_gap <= 1e-10
        assert rep.inequality_residual <= 1e-10

    def test_penalized_scheme_residuals(self):
        ou = library.make_system("ou")
        eps = 0.05
        ens = simulate_penalized(ou, eps, TimeGrid(0.0, 1.0, 512), 32, NoiseSource(37))
        rep = residual_report(ens, ou, probes=[np.array([0.0])])
        assert rep.equation_residual <= 1e-9
        # the inequality can overshoot by at most eps times the gradient energy
        energy = np.mean(np.sum(ens.density**2, axis=(1, 2))) * ens.grid.h
        assert rep.inequality_residual <= eps * energy * 2 + 1e-9

    def test_interior_margin_zero_reflection(self):
        sys1 = free_system([0.5])
        ens = simulate_projected(sys1, TimeGrid(0.0, 1.0, 64), 4, NoiseSource(0))
        cert = InteriorCertificate([1.0], 1.0)
        assert interior_reflection_margin(ens, cert) == 0.0

    def test_interior_margin_reflected_bm(self):
        rbm = library.make_system("rbm")
        ens = simulate_projected(rbm, TimeGrid(0.0, 1.0, 1024), 64, NoiseSource(41))
        cert = InteriorCertificate([1.0], 1.0)
        assert interior_reflection_margin(ens, cert) >= -1e-8

    def test_interior_margin_ball(self):
        ex = library.make_system("example31")
        ens = simulate_projected(ex, TimeGrid(0.0, 1.0, 512), 64, NoiseSource(43))
        cert = InteriorCertificate([0.0, 0.0], 0.9)
        assert interior_reflection_margin(ens, cert) >= -1e-8

    def test_second_moment_sup_grid_stability(self):
        ex = library.make_system("example31")
        vals = []
        for steps in (256, 512):
            ens = simulate_projected(ex, TimeGrid(0.0, 1.0, steps), 128,
                                     NoiseSource(47))
            vals.append(second_moment_sup(ens))
        assert abs(vals[1] - vals[0]) <= 0.1 * max(vals)
