import numpy as np
import pytest

from fbdiff import flux, parabolic
from fbdiff.errors import (DomainError, EstimationError, NotReachedError,
                           PreconditionError)


def heat_exact(x, t):
    return np.exp(-np.pi ** 2 * t) * np.cos(np.pi * x)


def cos_datum(x):
    return np.cos(np.pi * x)


class TestSolveOracle:
    def test_heat_equation_l_infinity(self):
        grid = parabolic.make_grid(1.0, 256, 0.0, 0.1, 3)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid,
                               dt=grid.dx ** 2)
        err = np.max(np.abs(traj.u[-1] - heat_exact(grid.x, 0.1)))
        assert err <= 5e-3

    def test_second_order_convergence(self):
        errs = []
        for nx in (64, 128):
            grid = parabolic.make_grid(1.0, nx, 0.0, 0.1, 3)
            traj = parabolic.solve(flux.linear_flux(), cos_datum, grid,
                                   dt=grid.dx ** 2)
            errs.append(np.max(np.abs(traj.u[-1] - heat_exact(grid.x, 0.1))))
        ratio = errs[0] / errs[1]
        assert 3.5 <= ratio <= 4.5

    def test_constant_datum_is_steady(self):
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.5, 6)
        traj = parabolic.solve(flux.pm_rational(), np.full(33, 3.0), grid)
        assert np.allclose(traj.u, 3.0, atol=1e-13)

    def test_zero_mean_mass(self):
        grid = parabolic.make_grid(1.0, 64, 0.0, 0.2, 9)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid)
        assert np.all(np.abs(traj.mass()) < 1e-12)


class TestInvariants:
    @pytest.mark.parametrize("make_flux", [
        flux.linear_flux,
        lambda: flux.modify_flux(flux.hollig_piecewise(), "hollig",
                                 {"r1": 0.6, "r2": 0.9}),
    ])
    def test_mass_and_envelopes(self, make_flux):
        f = make_flux()
        grid = parabolic.make_grid(1.0, 64, 0.0, 1.0, 21)
        x = grid.x
        u0 = 0.8 * np.sin(np.pi * x) ** 2
        traj = parabolic.solve(f, u0, grid)
        drift = np.abs(traj.mass() - traj.mass()[0])
        assert np.max(drift) < 1e-12
        mx, mn = traj.max_ux(), traj.min_ux()
        assert np.all(np.diff(mx) <= 1e-9)
        assert np.all(np.diff(mn) >= -1e-9)
        assert np.all(mx >= -1e-9) and np.all(mn <= 1e-9)

    def test_rejects_incompatible_datum(self):
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.1, 3)
        with pytest.raises(PreconditionError):
            parabolic.solve(flux.linear_flux(), grid.x.copy(), grid)


class TestGammaBound:
    def test_spot_value(self):
        b = parabolic.gamma_bound(flux.linear_flux(), 1.0, 0.5, 1.0, 2.0, 1.0)
        expect = 0.5 * np.exp(-1.0) / (2.0 - np.exp(-1.0))
        assert b.gamma == pytest.approx(expect, abs=1e-12)
        assert b.gamma == pytest.approx(0.11270, abs=1e-5)
        assert b.theta == pytest.approx(1.0)
        # second differences of an affine flux leave only rounding noise
        assert b.theta_tilde == pytest.approx(0.0, abs=1e-6)

    def test_monotone_in_theta(self):
        gs = [parabolic.gamma_bound(flux.linear_flux(sl), 1.0, 0.5, 1.0, 2.0, 1.0).gamma
              for sl in (0.5, 1.0, 2.0)]
        assert gs[0] < gs[1] < gs[2]

    def test_heat_rate_dominates_bound(self):
        grid = parabolic.make_grid(1.0, 64, 0.0, 0.4, 41)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid, dt=grid.dx ** 2)
        fit = parabolic.decay_rate_estimate(traj)
        b = parabolic.gamma_bound(flux.linear_flux(), np.pi, 0.5, 1.0, 2.0, 1.0)
        assert fit.rate >= b.gamma

    def test_parameter_validation(self):
        with pytest.raises(DomainError):
            parabolic.gamma_bound(flux.linear_flux(), 1.0, 1.5, 1.0, 2.0, 1.0)


class TestDecayFit:
    def test_heat_rate(self):
        grid = parabolic.make_grid(1.0, 128, 0.0, 0.4, 41)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid, dt=grid.dx ** 2)
        fit = parabolic.decay_rate_estimate(traj)
        assert fit.rate == pytest.approx(np.pi ** 2, rel=0.05)

    def test_converged_trajectory_rejected(self):
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.1, 12)
        traj = parabolic.solve(flux.linear_flux(), np.full(33, 2.0), grid)
        with pytest.raises(EstimationError):
            parabolic.decay_rate_estimate(traj)


class TestHittingTime:
    def test_heat_analytic_crossing(self):
        # max u_x = pi e^{-pi^2 t}; level pi/2 is hit at ln(2)/pi^2
        grid = parabolic.make_grid(1.0, 256, 0.0, 0.12, 241)
        traj = parabolic.solve(flux.linear_flux(), lambda x: -np.cos(np.pi * x),
                               grid, dt=grid.dx ** 2)
        t_star = parabolic.first_hitting_time(traj, "max_ux", np.pi / 2)
        assert t_star == pytest.approx(np.log(2) / np.pi ** 2, rel=2e-2)

    def test_immediate_hit(self):
        grid = parabolic.make_grid(1.0, 64, 0.0, 0.05, 11)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid)
        lvl = float(traj.max_ux()[0])
        assert parabolic.first_hitting_time(traj, "max_ux", lvl) == 0.0

    def test_unreachable_level(self):
        grid = parabolic.make_grid(1.0, 64, 0.0, 0.05, 11)
        traj = parabolic.solve(flux.linear_flux(), cos_datum, grid)
        with pytest.raises(NotReachedError) as ei:
            parabolic.first_hitting_time(traj, "max_ux", -0.5)
        assert ei.value.closest_value is not None

    def test_solve_until_refined_crossing(self):
        t = parabolic.solve_until(flux.linear_flux(),
                                  lambda x: -np.cos(np.pi * x), 1.0, 128,
                                  "max_ux", np.pi / 2, dt=1e-3)
        t_hit = float(t.times[-1])
        assert t_hit == pytest.approx(np.log(2) / np.pi ** 2, rel=2e-2)
        assert float(t.max_ux()[-1]) == pytest.approx(np.pi / 2, abs=1e-8)


class TestAuxiliary:
    def test_v_slope_tracks_u_exactly(self):
        grid = parabolic.make_grid(1.0, 48, 0.0, 0.3, 7)
        traj = parabolic.solve(flux.pm_rational(),
                               lambda x: 0.25 * np.cos(np.pi * x), grid,
                               with_auxiliary=True)
        dx = grid.dx
        for k in range(traj.u.shape[0]):
            v_slope = np.diff(traj.v[k]) / dx
            u_avg = 0.5 * (traj.u[k, 1:] + traj.u[k, :-1])
            assert np.max(np.abs(v_slope - u_avg)) < 1e-12
