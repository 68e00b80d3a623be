import numpy as np
import pytest

from fbdiff import flux, parabolic, verify
from fbdiff.errors import DomainError, PreconditionError


def heat_traj(nx, t_end=0.1, n_snap=21, amp=1.0):
    grid = parabolic.make_grid(1.0, nx, 0.0, t_end, n_snap)
    return parabolic.solve(flux.linear_flux(),
                           lambda x: amp * np.cos(np.pi * x), grid,
                           dt=grid.dx ** 2)


class TestWeakResidual:
    def test_exact_heat_solution_small_residual(self):
        x = np.linspace(0, 1, 257)
        t = np.linspace(0, 0.1, 101)
        u = np.exp(-np.pi ** 2 * t)[:, None] * np.cos(np.pi * x)[None, :]
        rep = verify.weak_residual(x, t, u, flux.linear_flux())
        assert rep.max_abs <= 1e-3

    def test_residual_refines_with_the_grid(self):
        maxima = []
        for nx in (128, 256):
            x = np.linspace(0, 1, nx + 1)
            t = np.linspace(0, 0.1, 2 * nx + 1)
            u = np.exp(-np.pi ** 2 * t)[:, None] * np.cos(np.pi * x)[None, :]
            rep = verify.weak_residual(x, t, u, flux.linear_flux())
            maxima.append(rep.max_abs)
        assert maxima[0] / maxima[1] >= 1.8 ** 2 / 1.1  # about second order

    def test_constant_mode_equals_mass_drift(self):
        traj = heat_traj(64)
        rep = verify.weak_residual_trajectory(traj, flux.linear_flux())
        mass_drift = float(traj.mass()[-1] - traj.mass()[0])
        assert rep.residuals[(0, 0)] == pytest.approx(mass_drift, abs=1e-14)

    def test_family_must_be_large_enough(self):
        with pytest.raises(DomainError):
            verify.TestFunctionFamily(L=1.0, tau=1.0, modes=((0, 0),))


class TestEnvelopes:
    def test_heat_passes(self):
        rep = verify.envelope_check(heat_traj(64))
        assert rep.passed

    def test_constant_datum_flat(self):
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.1, 5)
        traj = parabolic.solve(flux.linear_flux(), np.full(33, 1.5), grid)
        rep = verify.envelope_check(traj)
        assert rep.passed and rep.worst_violation <= 0

    def test_corrupted_snapshot_flagged(self):
        traj = heat_traj(64)
        traj.u[10] = traj.u[10] + 0.5 * np.sin(np.pi * traj.grid.x) ** 2
        rep = verify.envelope_check(traj)
        assert not rep.passed
        assert rep.location[1] > 0


class TestEnergyAverage:
    def test_constant_field_zero(self):
        W = flux.potential(flux.pm_rational())
        times = np.linspace(0, 1, 11)
        e = [flux.energy(np.full(65, 2.0), 1 / 64, W) for _ in times]
        assert verify.energy_average(times, e, 0.0, 1.0) == pytest.approx(0.0)

    def test_unit_ramp_cubic_zero(self):
        W = flux.potential(flux.cubic_double_well())
        x = np.linspace(0, 1, 65)
        times = np.linspace(0, 2, 9)
        e = [flux.energy(x, 1 / 64, W) for _ in times]
        assert verify.energy_average(times, e, 0.5, 1.5) == pytest.approx(0.0, abs=1e-12)

    def test_half_ramp_pm_value(self):
        W = flux.potential(flux.pm_rational())
        x = np.linspace(0, 1, 129)
        times = np.linspace(0, 3, 13)
        e = [flux.energy(0.5 * x, 1 / 128, W) for _ in times]
        expect = 0.5 * np.log(1.25)
        assert verify.energy_average(times, e, 1.0, 2.0) == pytest.approx(expect, abs=1e-10)

    def test_shift_invariance(self):
        W = flux.potential(flux.pm_rational())
        x = np.linspace(0, 1, 65)
        a = flux.energy(0.3 * x, 1 / 64, W)
        b = flux.energy(0.3 * x + 7.0, 1 / 64, W)
        assert a == pytest.approx(b, rel=1e-14)

    def test_interval_outside_span(self):
        with pytest.raises(DomainError):
            verify.energy_average([0, 1], [0, 0], 0.5, 2.0)


class TestConcentration:
    def test_on_target_slope(self):
        x = np.linspace(0, 1, 65)
        t = np.linspace(0, 1, 5)
        u = np.tile(x, (5, 1))       # slope exactly +1 everywhere
        sup = verify.concentration_check(x, t, u, targets=(1.0, -1.0))
        assert np.all(sup < 1e-13)

    def test_restricted_columns(self):
        x = np.linspace(0, 1, 65)
        t = np.linspace(0, 1, 5)
        u = np.tile(0.0 * x, (5, 1))
        u[:, 32:] += (x[32:] - x[32])  # right half slope 1
        cols = np.zeros(64, dtype=bool)
        cols[33:60] = True
        sup = verify.concentration_check(x, t, u, targets=(1.0, -1.0),
                                         columns=cols)
        assert np.all(sup < 1e-13)
        with pytest.raises(PreconditionError):
            verify.concentration_check(x, t, u, targets=(1.0,),
                                       columns=np.zeros(64, bool))


class TestSummary:
    def test_trajectory_suite(self):
        traj = heat_traj(64)
        summary = verify.verify_trajectory(traj, flux.linear_flux())
        assert summary.all_passed
        text = summary.to_text()
        assert "mass_conservation" in text and "PASS" in text
