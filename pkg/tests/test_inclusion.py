import numpy as np
import pytest

from fbdiff import flux, inclusion, parabolic
from fbdiff.errors import (DomainError, NotASubsolutionError,
                           PreconditionError, ResolutionError)


@pytest.fixture(scope="module")
def hollig_pair():
    return flux.build_branch_pair(flux.hollig_piecewise(), 0.6, 0.9, "hollig")


def constant_diagonal_field(pair, position, nx=65, nt=65, b=1.0):
    return inclusion.synthetic_subsolution(pair, nx=nx, nt=nt,
                                           position=position, b=b)


class TestGauge:
    def test_right_branch_gives_one(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 1.0)
        rep = inclusion.gauge(w, hollig_pair)
        assert rep.Gamma == pytest.approx(1.0, abs=1e-9)

    def test_midpoint_gives_half(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.5)
        rep = inclusion.gauge(w, hollig_pair)
        assert rep.Gamma == pytest.approx(0.5, abs=1e-9)

    def test_half_and_half_averages(self, hollig_pair):
        # left spatial half on the lower branch, right half on the upper one
        r = 0.5 * (hollig_pair.r_lo + hollig_pair.r_hi)
        lo = float(hollig_pair.g_minus(r))
        hi = float(hollig_pair.g_plus(r))
        nx = nt = 129
        x = np.linspace(0, 1, nx)
        t = np.linspace(0, 1, nt)
        ux = np.where(x[:-1] + np.diff(x) / 2 < 0.5, lo, hi)
        u_row = np.concatenate([[0.0], np.cumsum(ux * np.diff(x))])
        u = np.tile(u_row, (nt, 1))
        v = np.concatenate([[0.0], np.cumsum(
            0.5 * (u_row[1:] + u_row[:-1]) * np.diff(x))])
        v = v[None, :] + r * t[:, None]
        w = inclusion.SubsolutionField(x, t, u, v, 1.0, None)
        rep = inclusion.gauge(w, hollig_pair)
        assert rep.Gamma == pytest.approx(0.5, abs=1.0 / (nx - 1))

    def test_outside_band_raises(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.5)
        w.u += 10.0 * w.x[None, :]   # u_x shifted far beyond the band
        with pytest.raises(NotASubsolutionError) as ei:
            inclusion.gauge(w, hollig_pair)
        assert len(ei.value.offenders) > 0


class TestDistance:
    def test_on_branch_is_zero(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.0)
        _, integral = inclusion.distance_to_inclusion(w, hollig_pair)
        assert integral == pytest.approx(0.0, abs=1e-8)

    def test_offset_bounded_by_shift(self, hollig_pair):
        # u_x shifted off the lower branch with everything else kept exact
        w = constant_diagonal_field(hollig_pair, 0.0)
        w.u += 0.3 * w.x[None, :]
        w.v += 0.15 * w.x[None, :] ** 2
        dist, _ = inclusion.distance_to_inclusion(w, hollig_pair)
        assert np.nanmax(dist) <= 0.3 + 1e-9
        assert np.nanmax(dist) > 0.1

    def test_time_derivative_clamp(self, hollig_pair):
        # u_t = b + 1 adds a clamp excess of one to the distance
        r = 0.5 * (hollig_pair.r_lo + hollig_pair.r_hi)
        s = float(hollig_pair.g_minus(r))
        b = 1.0
        x = np.linspace(0, 1, 65)
        t = np.linspace(0, 1e-4, 9)
        u = s * x[None, :] + (b + 1.0) * t[:, None]
        v = 0.5 * s * x[None, :] ** 2 + r * t[:, None]
        w = inclusion.SubsolutionField(x, t, u, v, b, None)
        dist, _ = inclusion.distance_to_inclusion(w, hollig_pair)
        assert np.allclose(dist, 1.0, atol=1e-3)

    def test_brute_force_cross_validation(self, hollig_pair):
        rng = np.random.default_rng(11)
        w = constant_diagonal_field(hollig_pair, 0.37, nx=33, nt=33)
        w.u += 0.11 * w.x[None, :]
        dist, _ = inclusion.distance_to_inclusion(w, hollig_pair, n_r=2049)
        c = w.cells()
        ks = rng.integers(0, 32, 10)
        js = rng.integers(0, 32, 10)
        for k, j in zip(ks, js):
            jac = (c.ux[k, j], c.ut[k, j], c.vx[k, j], c.vt[k, j])
            bf = inclusion.brute_force_cell_distance(jac, c.u_mid[k, j],
                                                     hollig_pair, w.b)
            assert dist[k, j] == pytest.approx(bf, abs=1e-4)


class TestOscillation:
    def test_acceptance_parameters(self):
        patch = inclusion.generate_oscillation((0, 1, 0, 1), 1.0, 2.0, 0.05,
                                               rng=np.random.default_rng(0))
        s = patch.diagnostics
        assert s["sup_phi"] < 0.05
        assert s["sup_phi_t"] < 0.05
        assert s["sup_psi"] < 0.05 and s["sup_psi_t"] < 0.05
        # measured slope-set fractions within eps of (2/3, 1/3)
        assert abs(s["down_area"] - 2.0 / 3.0) < 0.05
        assert abs(s["up_area"] - 1.0 / 3.0) < 0.05
        assert s["psi_x_error"] < 1e-12
        assert s["row_mean_max"] < 1e-12
        assert s["slope_min"] >= -1.0 - 1e-10
        assert s["slope_max"] <= 2.0 + 1e-10

    def test_cumulative_identity_exact(self):
        patch = inclusion.generate_oscillation((0, 2, 0, 1), 0.5, 0.8, 0.1,
                                               rng=np.random.default_rng(1))
        assert patch.diagnostics["psi_x_error"] < 1e-12

    def test_row_means_vanish(self):
        patch = inclusion.generate_oscillation((0, 1, 0, 0.5), 1.5, 0.7, 0.1,
                                               rng=np.random.default_rng(2))
        assert patch.diagnostics["row_mean_max"] < 1e-12

    def test_too_coarse_grid_reports_requirement(self):
        with pytest.raises(ResolutionError) as ei:
            inclusion.generate_oscillation((0, 1, 0, 1), 1.0, 2.0, 0.05,
                                           nx=41, nt=41)
        assert (ei.value.required_nx or 0) > 41 or (ei.value.required_nt or 0) > 41

    def test_bad_parameters(self):
        with pytest.raises(DomainError):
            inclusion.generate_oscillation((0, 1, 0, 1), -1.0, 2.0, 0.05)


class TestAuxiliaryField:
    def test_heat_flux_coordinate(self):
        lin = flux.linear_flux()
        grid = parabolic.make_grid(1.0, 128, 0.0, 0.05, 26)
        traj = parabolic.solve(lin, lambda x: 0.3 * np.cos(np.pi * x), grid,
                               dt=grid.dx ** 2 * 4, with_auxiliary=True)
        fld = inclusion.build_auxiliary(traj, lin)
        c = fld.cells()
        # v_t must equal sigma(u_x) = u_x for the linear flux
        mid = np.s_[5:-5, 5:-5]
        assert np.max(np.abs(c.vt[mid] - c.ux[mid])) < 2e-3

    def test_constant_field_gives_linear_v(self):
        lin = flux.linear_flux()
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.2, 5)
        traj = parabolic.solve(lin, np.full(33, 2.0), grid, with_auxiliary=True)
        fld = inclusion.build_auxiliary(traj, lin)
        # v = integral of u = 2x at every time
        assert np.allclose(fld.v, 2.0 * fld.x[None, :], atol=1e-12)

    def test_v_slope_convergence(self):
        lin = flux.linear_flux()
        gaps = []
        for nx in (64, 128, 256):
            grid = parabolic.make_grid(1.0, nx, 0.0, 0.05, 11)
            traj = parabolic.solve(lin, lambda x: 0.5 * np.cos(np.pi * x),
                                   grid, with_auxiliary=True)
            fld = inclusion.build_auxiliary(traj, lin)
            gaps.append(fld.check_consistency(tol=np.inf))
        assert gaps[0] < 1e-10  # exact by construction, not just O(dx^2)

    def test_missing_auxiliary_rejected(self):
        lin = flux.linear_flux()
        grid = parabolic.make_grid(1.0, 32, 0.0, 0.1, 3)
        traj = parabolic.solve(lin, lambda x: 0.1 * np.cos(np.pi * x), grid)
        with pytest.raises(PreconditionError):
            inclusion.build_auxiliary(traj, lin)


class TestRegions:
    def test_no_excursion_empty(self):
        lin = flux.linear_flux()
        grid = parabolic.make_grid(1.0, 64, 0.0, 0.1, 11)
        traj = parabolic.solve(lin, lambda x: 0.1 * np.cos(np.pi * x), grid)
        regs = inclusion.detect_regions(traj, bands={"Q": (5.0, 6.0)})
        assert regs["Q"].empty

    def test_band_region_properties(self):
        lin = flux.linear_flux()
        grid = parabolic.make_grid(1.0, 128, 0.0, 0.3, 61)
        traj = parabolic.solve(lin, lambda x: -np.cos(np.pi * x), grid)
        regs = inclusion.detect_regions(traj, bands={"Q": (1.0, 2.5)},
                                        levels={"F": 1.0})
        q = regs["Q"]
        assert not q.empty
        assert q.wall_distance > 0.0
        assert q.sup_t < 0.3
        assert not regs["F"].empty


class TestDensityStep:
    def test_short_circuit_on_satisfied_input(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.0, nx=65, nt=65)
        out, rep = inclusion.density_step(w, hollig_pair, delta=1.0,
                                          epsilon=0.2, eta=0.05)
        assert rep.short_circuit
        assert out is w

    def test_single_step_contract(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.5, nx=769, nt=257)
        out, rep = inclusion.density_step(w, hollig_pair, delta=0.1,
                                          epsilon=0.2, eta=0.05,
                                          rng=np.random.default_rng(5))
        assert not rep.short_circuit
        assert all(rep.clauses.values()) or rep.clauses["short_circuit"] is False
        assert rep.dist_after <= 0.1 * rep.region_area
        assert abs(rep.gauge_after - rep.gauge_ref) < 0.1
        assert rep.sup_drift < 0.05
        for name, ok in rep.clauses.items():
            if name != "short_circuit":
                assert ok, name

    def test_schedule_shrinks_distance(self, hollig_pair):
        w = constant_diagonal_field(hollig_pair, 0.5, nx=769, nt=257)
        _, reps = inclusion.density_sequence(
            w, hollig_pair, deltas=[1 / k for k in range(1, 6)],
            epsilon=0.2, eta=0.05, rng=np.random.default_rng(6))
        area = reps[0].region_area
        dists = [r.dist_after for r in reps]
        for k, d in enumerate(dists, start=1):
            assert d <= area / k + 1e-12
        assert all(d2 <= d1 + 1e-12 for d1, d2 in zip(dists, dists[1:]))
        assert dists[-1] < dists[0] or reps[0].dist_after < reps[0].dist_before
