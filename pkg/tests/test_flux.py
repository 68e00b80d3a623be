import numpy as np
import pytest

from fbdiff import flux
from fbdiff.errors import (ConstructionError, DomainError, FluxHypothesisError)


# quadratic oracle for the rational model: s^2*r - s + r = 0
def pm_roots(r):
    disc = np.sqrt(1.0 - 4.0 * r * r)
    return (1.0 - disc) / (2.0 * r), (1.0 + disc) / (2.0 * r)


class TestClassification:
    def test_pm_rational(self):
        rep = flux.classify_flux(flux.pm_rational())
        assert rep.family == "perona_malik"
        assert rep.landmarks["s2"] == pytest.approx(1.0, abs=1e-6)
        assert rep.landmarks["s1"] == pytest.approx(-1.0, abs=1e-6)
        assert rep.landmarks["sigma_s2"] == pytest.approx(0.5, abs=1e-9)

    def test_cubic_non_fourier(self):
        rep = flux.classify_flux(flux.cubic_double_well())
        assert rep.family == "non_fourier"
        assert rep.landmarks["s0_minus"] == pytest.approx(-1.0, abs=1e-8)
        assert rep.landmarks["s0_plus"] == pytest.approx(1.0, abs=1e-8)
        a = 1.0 / np.sqrt(3.0)
        assert rep.landmarks["s1"] == pytest.approx(-a, abs=1e-6)
        assert rep.landmarks["s2"] == pytest.approx(a, abs=1e-6)

    def test_linear_is_strictly_parabolic(self):
        rep = flux.classify_flux(flux.linear_flux())
        assert rep.family == "strictly_parabolic"

    def test_hollig_fixture(self):
        rep = flux.classify_flux(flux.hollig_piecewise())
        assert rep.family == "hollig"
        assert rep.landmarks["s1_bar"] == pytest.approx(0.5, abs=1e-6)
        assert rep.landmarks["s2_bar"] == pytest.approx(2.5, abs=1e-6)

    def test_violated_hypotheses_fail_loudly(self):
        # decreasing flux: no family admits it
        bad = flux.FluxModel(lambda s: -np.asarray(s, float),
                             lambda s: -np.ones_like(np.asarray(s, float)),
                             "strictly_parabolic", {}, (-5, 5), "bad")
        with pytest.raises(FluxHypothesisError):
            flux.classify_flux(bad)


class TestBranchPoint:
    def test_pm_r04(self):
        m = flux.pm_rational()
        lo, hi = pm_roots(0.4)  # 0.5, 2.0
        assert flux.branch_point(m, 0.4, "minus") == pytest.approx(lo, abs=1e-10)
        assert flux.branch_point(m, 0.4, "plus") == pytest.approx(hi, abs=1e-10)

    def test_pm_r01(self):
        m = flux.pm_rational()
        lo, hi = pm_roots(0.1)  # 0.1010205..., 9.8989794...
        assert flux.branch_point(m, 0.1, "minus") == pytest.approx(lo, abs=1e-6)
        assert flux.branch_point(m, 0.1, "plus") == pytest.approx(hi, abs=1e-6)

    def test_hollig_fixture_linear_inversion(self):
        m = flux.hollig_piecewise()
        assert flux.branch_point(m, 0.75, "minus") == pytest.approx(0.75, abs=1e-10)
        assert flux.branch_point(m, 0.75, "plus") == pytest.approx(2.25, abs=1e-10)

    def test_out_of_range_r(self):
        m = flux.pm_rational()
        with pytest.raises(DomainError):
            flux.branch_point(m, 0.7, "minus")   # above sigma(s2) = 0.5

    def test_roundtrip_property(self):
        # sigma(branch_point(r, +/-)) - r vanishes for 100 random r in range
        rng = np.random.default_rng(7)
        for m, lo, hi in [(flux.pm_rational(), 1e-3, 0.499),
                          (flux.hollig_piecewise(), 0.501, 0.999),
                          (flux.cubic_double_well(), -0.38, 0.38)]:
            rs = rng.uniform(lo, hi, 100)
            if m.family == "non_fourier":
                rs = rng.uniform(-0.37, 0.37, 100)
            for r in rs:
                for br in ("plus", "minus"):
                    s = flux.branch_point(m, float(r), br)
                    assert abs(float(m(s)) - r) < 1e-10

    def test_pm_negative_branches(self):
        m = flux.pm_rational()
        sp = flux.branch_point(m, -0.4, "plus")
        sm = flux.branch_point(m, -0.4, "minus")
        assert sp == pytest.approx(-0.5, abs=1e-10)
        assert sm == pytest.approx(-2.0, abs=1e-10)


class TestBranchPair:
    def test_pm_positive_pairing(self):
        m = flux.pm_rational()
        pair = flux.build_branch_pair(m, 0.1, 0.15, "pm_positive")
        lo01, hi01 = pm_roots(0.1)
        lo015, hi015 = pm_roots(0.15)
        assert float(pair.g_plus(0.1)) == pytest.approx(hi01, abs=1e-6)
        assert float(pair.g_minus(0.15)) == pytest.approx(lo015, abs=1e-6)
        assert pair.separation > 0

    def test_hollig_fixture_pair(self):
        pair = flux.build_branch_pair(flux.hollig_piecewise(), 0.6, 0.9, "hollig")
        rs = np.linspace(0.6, 0.9, 11)
        assert np.allclose(pair.g_minus(rs), rs, atol=1e-9)
        assert np.allclose(pair.g_plus(rs), rs + 1.5, atol=1e-9)
        assert pair.separation == pytest.approx(1.5, abs=1e-8)

    def test_degenerate_interval_rejected(self):
        with pytest.raises(DomainError):
            flux.build_branch_pair(flux.pm_rational(), 0.1, 0.1, "pm_positive")

    def test_separation_positive_on_grid(self):
        pair = flux.build_branch_pair(flux.cubic_double_well(), -0.2, 0.2,
                                      "non_fourier", n=1000)
        assert np.all(pair.g_plus_tab - pair.g_minus_tab > 0)


class TestPotential:
    def test_pm_rational_log(self):
        W = flux.potential(flux.pm_rational())
        assert float(W(2.0)) == pytest.approx(0.5 * np.log(5.0), abs=1e-9)
        assert float(W(0.0)) == pytest.approx(0.0, abs=1e-12)

    def test_cubic_double_well_values(self):
        W = flux.potential(flux.cubic_double_well())
        assert float(W(1.0)) == pytest.approx(0.0, abs=1e-10)
        assert float(W(-1.0)) == pytest.approx(0.0, abs=1e-10)
        assert float(W(0.0)) == pytest.approx(0.25, abs=1e-10)

    def test_linear_quadratic(self):
        W = flux.potential(flux.linear_flux())
        assert float(W(0.0)) == pytest.approx(0.0, abs=1e-12)
        assert float(W(3.0)) == pytest.approx(4.5, abs=1e-10)

    def test_derivative_matches_flux(self):
        # |W(b)-W(a) - int_a^b sigma| small for random pairs
        m = flux.pm_exponential()
        W = flux.potential(m)
        rng = np.random.default_rng(3)
        for _ in range(20):
            a, b = sorted(rng.uniform(-4, 4, 2))
            grid = np.linspace(a, b, 2001)
            quad = np.trapezoid(m(grid), grid)
            assert abs(float(W(b)) - float(W(a)) - quad) < 1e-6

    def test_tabulated_model_potential(self):
        s = np.linspace(-6, 6, 400)
        m = flux.from_knots(s, s / (1 + s * s), "perona_malik")
        W = flux.potential(m)
        assert float(W(2.0)) == pytest.approx(0.5 * np.log(5.0), abs=1e-3)


class TestEnergy:
    def test_constant_field(self):
        W = flux.potential(flux.pm_rational())
        u = np.full(65, 3.0)
        assert flux.energy(u, 1.0 / 64, W) == pytest.approx(0.0, abs=1e-14)

    def test_unit_ramp_cubic_well(self):
        W = flux.potential(flux.cubic_double_well())
        x = np.linspace(0, 1, 129)
        assert flux.energy(x, x[1] - x[0], W) == pytest.approx(0.0, abs=1e-12)

    def test_half_ramp_pm(self):
        W = flux.potential(flux.pm_rational())
        x = np.linspace(0, 1, 129)
        expect = 0.5 * np.log(1.25)
        assert flux.energy(0.5 * x, x[1] - x[0], W) == pytest.approx(expect, abs=1e-10)


class TestModifiedFlux:
    def test_hollig_scheme(self):
        m = flux.hollig_piecewise()
        mf = flux.modify_flux(m, "hollig", {"r1": 0.6, "r2": 0.9})
        s = np.linspace(-3, 5, 10000)
        vals = mf(s)
        slopes = np.diff(vals) / np.diff(s)
        assert np.all(slopes > 0)
        # pinned outside [s-(0.6), s+(0.9)] = [0.6, 2.4]
        left = np.linspace(-3, 0.599, 200)
        right = np.linspace(2.401, 5, 200)
        assert np.allclose(mf(left), m(left), atol=1e-13)
        assert np.allclose(mf(right), m(right), atol=1e-13)
        inner_lo = np.linspace(0.601, 0.899, 100)
        assert np.all(mf(inner_lo) < m(inner_lo))
        inner_hi = np.linspace(2.101, 2.399, 100)
        assert np.all(mf(inner_hi) > m(inner_hi))

    def test_pm_blowup_scheme(self):
        m = flux.pm_rational()
        lo01, _ = pm_roots(0.1)
        mf = flux.modify_flux(m, "pm_blowup",
                              {"r_j": 0.1, "r_jp": 0.15, "hi": pm_roots(0.2)[0]})
        s = np.linspace(0.0, lo01, 50)
        assert np.allclose(mf(s), m(s), atol=1e-13)
        trans = np.linspace(lo01 + 1e-4, pm_roots(0.2)[0], 100)
        assert np.all(mf(trans) < np.minimum(m(trans), 0.15))
        wide = np.linspace(-4, 11, 8000)
        assert np.all(np.diff(mf(wide)) > 0)

    def test_non_fourier_scheme(self):
        m = flux.cubic_double_well()
        mf = flux.modify_flux(m, "non_fourier", {"r0": 0.2})
        assert float(mf(0.0)) == pytest.approx(0.0, abs=1e-12)
        sp02 = flux.branch_point(m, 0.2, "plus")
        above = np.linspace(1.0, sp02 - 1e-6, 200)
        assert np.all(mf(above) > m(above))
        wide = np.linspace(-4, 4, 8000)
        assert np.all(np.diff(mf(wide)) > 0)

    def test_pm_two_sided_scheme(self):
        m = flux.pm_rational()
        mf = flux.modify_flux(m, "pm_two_sided",
                              {"r1": -0.2, "r1p": -0.3, "r2": 0.2, "r2p": 0.3,
                               "lo": -2.0, "hi": 2.0})
        sp1 = flux.branch_point(m, -0.2, "plus")
        sm2 = flux.branch_point(m, 0.2, "minus")
        mid = np.linspace(sp1, sm2, 100)
        assert np.allclose(mf(mid), m(mid), atol=1e-13)
        upper = np.linspace(sm2 + 1e-5, 2.0, 150)
        assert np.all(mf(upper) < np.minimum(m(upper), 0.3))
        lower = np.linspace(-2.0, sp1 - 1e-5, 150)
        assert np.all(mf(lower) > np.maximum(m(lower), -0.3))
        wide = np.linspace(-6, 6, 8000)
        assert np.all(np.diff(mf(wide)) > 0)

    def test_slope_positive_everywhere_dense(self):
        m = flux.hollig_piecewise()
        mf = flux.modify_flux(m, "hollig", {"r1": 0.6, "r2": 0.9})
        s = np.linspace(-10, 12, 10000)
        d = np.diff(mf(s)) / np.diff(s)
        assert np.min(d) > 0

    def test_impossible_construction_raises(self):
        m = flux.pm_rational()
        with pytest.raises((ConstructionError, DomainError)):
            # r_j' below r_j leaves no room for an increasing arc under the cap
            flux.modify_flux(m, "pm_blowup",
                             {"r_j": 0.2, "r_jp": 0.1, "hi": 1.0})
