"""Differential-inclusion layer: subsolution fields, transition gauge,
compactly supported oscillation patches, and the density step.

A space-time field w = (u, v) is sampled on a tensor node grid; every
derived quantity lives on cells, where the Jacobian entries are the
cell-centred differences of the bilinear interpolant,

    u_x|cell = average of the two row slopes,   u_t|cell = average of the
    two column rates,

and likewise for v. With this convention the cumulative construction of the
patch second component satisfies psi_x = phi exactly in floating point, and
the auxiliary field produced by the parabolic solver satisfies v_x = u
exactly on cells.

The density step perturbs a strict subsolution with per-square sawtooth
patches so that the integrated distance of the Jacobian to the branch-graph
matrix set drops below a prescribed budget while the sup norm, time
derivative, and transition gauge stay within their drift allowances. Each
clause of that contract is verified on the produced field, not assumed.

A step mutates only its private copy; patches for distinct squares are
independent. Generation is sequential here but could fan out safely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (DomainError, NotASubsolutionError, PreconditionError,
                     ResolutionError, StepFailureError)
from .flux import BranchPair

SLOPE_MATCH_RTOL = 1e-9     # cell counts as "exact slope" within this
EXACT_TOL = 5e-13           # identities that hold to rounding


# ---------------------------------------------------------------------------
# Fields and cell data
# ---------------------------------------------------------------------------

@dataclass
class CellData:
    ux: np.ndarray
    ut: np.ndarray
    vx: np.ndarray
    vt: np.ndarray
    u_mid: np.ndarray
    areas: np.ndarray
    x_mid: np.ndarray
    t_mid: np.ndarray


def cell_jacobian(x, t, u, v):
    dx = np.diff(x)[None, :]
    dt = np.diff(t)[:, None]
    ux = 0.5 * ((u[:-1, 1:] - u[:-1, :-1]) + (u[1:, 1:] - u[1:, :-1])) / dx
    ut = 0.5 * ((u[1:, :-1] - u[:-1, :-1]) + (u[1:, 1:] - u[:-1, 1:])) / dt
    vx = 0.5 * ((v[:-1, 1:] - v[:-1, :-1]) + (v[1:, 1:] - v[1:, :-1])) / dx
    vt = 0.5 * ((v[1:, :-1] - v[:-1, :-1]) + (v[1:, 1:] - v[:-1, 1:])) / dt
    u_mid = 0.25 * (u[:-1, :-1] + u[:-1, 1:] + u[1:, :-1] + u[1:, 1:])
    areas = dt * dx
    x_mid = 0.5 * (x[:-1] + x[1:])
    t_mid = 0.5 * (t[:-1] + t[1:])
    return CellData(ux, ut, vx, vt, u_mid, areas, x_mid, t_mid)


@dataclass
class SubsolutionField:
    """The pair w = (u, v) on a node grid with a marked cell region.

    ``u_ref``/``v_ref`` hold the smooth seed the drift budgets are measured
    against, so repeated perturbations remain auditable.
    """

    x: np.ndarray
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    b: float
    region: np.ndarray
    u_ref: np.ndarray = None
    v_ref: np.ndarray = None
    label: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        nt, nx = self.t.size, self.x.size
        if self.u.shape != (nt, nx) or self.v.shape != (nt, nx):
            raise DomainError("u and v must be sampled on the (t, x) node grid")
        if self.region is None:
            self.region = np.ones((nt - 1, nx - 1), dtype=bool)
        if self.region.shape != (nt - 1, nx - 1):
            raise DomainError("region mask must be cell-shaped")
        if self.u_ref is None:
            self.u_ref = self.u.copy()
        if self.v_ref is None:
            self.v_ref = self.v.copy()

    def cells(self) -> CellData:
        return cell_jacobian(self.x, self.t, self.u, self.v)

    def ref_cells(self) -> CellData:
        return cell_jacobian(self.x, self.t, self.u_ref, self.v_ref)

    def region_area(self):
        return float(np.sum(self.cells().areas[self.region]))

    def copy(self):
        return SubsolutionField(self.x.copy(), self.t.copy(),
                                self.u.copy(), self.v.copy(), self.b,
                                self.region.copy(), self.u_ref.copy(),
                                self.v_ref.copy(), self.label)

    def check_consistency(self, tol=None):
        """v_x must track the cell average of u (discrete compatibility)."""
        c = self.cells()
        gap = float(np.max(np.abs(c.vx - c.u_mid)))
        dx = float(np.min(np.diff(self.x)))
        tol = 50.0 * dx ** 2 if tol is None else tol
        if gap > tol:
            raise PreconditionError(
                f"v_x deviates from u by {gap:.3e} (tolerance {tol:.3e})")
        return gap


def synthetic_subsolution(branches: BranchPair, nx=257, nt=257,
                          x_span=(0.0, 1.0), t_span=(0.0, 1.0),
                          position=0.5, b=1.0) -> SubsolutionField:
    """A constant-diagonal strict subsolution for tests and demos.

    The diagonal sits at the given relative position between the branches at
    the mid flux value: u = s*x, v = s*x^2/2 + r*t.
    """
    r = 0.5 * (branches.r_lo + branches.r_hi)
    s = float((1.0 - position) * branches.g_minus(r) + position * branches.g_plus(r))
    x = np.linspace(*x_span, nx)
    t = np.linspace(*t_span, nt)
    u = np.tile(s * x, (nt, 1))
    v = 0.5 * s * x[None, :] ** 2 + r * t[:, None]
    return SubsolutionField(x, t, u, v, b, None, label="synthetic")


# ---------------------------------------------------------------------------
# Transition gauge
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GaugeReport:
    Z_field: np.ndarray      # NaN outside the region
    Gamma: float
    region_measure: float
    offenders: tuple


def gauge(w: SubsolutionField, branches: BranchPair, region=None,
          band_rtol=1e-6, hard=True) -> GaugeReport:
    """Normalized position of the Jacobian diagonal between the branches.

    Averages (u_x - g-(v_t)) / (g+ - g-)(v_t) over the region. Cells whose
    diagonal leaves the closed band beyond a relative tolerance are reported;
    with ``hard`` set, they raise.
    """
    region = w.region if region is None else region
    c = w.cells()
    r1, r2 = branches.r_lo, branches.r_hi
    r_tol = band_rtol * (r2 - r1)
    vt = c.vt
    ux = c.ux
    gm = branches.g_minus(vt)
    gp = branches.g_plus(vt)
    width = gp - gm
    s_tol = band_rtol * float(np.max(width))
    bad = region & ((vt < r1 - r_tol) | (vt > r2 + r_tol)
                    | (ux < gm - s_tol) | (ux > gp + s_tol))
    offenders = tuple(zip(*np.nonzero(bad)))
    if offenders and hard:
        k, j = offenders[0]
        raise NotASubsolutionError(
            f"{len(offenders)} cells leave the closed band; first at "
            f"(t={c.t_mid[k]:.4g}, x={c.x_mid[j]:.4g}) with "
            f"(u_x, v_t)=({ux[k, j]:.4g}, {vt[k, j]:.4g})",
            offenders=offenders)
    Z = np.clip((ux - gm) / width, 0.0, 1.0)
    Z = np.where(region, Z, np.nan)
    areas = c.areas
    measure = float(np.sum(areas[region]))
    gamma_val = float(np.sum((Z * areas)[region]) / measure) if measure > 0 else np.nan
    return GaugeReport(Z, gamma_val, measure, offenders)


# ---------------------------------------------------------------------------
# Distance to the inclusion matrix set
# ---------------------------------------------------------------------------

def _branch_graph_distance(ux, vt, branches: BranchPair, n_r=257):
    """Pointwise Euclidean distance of (u_x, v_t) to the two branch graphs."""
    rs = np.linspace(branches.r_lo, branches.r_hi, n_r)
    gps = np.asarray(branches.g_plus(rs))
    gms = np.asarray(branches.g_minus(rs))
    best_p = np.full(ux.shape, np.inf)
    best_m = np.full(ux.shape, np.inf)
    for r, gp, gm in zip(rs, gps, gms):
        dp = (ux - gp) ** 2 + (vt - r) ** 2
        dm = (ux - gm) ** 2 + (vt - r) ** 2
        np.minimum(best_p, dp, out=best_p)
        np.minimum(best_m, dm, out=best_m)
    return np.sqrt(best_p), np.sqrt(best_m)


def point_branch_distance(s, r, branches: BranchPair, branch, n_r=2049):
    dp, dm = _branch_graph_distance(np.asarray([s], float), np.asarray([r], float),
                                    branches, n_r)
    return float(dp[0]) if branch == "plus" else float(dm[0])


def distance_to_inclusion(w: SubsolutionField, branches: BranchPair,
                          b=None, region=None, n_r=257):
    """Per-cell Frobenius distance of the Jacobian to the admissible matrices
    and its integral over the region.

    The admissible set at a cell pins the second row to (u, r) with r in the
    flux interval, the top-left entry to a branch value, and clamps the
    top-right entry to [-b, b].
    """
    b = w.b if b is None else float(b)
    region = w.region if region is None else region
    c = w.cells()
    dp, dm = _branch_graph_distance(c.ux, c.vt, branches, n_r)
    diag2 = np.minimum(dp, dm) ** 2
    ut_excess = np.maximum(np.abs(c.ut) - b, 0.0)
    vx_gap = c.vx - c.u_mid
    dist = np.sqrt(diag2 + ut_excess ** 2 + vx_gap ** 2)
    dist_masked = np.where(region, dist, 0.0)
    integral = float(np.sum(dist_masked * c.areas))
    return dist_masked, integral


def brute_force_cell_distance(jac_row, u_val, branches: BranchPair, b,
                              n_r=4001, n_c=4001):
    """Independent oracle: exhaustive minimization over a tabulated
    (r, branch, clamp) grid for one cell Jacobian (ux, ut, vx, vt)."""
    ux, ut, vx, vt = jac_row
    rs = np.linspace(branches.r_lo, branches.r_hi, n_r)
    cs = np.linspace(-b, b, n_c)
    c_best = cs[np.argmin(np.abs(cs - ut))]
    best = np.inf
    for g in (branches.g_plus, branches.g_minus):
        gv = np.asarray(g(rs))
        d2 = (ux - gv) ** 2 + (vt - rs) ** 2 + (ut - c_best) ** 2 + (vx - u_val) ** 2
        best = min(best, float(np.min(d2)))
    return float(np.sqrt(best))


# ---------------------------------------------------------------------------
# Oscillation patches
# ---------------------------------------------------------------------------

@dataclass
class OscillationPatch:
    """Compactly supported pair (phi, psi) with sawtooth slope statistics."""

    x: np.ndarray
    t: np.ndarray
    phi: np.ndarray
    psi: np.ndarray
    lambda_minus: float     # magnitude of the down slope
    lambda_plus: float      # up slope
    epsilon: float          # headline tolerance the patch was built for
    diagnostics: dict = field(default_factory=dict)

    @property
    def rect(self):
        return (float(self.x[0]), float(self.x[-1]),
                float(self.t[0]), float(self.t[-1]))


def _sawtooth_row(n_nodes, dx, lam_minus, lam_plus, amplitude, rng):
    """Node values of one antisymmetric bipolar sawtooth row.

    Cell slopes are exactly +lambda_plus or -lambda_minus except for at most
    a handful of settle cells per half-row; the row starts, centres, and ends
    at zero, so its trapezoid integral cancels pairwise. Peaks are reached by
    turning early rather than clipping, keeping every slope exact and the
    sup norm strictly below amplitude/2.
    """
    half = n_nodes // 2
    odd = (n_nodes % 2 == 1)
    up = lam_plus * dx
    dn = lam_minus * dx
    top, bot = 0.5 * amplitude, -0.5 * amplitude
    vals = np.zeros(half + 1)   # nodes 0..half (centre node for odd counts)
    # random phase: height of the first peak and initial direction
    peak_now = top * (0.35 + 0.65 * rng.random())
    direction = 1 if rng.random() < 0.5 else -1
    tiny = 1e-12 * max(amplitude, 1.0)
    j = 0
    while j < vals.size - 1:
        val = vals[j]
        if direction > 0 and val + up > peak_now + tiny:
            direction = -1
            peak_now = top
        elif direction < 0 and val - dn < bot - tiny:
            direction = 1
            peak_now = top
        val_next = val + (up if direction > 0 else -dn)
        # reserve room to settle the post-step value back to zero
        settle_need = int(np.ceil(abs(val_next)
                                  / (dn if val_next > 0 else up))) + 2
        if vals.size - 2 - j <= settle_need:
            break
        vals[j + 1] = val_next
        j += 1
    # settle toward zero with admissible slopes, finish with one sub-slope
    # cell; the comparisons are exact so the final cell never exceeds the
    # directional slope bound
    while j < vals.size - 1:
        val = vals[j]
        if val > dn:
            vals[j + 1] = val - dn
        elif val < -up:
            vals[j + 1] = val + up
        else:
            break
        j += 1
    if j < vals.size - 1:
        vals[j + 1:] = 0.0
    vals[-1] = 0.0
    row = np.zeros(n_nodes)
    row[:vals.size] = vals
    # antisymmetric mirror: row[n-1-i] = -row[i]
    for i in range((n_nodes + 1) // 2):
        row[n_nodes - 1 - i] = -row[i]
    if odd:
        row[half] = 0.0
    return row


def _cumtrapz_rows(phi, dx):
    psi = np.zeros_like(phi)
    np.cumsum(0.5 * (phi[:, 1:] + phi[:, :-1]) * dx, axis=1, out=psi[:, 1:])
    return psi


def build_patch(x, t, lam_minus, lam_plus, sup_budget, deriv_budget,
                psi_budget, psi_t_budget, measure_budget=None,
                m_t_cap=None, rng=None, verify=True) -> OscillationPatch:
    """Construct a sawtooth patch on the given node grid under split budgets.

    ``sup_budget`` bounds |phi|, ``deriv_budget`` bounds |phi_t| per cell,
    ``psi_*`` bound the cumulative component, ``measure_budget`` (area units)
    bounds the deficit of the exact-slope measure condition, and ``m_t_cap``
    limits the amplitude-taper width in time. Raises
    :class:`ResolutionError` when the grid cannot host admissible teeth.
    """
    rng = np.random.default_rng() if rng is None else rng
    x = np.asarray(x, float)
    t = np.asarray(t, float)
    n_nodes, n_rows = x.size, t.size
    if n_nodes < 7 or n_rows < 5:
        raise ResolutionError("patch rectangle needs at least 7x5 nodes",
                              required_nx=7, required_nt=5)
    dx = float(x[1] - x[0])
    wx, wt = float(x[-1] - x[0]), float(t[-1] - t[0])
    dts = np.diff(t)
    lam_max = max(lam_minus, lam_plus)
    h_mean = lam_minus * lam_plus / (lam_minus + lam_plus)

    # taper width: at least two interior ramp rows on each side, at most a
    # third of the height; the measure budget tightens it further because
    # ramp rows surrender their exact slopes
    m_t = wt / 3.0
    if m_t_cap is not None:
        m_t = min(m_t, m_t_cap)
    if measure_budget is not None:
        m_t = min(m_t, measure_budget / (4.0 * wx))
    m_t_min = float(dts[:2].sum() + dts[-2:].sum()) / 2.0
    if m_t_min > m_t * (1 + 1e-9):
        need = int(np.ceil(5.0 * wt / max(m_t, 1e-300)))
        raise ResolutionError(
            f"time rows too coarse for the taper (need ~{need} rows)",
            required_nt=need)

    # peak-to-peak amplitude from the stacked budgets:
    #   sup |phi| = A/2,  |phi_t| <= (A/2)/m_t,
    #   sup |psi| ~ A^2/(8 h),  |psi_t| <= sup|psi| / m_t
    caps = [2.0 * sup_budget,
            2.0 * deriv_budget * m_t,
            np.sqrt(8.0 * psi_budget * h_mean),
            np.sqrt(8.0 * psi_t_budget * h_mean * m_t)]
    amplitude = 0.85 * min(caps)
    a_min = 2.05 * lam_max * dx
    if amplitude < a_min:
        need = int(np.ceil(wx / dx * a_min / max(amplitude, 1e-300)))
        raise ResolutionError(
            f"amplitude budget {amplitude:.3g} below the two-cell tooth floor "
            f"{a_min:.3g}; need ~{need} columns", required_nx=need)

    row = _sawtooth_row(n_nodes, dx, lam_minus, lam_plus, amplitude, rng)
    ramp = np.clip(np.minimum(t - t[0], t[-1] - t) / m_t, 0.0, 1.0)
    ramp[0] = ramp[-1] = 0.0
    phi = ramp[:, None] * row[None, :]
    psi = _cumtrapz_rows(phi, dx)
    patch = OscillationPatch(x, t, phi, psi, lam_minus, lam_plus,
                             epsilon=sup_budget,
                             diagnostics={"amplitude": amplitude, "m_t": m_t})
    if verify:
        stats = measure_patch(patch)
        patch.diagnostics.update(stats)
        _verify_patch(patch, stats, sup_budget, deriv_budget,
                      psi_budget, psi_t_budget, measure_budget)
    return patch


def measure_patch(patch: OscillationPatch) -> dict:
    x, t, phi, psi = patch.x, patch.t, patch.phi, patch.psi
    dx = float(x[1] - x[0])
    dts = np.diff(t)[:, None]
    phi_x = 0.5 * ((phi[:-1, 1:] - phi[:-1, :-1]) + (phi[1:, 1:] - phi[1:, :-1])) / dx
    phi_t = 0.5 * ((phi[1:, :-1] - phi[:-1, :-1]) + (phi[1:, 1:] - phi[:-1, 1:])) / dts
    psi_t = 0.5 * ((psi[1:, :-1] - psi[:-1, :-1]) + (psi[1:, 1:] - psi[:-1, 1:])) / dts
    psi_x = 0.5 * ((psi[:-1, 1:] - psi[:-1, :-1]) + (psi[1:, 1:] - psi[1:, :-1])) / dx
    phi_cell = 0.25 * (phi[:-1, :-1] + phi[:-1, 1:] + phi[1:, :-1] + phi[1:, 1:])
    areas = np.broadcast_to(dts * dx, phi_x.shape)
    total = float(np.sum(areas))
    lam_m, lam_p = patch.lambda_minus, patch.lambda_plus
    tol = SLOPE_MATCH_RTOL * (lam_m + lam_p)
    up_area = float(np.sum(areas[np.abs(phi_x - lam_p) <= tol]))
    down_area = float(np.sum(areas[np.abs(phi_x + lam_m) <= tol]))
    row_means = np.array([np.trapezoid(phi[k], x) for k in range(t.size)])
    return {
        "sup_phi": float(np.max(np.abs(phi))),
        "sup_phi_t": float(np.max(np.abs(phi_t))),
        "sup_psi": float(np.max(np.abs(psi))),
        "sup_psi_t": float(np.max(np.abs(psi_t))),
        "slope_min": float(np.min(phi_x)),
        "slope_max": float(np.max(phi_x)),
        "psi_x_error": float(np.max(np.abs(psi_x - phi_cell))),
        "row_mean_max": float(np.max(np.abs(row_means))),
        "area": total,
        "up_area": up_area,
        "down_area": down_area,
        "up_target": lam_m / (lam_m + lam_p) * total,
        "down_target": lam_p / (lam_m + lam_p) * total,
    }


def _verify_patch(patch, stats, sup_budget, deriv_budget,
                  psi_budget, psi_t_budget, measure_budget):
    lam_m, lam_p = patch.lambda_minus, patch.lambda_plus
    scale = max(1.0, stats["sup_phi"])
    if stats["sup_phi"] >= sup_budget:
        raise ResolutionError("patch sup norm exceeds its budget")
    if stats["sup_phi_t"] >= deriv_budget:
        raise ResolutionError("patch time derivative exceeds its budget")
    if stats["sup_psi"] >= psi_budget or stats["sup_psi_t"] >= psi_t_budget:
        raise ResolutionError("cumulative component exceeds its budget")
    pad = EXACT_TOL * max(1.0, lam_m + lam_p)
    if stats["slope_min"] < -lam_m - pad or stats["slope_max"] > lam_p + pad:
        raise ResolutionError("patch slopes leave the admissible interval")
    if stats["psi_x_error"] > EXACT_TOL * scale:
        raise ResolutionError("cumulative derivative identity broke")
    if stats["row_mean_max"] > 1e-12 * max(1.0, scale):
        raise ResolutionError("row means of phi exceed 1e-12")
    if measure_budget is not None:
        if (abs(stats["up_area"] - stats["up_target"]) >= measure_budget or
                abs(stats["down_area"] - stats["down_target"]) >= measure_budget):
            raise ResolutionError(
                "exact-slope measure misses its target beyond the tolerance",
                required_nx=2 * patch.x.size, required_nt=2 * patch.t.size)


def generate_oscillation(rect, lambda1, lambda2, epsilon,
                         nx=None, nt=None, rng=None) -> OscillationPatch:
    """Sawtooth pair on an open rectangle with all tolerances equal to
    ``epsilon``: sup norms and time derivatives below it, slopes within
    [-lambda1, lambda2], exact-slope measures within epsilon (area units) of
    the canonical fractions, zero row means, and psi_x = phi exactly.

    The grid is sized automatically when not supplied; an explicit grid that
    is too coarse raises :class:`ResolutionError` stating the required size.
    """
    if min(lambda1, lambda2, epsilon) <= 0:
        raise DomainError("lambda1, lambda2, epsilon must be positive")
    x1, x2, t1, t2 = map(float, rect)
    if not (x2 > x1 and t2 > t1):
        raise DomainError("rectangle must have positive extent")
    wx, wt = x2 - x1, t2 - t1
    area = wx * wt
    lam_max = max(lambda1, lambda2)
    h_mean = lambda1 * lambda2 / (lambda1 + lambda2)
    measure_budget = 0.9 * epsilon * max(area, 1e-300)
    # amplitude implied by the budget chain, then the grid that resolves it
    m_t_cap = min(wt / 3.0, measure_budget / (4.0 * wx))
    amplitude = 0.85 * min(2.0 * epsilon, 2.0 * epsilon * m_t_cap,
                           np.sqrt(8.0 * epsilon * h_mean),
                           np.sqrt(8.0 * epsilon * h_mean * m_t_cap))
    if nx is None:
        nx = int(np.ceil(wx * 2.6 * lam_max / amplitude)) + 1
    if nt is None:
        nt = int(np.ceil(10.0 * wt / m_t_cap)) + 1
    x = np.linspace(x1, x2, int(nx))
    t = np.linspace(t1, t2, int(nt))
    return build_patch(x, t, lambda1, lambda2,
                       sup_budget=epsilon, deriv_budget=epsilon,
                       psi_budget=epsilon, psi_t_budget=epsilon,
                       measure_budget=measure_budget, rng=rng)


# ---------------------------------------------------------------------------
# Auxiliary field from a trajectory
# ---------------------------------------------------------------------------

def build_auxiliary(traj, flux, region=None, b_pad=1.0) -> SubsolutionField:
    """Wrap a parabolic trajectory as a subsolution field.

    The trajectory must have been integrated with its auxiliary component
    (the time integral of the interface fluxes), and with the same flux.
    """
    if traj.v is None:
        raise PreconditionError(
            "trajectory lacks the auxiliary component; solve with "
            "with_auxiliary=True")
    used = getattr(traj.flux_used, "name", None)
    given = getattr(flux, "name", None)
    if used is not None and given is not None and used != given:
        raise PreconditionError(
            f"flux mismatch: trajectory was solved with {used!r}, got {given!r}")
    x = traj.grid.x
    t = traj.times
    u = traj.u
    v = traj.v
    fld = SubsolutionField(x, t, u.copy(), v.copy(), b=0.0,
                           region=region, label="auxiliary")
    c = fld.cells()
    mask = fld.region
    b = float(np.max(np.abs(c.ut[mask]))) + b_pad if np.any(mask) else b_pad
    fld.b = b
    return fld


# ---------------------------------------------------------------------------
# Level-set regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RegionReport:
    name: str
    mask: np.ndarray
    area: float
    x_range: Optional[tuple]
    t_range: Optional[tuple]
    sup_t: float
    wall_distance: float

    @property
    def empty(self):
        return self.area == 0.0


def _region_report(name, mask, c, L):
    areas = c.areas
    area = float(np.sum(areas[mask]))
    if area == 0.0 or not np.any(mask):
        return RegionReport(name, mask, 0.0, None, None, -np.inf, np.inf)
    ks, js = np.nonzero(mask)
    xs = c.x_mid[js]
    ts = c.t_mid[ks]
    wall = float(min(np.min(xs), L - np.max(xs)))
    return RegionReport(name, mask, area,
                        (float(np.min(xs)), float(np.max(xs))),
                        (float(np.min(ts)), float(np.max(ts))),
                        float(np.max(ts)), wall)


def detect_regions(traj, bands=None, levels=None):
    """Classify space-time cells of a trajectory by slope bands/levels.

    ``bands`` maps names to open intervals (lo, hi): cells with slope
    strictly inside. ``levels`` maps names to values: cells whose slope
    range straddles the value within one cell's variation.
    """
    x = traj.grid.x
    t = traj.times
    dx = traj.grid.dx
    slopes = traj.slopes()           # (nt, nx)
    cell = 0.5 * (slopes[:-1] + slopes[1:])
    c = cell_jacobian(x, t, traj.u, traj.u)  # reuse midpoints/areas only
    out = {}
    for name, (lo, hi) in (bands or {}).items():
        mask = (cell > lo) & (cell < hi)
        out[name] = _region_report(name, mask, c, traj.grid.L)
    var = np.abs(slopes[1:] - slopes[:-1])
    xvar = np.abs(np.diff(cell, axis=1))
    xvar = np.pad(xvar, ((0, 0), (0, 1)), mode="edge")
    local = np.maximum(var, xvar) + 1e-12
    for name, lev in (levels or {}).items():
        mask = np.abs(cell - lev) <= local
        out[name] = _region_report(name, mask, c, traj.grid.L)
    return out


# ---------------------------------------------------------------------------
# Density step
# ---------------------------------------------------------------------------

@dataclass
class DensityStepReport:
    short_circuit: bool
    delta: float
    epsilon: float
    eta: float
    region_area: float
    dist_before: float
    dist_after: float
    gauge_ref: float
    gauge_before: float
    gauge_after: float
    sup_drift: float
    sup_u_drift_ref: float
    sup_ut_drift_ref: float
    k: int
    l: int
    kappa: float
    d_prime: float
    d_dprime: float
    b_margin: float
    n_squares: int
    counts: dict
    clauses: dict
    chain_capped: bool = False

    def to_json_line(self):
        import json
        rec = {k: (v if not isinstance(v, (np.floating, np.integer)) else float(v))
               for k, v in self.__dict__.items() if k not in ("clauses", "counts")}
        rec["counts"] = {k: int(v) for k, v in self.counts.items()}
        rec["clauses"] = {k: bool(v) for k, v in self.clauses.items()}
        return json.dumps(rec, sort_keys=True)


def _boundary_band_distance(ux, vt, branches, n_r=257):
    """Lower bound for the distance of the diagonal to the band boundary."""
    dp, dm = _branch_graph_distance(ux, vt, branches, n_r)
    caps = np.minimum(np.abs(vt - branches.r_lo), np.abs(vt - branches.r_hi))
    return np.minimum(np.minimum(dp, dm), caps)


def _beta_band(branches, delta_over_km1, n=161):
    """Half-width of the near-branch landing strips: smallest shift beta with
    min-distance(shifted graph, graph) equal to the classification step.

    The inner minimization runs over pair offsets d = r - r' resolved at the
    beta scale, since that is where the minimum sits.
    """
    r1, r2 = branches.r_lo, branches.r_hi
    rs = np.linspace(r1, r2, n)
    out = {}
    for name, g, sgn in (("plus", branches.g_plus, -1.0),
                         ("minus", branches.g_minus, +1.0)):
        gv = np.asarray(g(rs))

        def f(beta):
            ds = np.linspace(-6.0 * beta, 6.0 * beta, 121)
            other = np.asarray(g(np.clip(rs[:, None] + ds[None, :], r1, r2)))
            d_eff = np.clip(rs[:, None] + ds[None, :], r1, r2) - rs[:, None]
            d2 = (gv[:, None] + sgn * beta - other) ** 2 + d_eff ** 2
            return float(np.sqrt(np.min(d2)))

        lo, hi = 0.0, delta_over_km1
        while f(hi) < delta_over_km1 and hi < 1e6:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if f(mid) < delta_over_km1:
                lo = mid
            else:
                hi = mid
        out[name] = hi
    return out["plus"], out["minus"]


def _tile_squares(G, side_x_cells, side_t_cells):
    """Grid-aligned blocks of cells fully inside G, anchored at its corner."""
    ks, js = np.nonzero(G)
    if ks.size == 0:
        return []
    blocks = []
    for k0 in range(int(ks.min()), int(ks.max()) + 2 - side_t_cells, side_t_cells):
        for j0 in range(int(js.min()), int(js.max()) + 2 - side_x_cells, side_x_cells):
            sl = (slice(k0, k0 + side_t_cells), slice(j0, j0 + side_x_cells))
            if np.all(G[sl]):
                blocks.append(sl)
    return blocks


def _solve_push(s_i, gamma_i, branches, branch, target):
    """Push length lambda with the landed point at the target distance from
    the chosen branch graph."""
    g = branches.g_plus if branch == "plus" else branches.g_minus
    sgn = 1.0 if branch == "plus" else -1.0
    hi = abs(float(g(gamma_i)) - s_i)
    if hi <= 0:
        return 0.0
    lo = 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        d = point_branch_distance(s_i + sgn * mid, gamma_i, branches, branch)
        if d > target:
            lo = mid
        else:
            hi = mid
    return hi


def density_step(w: SubsolutionField, branches: BranchPair, b=None,
                 delta=0.1, epsilon=0.2, eta=0.05, *, gauge_budget=None,
                 rng=None, k_cap=512, min_square_cells=(5, 6),
                 n_r=257, final_mode=False):
    """One oscillation (density) pass driving the inclusion distance below
    delta * |region|.

    Implements the square-tiling algorithm: an interior working set with a
    controlled boundary collar, near-square tiles with small internal
    oscillation, index classification by distance to the branch graphs, and
    per-tile sawtooth patches whose push lengths land near the graphs. All
    drift clauses are verified on the output; ``gauge_budget`` (default
    epsilon) allows a tighter gauge allowance than the sup-norm one.

    ``final_mode`` relaxes the open-band requirement on the output to a
    distance-verified subsolution (landed teeth may touch or cross the
    branch graphs), trading the strictness clause for coarser-grid
    feasibility on strongly asymmetric branch pairs; every remaining clause,
    the distance target included, is still measured.

    Returns (new field, report); the input is never mutated.
    """
    rng = np.random.default_rng() if rng is None else rng
    b = w.b if b is None else float(b)
    gauge_budget = epsilon if gauge_budget is None else float(gauge_budget)
    if min(delta, epsilon, eta, gauge_budget) <= 0:
        raise DomainError("delta, epsilon, eta, gauge budgets must be positive")
    region = w.region
    area = w.region_area()
    if area <= 0:
        raise PreconditionError("empty region")
    cells = w.cells()
    dist_field, dist0 = distance_to_inclusion(w, branches, b, region, n_r)
    g_ref = gauge(SubsolutionField(w.x, w.t, w.u_ref, w.v_ref, b, region.copy()),
                  branches).Gamma
    g_before = gauge(w, branches).Gamma

    def report(short, out_field, dist_after, g_after, clauses, k=0, l=0,
               kappa=np.nan, dpr=np.nan, ddpr=np.nan, bpr=np.nan,
               n_sq=0, counts=None, capped=False):
        sup_drift = float(max(np.max(np.abs(out_field.u - w.u)),
                              np.max(np.abs(out_field.v - w.v))))
        oc = out_field.cells()
        rc = out_field.ref_cells()
        return DensityStepReport(
            short_circuit=short, delta=delta, epsilon=epsilon, eta=eta,
            region_area=area, dist_before=dist0, dist_after=dist_after,
            gauge_ref=g_ref, gauge_before=g_before, gauge_after=g_after,
            sup_drift=sup_drift,
            sup_u_drift_ref=float(np.max(np.abs(out_field.u - out_field.u_ref))),
            sup_ut_drift_ref=float(np.max(np.abs(oc.ut - rc.ut))),
            k=k, l=l, kappa=kappa, d_prime=dpr, d_dprime=ddpr, b_margin=bpr,
            n_squares=n_sq, counts=counts or {}, clauses=clauses,
            chain_capped=capped)

    if dist0 <= delta * area:
        clauses = {"distance_target": True, "short_circuit": True}
        return w, report(True, w, dist0, g_before, clauses)

    # --- constants of the constraint chain -------------------------------
    d0, d1 = branches.separation, branches.spread
    l_const = int(np.floor(34.0 * d1 / d0 ** 2)) + 1
    drift0 = abs(g_before - g_ref)
    d_dprime = 0.5 * (0.5 * gauge_budget - drift0)
    if d_dprime <= 0:
        raise PreconditionError(
            "input field has already spent its gauge drift allowance")
    lip = max(branches.lipschitz(), 1e-12)
    kappa = (d_dprime / l_const) / lip
    k_chain = max(6, int(np.ceil(delta / kappa)),
                  int(np.ceil(5.0 * delta * l_const / (4.0 * d_dprime))))
    # an infeasible constant chain falls back to the base split (the distance
    # arithmetic needs only k >= 6) and the drift clauses are then carried by
    # the direct measurements below
    chain_capped = k_chain > k_cap
    k = 6 if chain_capped else k_chain
    dok = delta / k
    beta_p, beta_m = _beta_band(branches, delta / (k - 1))
    # widen k until the landing strips stay disjoint
    guard = 0
    while np.any(np.asarray(branches.g_minus(branches.r_grid)) + beta_m
                 >= np.asarray(branches.g_plus(branches.r_grid)) - beta_p):
        k *= 2
        dok = delta / k
        beta_p, beta_m = _beta_band(branches, delta / (k - 1))
        guard += 1
        if guard > 30:
            raise StepFailureError(
                "landing-strips", "the near-branch strips never separate")

    # --- Step 1: interior working set with a cheap collar ----------------
    boundary_margin = _boundary_band_distance(cells.ux, cells.vt, branches, n_r)
    ut_ok = np.abs(cells.ut) < b
    theta = dok / 2.0
    G = None
    for _ in range(8):
        # cells already within the classification distance of the graphs
        # need no perturbation and are left to the collar share
        cand = (region & (boundary_margin >= theta) & ut_ok
                & (dist_field > 1.2 * theta))
        collar = float(np.sum((dist_field * cells.areas)[region & ~cand]))
        if collar <= (delta / k) * area * 1.0:
            G = cand
            break
        theta *= 0.5
    if G is None or not np.any(G):
        raise StepFailureError(
            "collar-budget",
            "the boundary collar keeps more than its distance share; "
            "refine the grid or relax delta")
    d_prime = float(np.min(boundary_margin[G]))
    b_margin = float(b - np.max(np.abs(cells.ut[G])))
    if b_margin <= 0:
        raise StepFailureError("time-derivative-margin",
                               "no strict room below the time-derivative cap")

    # --- Step 2: near-square tiles with small internal oscillation -------
    dxs = np.diff(w.x)
    dts = np.diff(w.t)
    dx = float(dxs[0])
    dt_med = float(np.median(dts))
    if final_mode:
        # push lengths adapt to each tile's spread, so the oscillation cap
        # only needs to keep the per-cell landing error a delta-fraction
        osc_cap = 0.99 * 0.3 * delta
    elif chain_capped:
        osc_cap = 0.99 * min(dok / 4.0, d_prime / 4.0)
    else:
        osc_cap = 0.99 * min(dok / 4.0, d_prime / 4.0, kappa / 2.0)
    img_cap = (0.99 * d_dprime / l_const) if not (chain_capped or final_mode) \
        else np.inf
    ut_cap = 0.99 * b_margin / 4.0
    ks_idx, js_idx = np.nonzero(G)
    span_x = (js_idx.max() - js_idx.min() + 1) * dx
    span_t = float(np.sum(dts[np.unique(ks_idx)]))
    side0 = min(span_x, span_t) / 2.0
    min_t_cells, min_x_cells = min_square_cells
    gp_cells = np.asarray(branches.g_plus(cells.vt))
    gm_cells = np.asarray(branches.g_minus(cells.vt))

    def tile_pass(avail, side):
        sx = max(min_x_cells, int(round(side / dx)))
        st = max(min_t_cells, int(round(side / dt_med)))
        good = []
        for sl in _tile_squares(avail, sx, st):
            for arr, cap in ((cells.ux, osc_cap), (cells.vt, osc_cap),
                             (cells.ut, ut_cap), (gp_cells, img_cap),
                             (gm_cells, img_cap)):
                blk = arr[sl]
                if float(blk.max() - blk.min()) > cap:
                    break
            else:
                good.append(sl)
        return good, sx, st

    # multi-scale tiling: steep zones are re-tiled at finer scales until the
    # uncovered remainder keeps only its distance share (the collar's unused
    # allowance rolls over into the tiling share)
    gap_budget = 2.0 * (delta / k) * area - collar
    blocks = []
    avail = G.copy()
    side = side0
    leftover = np.inf
    for _ in range(12):
        good, sx, st = tile_pass(avail, side)
        for sl in good:
            avail[sl] = False
        blocks.extend(good)
        leftover = float(np.sum((dist_field * cells.areas)[avail]))
        if blocks and leftover <= gap_budget:
            break
        if sx <= min_x_cells and st <= min_t_cells:
            break
        side *= 0.5
    if not blocks or leftover > gap_budget:
        raise StepFailureError(
            "square-coverage",
            f"tiles cannot cover the working set within budget at the "
            f"current grid (leftover {leftover:.3e} > {gap_budget:.3e})")

    # --- Step 3: classify tiles and solve the push lengths ---------------
    idx_plus, idx_minus, idx_osc = [], [], []
    for sl in blocks:
        kc = (sl[0].start + sl[0].stop - 1) // 2
        jc = (sl[1].start + sl[1].stop - 1) // 2
        s_i = float(cells.ux[kc, jc])
        gamma_i = float(cells.vt[kc, jc])
        blk_u = cells.ux[sl]
        blk_v = cells.vt[sl]
        osc_i = float(max(blk_u.max() - blk_u.min(), blk_v.max() - blk_v.min()))
        dp = point_branch_distance(s_i, gamma_i, branches, "plus")
        dm = point_branch_distance(s_i, gamma_i, branches, "minus")
        thr = 1.01 * (dok + osc_i)
        rec = (sl, s_i, gamma_i, osc_i, dp, dm)
        if dp <= thr:
            idx_plus.append(rec)
        elif dm <= thr:
            idx_minus.append(rec)
        else:
            idx_osc.append(rec)

    # --- Step 4: per-tile patches -----------------------------------------
    # Split budgets by role: the sup norm bound and wall-clearance constrain
    # the value and time derivative of phi, while the band-membership and
    # gauge chain constrain only psi_t (it perturbs the flux coordinate).
    u_norm_gap = 0.5 * epsilon - float(np.max(np.abs(w.u - w.u_ref)))
    c_ref = w.ref_cells()
    ut_gap = 0.5 * epsilon - float(np.max(np.abs(cells.ut - c_ref.ut)))
    if u_norm_gap <= 0 or ut_gap <= 0:
        raise PreconditionError("input field has spent its sup-norm allowance")
    B_phi = 0.9 * min(eta, u_norm_gap)
    B_phit = 0.9 * min(eta, ut_gap, b_margin / 4.0)
    B_psi = 0.9 * eta
    if final_mode:
        # the flux-coordinate wobble only needs to stay a delta-fraction
        # (it adds directly to the landing distance) and inside the band caps
        B_psit = 0.9 * min(0.2 * delta, d_prime, eta)
    else:
        B_psit = 0.9 * min(dok / 4.0, d_prime / 4.0, eta)
        if not chain_capped:
            B_psit = min(B_psit, 0.9 * kappa / 2.0)

    # the amplitude-taper rows keep partial pushes, so their area budget
    # comes from the distance target itself, split among tiles by area
    dbar = float(np.max(dist_field[G])) if np.any(G) else 0.0
    chain_share = (0.35 + 4.8 / k) if final_mode else max(4.8 / k, 0.75)
    ramp_area_allowed = max(0.05, 0.9 - chain_share) * delta * area / max(dbar, 1e-300)
    covered_osc = sum(float(np.sum(cells.areas[sl])) for sl, *_ in idx_osc)

    out = w.copy()
    n_patched = 0
    for sl, s_i, gamma_i, osc_i, dp, dm in idx_osc:
        wt_i = float(np.sum(dts[sl[0]]))
        m_t_ramp = ramp_area_allowed * wt_i / (2.0 * max(covered_osc, 1e-300))
        # feasibility floor: at least two taper rows; the measured distance
        # target below arbitrates the conservative area estimate
        row_span = float(np.sum(np.sort(dts[sl[0]])[:2]))
        m_t_ramp = max(m_t_ramp, 1.1 * row_span)
        push_target = dok + osc_i
        lam_plus = _solve_push(s_i, gamma_i, branches, "plus", push_target)
        lam_minus = _solve_push(s_i, gamma_i, branches, "minus", push_target)
        if not (lam_plus > 0 and lam_minus > 0):
            raise StepFailureError(
                "landing-strips",
                f"no push room at (s, r)=({s_i:.4g}, {gamma_i:.4g})")
        if not final_mode:
            gpv = float(branches.g_plus(gamma_i))
            gmv = float(branches.g_minus(gamma_i))
            in_plus_strip = gpv - beta_p < s_i + lam_plus < gpv
            in_minus_strip = gmv < s_i - lam_minus < gmv + beta_m
            if not (in_plus_strip and in_minus_strip):
                raise StepFailureError(
                    "landing-strips",
                    f"push lengths missed the near-branch strips at "
                    f"(s, r)=({s_i:.4g}, {gamma_i:.4g})")
        xs = w.x[sl[1].start:sl[1].stop + 1]
        ts = w.t[sl[0].start:sl[0].stop + 1]
        try:
            patch = build_patch(xs, ts, lam_minus, lam_plus,
                                sup_budget=B_phi, deriv_budget=B_phit,
                                psi_budget=B_psi, psi_t_budget=B_psit,
                                measure_budget=None, m_t_cap=m_t_ramp, rng=rng)
        except ResolutionError as exc:
            raise StepFailureError(
                "amplitude-resolution",
                f"tile at (s, r)=({s_i:.3g}, {gamma_i:.3g}) cannot host "
                f"admissible teeth: {exc}") from exc
        rsl = (slice(sl[0].start, sl[0].stop + 1),
               slice(sl[1].start, sl[1].stop + 1))
        out.u[rsl] += patch.phi
        out.v[rsl] += patch.psi
        n_patched += 1

    # --- verification of every contract clause ---------------------------
    dist_after_field, dist_after = distance_to_inclusion(out, branches, b,
                                                         region, n_r)
    g_after_rep = gauge(out, branches, hard=False)
    g_after = g_after_rep.Gamma
    oc = out.cells()
    rc = out.ref_cells()
    if final_mode:
        # landed teeth may sit on or just across the branch graphs; what
        # remains binding is that every cell stays distance-verified
        band_ok = (float(np.max(np.abs(oc.ut[region]))) <= b + EXACT_TOL
                   and np.all(np.isfinite(out.u)) and np.all(np.isfinite(out.v)))
    else:
        margin_after = _boundary_band_distance(oc.ux, oc.vt, branches, n_r)
        band_ok = ((not g_after_rep.offenders)
                   and float(np.min(margin_after[region])) > -EXACT_TOL
                   and float(np.max(np.abs(oc.ut[region]))) <= b + EXACT_TOL)
    clauses = {
        "sup_drift_lt_eta": float(max(np.max(np.abs(out.u - w.u)),
                                      np.max(np.abs(out.v - w.v)))) < eta,
        "u_ref_drift_lt_half_eps":
            float(np.max(np.abs(out.u - out.u_ref))) < 0.5 * epsilon,
        "ut_ref_drift_lt_half_eps":
            float(np.max(np.abs(oc.ut - rc.ut))) < 0.5 * epsilon,
        "gauge_drift_lt_half_eps": abs(g_after - g_ref) < 0.5 * gauge_budget,
        "strict_subsolution": band_ok,
        "distance_target": dist_after <= delta * area,
        "short_circuit": False,
    }
    rep = report(False, out, dist_after, g_after, clauses, k, l_const, kappa,
                 d_prime, d_dprime, b_margin, len(blocks),
                 {"plus": len(idx_plus), "minus": len(idx_minus),
                  "oscillated": n_patched}, chain_capped)
    failed = [name for name, ok in clauses.items()
              if name != "short_circuit" and not ok]
    if failed:
        raise StepFailureError(",".join(failed),
                               "density step produced a field violating its "
                               f"contract clauses {failed}", report=rep)
    return out, rep


def density_sequence(w, branches, deltas, epsilon, eta, b=None,
                     gauge_budget=None, rng=None, final_mode=False, **kw):
    """Apply density steps for a decreasing budget schedule.

    Returns the final field and the list of reports (short-circuited steps
    included)."""
    field_now = w
    reports = []
    for d in deltas:
        field_now, rep = density_step(field_now, branches, b=b, delta=float(d),
                                      epsilon=epsilon, eta=eta,
                                      gauge_budget=gauge_budget, rng=rng,
                                      final_mode=final_mode, **kw)
        reports.append(rep)
    return field_now, reports
