"""Independent verification: weak-form residuals against a smooth test
family, envelope monotonicity, energy averages, and slope concentration.

All evaluations are read-only and embarrassingly parallel over test
functions and snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, PreconditionError
from .flux import Potential

ENVELOPE_TOL = 1e-9


@dataclass(frozen=True)
class TestFunctionFamily:
    """Products of cosine modes in x and monomials in t/tau.

    The cosine basis carries no wall flux, so the weak identity holds
    without boundary terms; the family size stays small enough for CI.
    """

    L: float
    tau: float
    modes: tuple = ((0, 0), (1, 0), (2, 0), (3, 0), (4, 0),
                    (0, 1), (1, 1), (2, 1), (3, 1), (4, 1),
                    (0, 2), (1, 2), (2, 2), (3, 2), (4, 2))

    def __post_init__(self):
        if len(self.modes) < 6:
            raise DomainError("test family needs at least 6 members")

    def evaluate(self, m, n, x, t):
        xx = np.cos(m * np.pi * x[None, :] / self.L)
        tt = (t[:, None] / self.tau) ** n
        return xx * tt

    def dt(self, m, n, x, t):
        if n == 0:
            return np.zeros((t.size, x.size))
        xx = np.cos(m * np.pi * x[None, :] / self.L)
        tt = n * (t[:, None] ** (n - 1)) / self.tau ** n
        return xx * tt

    def dx(self, m, n, x, t):
        xx = -(m * np.pi / self.L) * np.sin(m * np.pi * x[None, :] / self.L)
        tt = (t[:, None] / self.tau) ** n
        return xx * tt


@dataclass
class ResidualReport:
    residuals: dict          # (m, n) -> signed residual
    max_abs: float
    nx: int
    tau: float
    oscillation_scale: float

    def worst(self):
        key = max(self.residuals, key=lambda k: abs(self.residuals[k]))
        return key, self.residuals[key]


def _node_slopes(u, dx):
    out = np.empty_like(u)
    out[:, 1:-1] = (u[:, 2:] - u[:, :-2]) / (2.0 * dx)
    out[:, 0] = 0.0
    out[:, -1] = 0.0
    return out


def weak_residual(x, t, u, flux, family: TestFunctionFamily = None,
                  u0=None) -> ResidualReport:
    """Left minus right side of the weak identity for every test function.

    The identity compares the mass-weighted boundary snapshots with the
    space-time integral of u * zeta_t - sigma(u_x) * zeta_x, all by
    composite trapezoid quadrature on the field's own grid.
    """
    x = np.asarray(x, float)
    t = np.asarray(t, float)
    u = np.asarray(u, float)
    L = float(x[-1] - x[0])
    tau = float(t[-1] - t[0])
    if family is None:
        family = TestFunctionFamily(L=L, tau=max(tau, 1e-300))
    u0 = u[0] if u0 is None else np.asarray(u0, float)
    dx = float(x[1] - x[0])
    ux = _node_slopes(u, dx)
    sig = flux(ux)
    residuals = {}
    for (m, n) in family.modes:
        zeta = family.evaluate(m, n, x, t)
        zeta_t = family.dt(m, n, x, t)
        zeta_x = family.dx(m, n, x, t)
        lhs = (np.trapezoid(u[-1] * zeta[-1], x)
               - np.trapezoid(u0 * zeta[0], x))
        integrand = u * zeta_t - sig * zeta_x
        rhs = np.trapezoid(np.trapezoid(integrand, x, axis=1), t)
        residuals[(m, n)] = float(lhs - rhs)
    osc = float(np.max(np.abs(np.diff(ux, axis=1)))) if u.shape[1] > 2 else 0.0
    return ResidualReport(residuals,
                          max(abs(v) for v in residuals.values()),
                          x.size - 1, tau, osc)


def weak_residual_trajectory(traj, flux, family=None) -> ResidualReport:
    return weak_residual(traj.grid.x, traj.times, traj.u, flux,
                         family=family, u0=traj.initial)


@dataclass
class EnvelopeReport:
    passed: bool
    worst_violation: float
    location: tuple          # (which envelope, snapshot index)


def envelope_check(traj, tol=ENVELOPE_TOL) -> EnvelopeReport:
    """Monotonicity of the four envelope curves of u and u_x."""
    curves = {
        "max_u": (traj.u.max(axis=1), -1),
        "min_u": (traj.u.min(axis=1), +1),
        "max_ux": (traj.max_ux(), -1),
        "min_ux": (traj.min_ux(), +1),
    }
    worst = 0.0
    where = ("", -1)
    for name, (series, direction) in curves.items():
        drift = direction * np.diff(series)
        if drift.size == 0:
            continue
        v = float(-np.min(drift))
        if v > worst:
            worst = v
            where = (name, int(np.argmin(drift)) + 1)
    return EnvelopeReport(worst <= tol, worst, where)


def energy_average(times, energies, t0, t1) -> float:
    """Trapezoid time average of an energy series over [t0, t1]."""
    times = np.asarray(times, float)
    energies = np.asarray(energies, float)
    if t0 < times[0] - 1e-12 or t1 > times[-1] + 1e-12:
        raise DomainError(
            f"[{t0:g}, {t1:g}] outside the recorded span "
            f"[{times[0]:g}, {times[-1]:g}]")
    if t1 <= t0:
        raise DomainError("empty averaging interval")
    grid = np.concatenate([[t0], times[(times > t0) & (times < t1)], [t1]])
    vals = np.interp(grid, times, energies)
    return float(np.trapezoid(vals, grid) / (t1 - t0))


def trajectory_energy_average(traj, W: Potential, t0=None, t1=None) -> float:
    from .flux import energy as snapshot_energy
    t0 = float(traj.times[0]) if t0 is None else t0
    t1 = float(traj.times[-1]) if t1 is None else t1
    energies = [snapshot_energy(traj.u[k], traj.grid.dx, W)
                for k in range(traj.u.shape[0])]
    return energy_average(traj.times, energies, t0, t1)


def concentration_check(x, t, u, targets, columns=None):
    """Per-snapshot sup of the slope distance to the target set.

    ``columns`` restricts the sup to perturbed node columns (boolean mask
    over interfaces); outside it the unperturbed flow is not expected to
    concentrate.
    """
    u = np.asarray(u, float)
    dx = float(x[1] - x[0])
    slopes = np.diff(u, axis=1) / dx
    if columns is not None:
        if not np.any(columns):
            raise PreconditionError("no perturbed columns to check")
        slopes = slopes[:, columns]
    dist = np.min(np.abs(slopes[..., None]
                         - np.asarray(targets, float)[None, None, :]), axis=2)
    return dist.max(axis=1)


@dataclass
class VerificationSummary:
    checks: dict = field(default_factory=dict)

    def record(self, name, passed, value, bound=None):
        self.checks[name] = {"passed": bool(passed), "value": float(value),
                             "bound": None if bound is None else float(bound)}

    @property
    def all_passed(self):
        return all(c["passed"] for c in self.checks.values())

    def to_text(self):
        lines = []
        for name, c in self.checks.items():
            mark = "PASS" if c["passed"] else "FAIL"
            bound = "" if c["bound"] is None else f" (bound {c['bound']:.6g})"
            lines.append(f"[{mark}] {name}: {c['value']:.6g}{bound}")
        return "\n".join(lines) + "\n"


def verify_trajectory(traj, flux, W: Potential = None,
                      residual_bound=None) -> VerificationSummary:
    """The hard invariant suite for a plain parabolic trajectory."""
    out = VerificationSummary()
    mass = traj.mass()
    drift = float(np.max(np.abs(mass - mass[0])))
    out.record("mass_conservation", drift <= 1e-12 * max(1.0, abs(mass[0])),
               drift, 1e-12 * max(1.0, abs(mass[0])))
    env = envelope_check(traj)
    out.record("envelope_monotonicity", env.passed, env.worst_violation,
               ENVELOPE_TOL)
    rep = weak_residual_trajectory(traj, flux)
    bound = residual_bound if residual_bound is not None else np.inf
    out.record("weak_residual", rep.max_abs <= bound, rep.max_abs,
               None if residual_bound is None else bound)
    return out
