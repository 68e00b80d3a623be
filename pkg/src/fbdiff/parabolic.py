"""Strictly parabolic solver for u_t = (sigma(u_x))_x with zero-flux walls.

The scheme is implicit Euler in time with conservative central flux
differences: interior nodes own cells of width dx, wall nodes own dx/2, and
the update of every node is a difference of interface fluxes

    F_{i+1/2} = sigma((u_{i+1} - u_i) / dx),     F at the walls = 0.

Summing the update against the cell widths telescopes to zero, so the
trapezoid mass of u is conserved to rounding regardless of Newton accuracy
(the accepted state is always re-assembled from the interface fluxes). With
a strictly increasing flux the Jacobian is an M-matrix, which gives the
discrete maximum principle for u and, on the interface slopes themselves,
the non-expanding envelope property.

A solve call is one logical thread; distinct solves share no mutable state
and may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import (DomainError, EstimationError, NotReachedError,
                     PreconditionError, SolverError)

NEWTON_TOL = 1e-12
NEWTON_MAX = 40


@dataclass(frozen=True)
class Grid:
    """Spatial interval (0, L) with nx cells and a snapshot schedule."""

    L: float
    nx: int
    times: np.ndarray

    def __post_init__(self):
        if self.nx < 16:
            raise DomainError("nx must be at least 16")
        if self.L <= 0:
            raise DomainError("domain length must be positive")
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1 or np.any(np.diff(t) <= 0):
            raise DomainError("snapshot times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def dx(self):
        return self.L / self.nx

    @property
    def x(self):
        return np.linspace(0.0, self.L, self.nx + 1)


def make_grid(L, nx, t0, t1, n_snapshots=41) -> Grid:
    return Grid(float(L), int(nx), np.linspace(float(t0), float(t1), int(n_snapshots)))


@dataclass
class Trajectory:
    """Snapshots of u (and optionally the auxiliary potential v) in time.

    ``u`` has shape (n_snapshots, nx+1). Snapshots are immutable by
    convention; derived quantities are recomputed on demand.
    """

    grid: Grid
    u: np.ndarray
    flux_used: object
    initial: np.ndarray
    v: Optional[np.ndarray] = None
    newton_iterations: int = 0
    steps_taken: int = 0

    @property
    def times(self):
        return self.grid.times

    def slopes(self):
        """Interface slopes per snapshot, shape (n_snapshots, nx)."""
        return np.diff(self.u, axis=1) / self.grid.dx

    def mass(self):
        """Trapezoid mass of every snapshot (the conserved functional)."""
        return np.trapezoid(self.u, dx=self.grid.dx, axis=1)

    def max_ux(self):
        """Largest slope per snapshot, the zero wall slope included."""
        return np.maximum(self.slopes().max(axis=1), 0.0)

    def min_ux(self):
        """Smallest slope per snapshot, the zero wall slope included."""
        return np.minimum(self.slopes().min(axis=1), 0.0)

    def mean_value(self):
        return float(self.mass()[0] / self.grid.L)

    def sup_distance_to_mean(self):
        """W^{1,inf}-type distance to the conserved mean, per snapshot."""
        ubar = self.mean_value()
        return (np.max(np.abs(self.u - ubar), axis=1)
                + np.max(np.abs(self.slopes()), axis=1))

    def export_csv(self, path, header_lines=()):
        x = self.grid.x
        with open(path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t,x,u,ux\n")
            for k, t in enumerate(self.times):
                ux_nodes = node_slopes(self.u[k], self.grid.dx)
                for j in range(x.size):
                    fh.write(f"{t:.17g},{x[j]:.17g},{self.u[k, j]:.17g},"
                             f"{ux_nodes[j]:.17g}\n")


def node_slopes(u, dx):
    """Node-centred derivative: central interior, zero at the walls."""
    out = np.empty_like(u)
    out[1:-1] = (u[2:] - u[:-2]) / (2.0 * dx)
    out[0] = 0.0
    out[-1] = 0.0
    return out


def check_compatibility(u0, dx, tol=None):
    """Discrete form of zero wall slopes for the initial datum.

    A smooth datum with vanishing wall derivative has first interface slopes
    of curvature size, so the default tolerance scales with the local second
    difference of the slopes.
    """
    s = np.diff(u0) / dx
    if tol is None:
        edge_curv = max(abs(s[1] - s[0]), abs(s[-1] - s[-2])) if s.size > 2 else 0.0
        tol = max(1e-8, 3.0 * edge_curv)
    if abs(s[0]) > tol or abs(s[-1]) > tol:
        raise PreconditionError(
            f"initial datum violates zero wall slopes: edge slopes "
            f"({s[0]:.3g}, {s[-1]:.3g}) exceed tolerance {tol:.3g}")


class _Stepper:
    """One implicit-Euler step with Newton iteration on the interface fluxes."""

    def __init__(self, flux, nx, dx, newton_tol=NEWTON_TOL):
        self.flux = flux
        dfn = getattr(flux, "deriv", None)
        self.dflux = dfn if callable(dfn) else flux.d
        self.nx = nx
        self.dx = dx
        self.tol = newton_tol
        h = np.full(nx + 1, dx)
        h[0] = h[-1] = 0.5 * dx
        self.h = h
        self.iterations = 0

    def interface_fluxes(self, u):
        """sigma at the nx interior interfaces, walls excluded (always 0)."""
        return self.flux((u[1:] - u[:-1]) / self.dx)

    def _divergence(self, f):
        div = np.empty(self.nx + 1)
        div[0] = f[0]
        div[1:-1] = f[1:] - f[:-1]
        div[-1] = -f[-1]
        return div

    def _newton(self, u_old, dt, t):
        """Plain Newton for one implicit step; raises on non-convergence."""
        u = u_old.copy()
        scale = max(1.0, float(np.max(np.abs(u_old))))
        rmax = np.inf
        for it in range(NEWTON_MAX):
            f = self.interface_fluxes(u)
            res = u - u_old - (dt / self.h) * self._divergence(f)
            rmax = float(np.max(np.abs(res)))
            self.iterations += 1
            if rmax <= self.tol * scale:
                return u
            dphi = self.dflux((u[1:] - u[:-1]) / self.dx) / self.dx
            if np.any(~np.isfinite(dphi)) or np.any(dphi <= 0):
                raise PreconditionError(
                    "flux derivative must be positive on the visited slopes")
            c = dt / self.h
            n = self.nx + 1
            ab = np.zeros((3, n))
            # diagonal
            ab[1, 0] = 1.0 + c[0] * dphi[0]
            ab[1, 1:-1] = 1.0 + c[1:-1] * (dphi[:-1] + dphi[1:])
            ab[1, -1] = 1.0 + c[-1] * dphi[-1]
            # super-diagonal (column j holds A[j-1, j])
            ab[0, 1:] = -c[:-1] * dphi
            # sub-diagonal (column j holds A[j+1, j])
            ab[2, :-1] = -c[1:] * dphi
            u = u - solve_banded((1, 1), ab, res)
            if not np.all(np.isfinite(u)):
                raise SolverError("Newton produced non-finite iterates",
                                  time=t, residual=rmax)
        raise SolverError(
            f"Newton failed to converge (residual {rmax:.3e})",
            time=t, residual=rmax)

    def step(self, u_old, dt, t=None, _depth=0):
        """Advance one implicit step; returns (u_new, flux sub-steps).

        The accepted state is re-assembled from the converged interface
        fluxes so the trapezoid mass telescopes exactly. When Newton fails,
        the step is split in half recursively; the returned list of
        (sub_dt, interface fluxes) pairs reflects the actual sub-steps.
        """
        try:
            u = self._newton(u_old, dt, t)
        except SolverError:
            if _depth >= 14:
                raise
            u_mid, parts1 = self.step(u_old, 0.5 * dt, t, _depth + 1)
            u_end, parts2 = self.step(u_mid, 0.5 * dt,
                                      None if t is None else t + 0.5 * dt,
                                      _depth + 1)
            return u_end, parts1 + parts2
        f = self.interface_fluxes(u)
        return u_old + (dt / self.h) * self._divergence(f), [(dt, f)]


def _auxiliary_init(u0, dx):
    """v(x, t0) = cumulative integral of the initial datum."""
    v = np.empty_like(u0)
    v[0] = 0.0
    np.cumsum(0.5 * (u0[1:] + u0[:-1]) * dx, out=v[1:])
    return v


def _auxiliary_increment(v, fluxes, dt):
    """Advance v with the same interface fluxes the scheme just used.

    Interior nodes average their two interface fluxes; the wall values stay
    fixed (zero at x=0, the conserved mass at x=L), which makes the cell
    slope of v track the cell average of u exactly.
    """
    v[1:-1] += dt * 0.5 * (fluxes[:-1] + fluxes[1:])


def solve(flux, u0, grid: Grid, t_end=None, dt=None,
          newton_tol=NEWTON_TOL, with_auxiliary=False,
          check_initial=True) -> Trajectory:
    """Integrate the zero-flux problem from grid.times[0] and record snapshots.

    ``dt`` defaults to dx; pass dx**2 for time-error-free convergence studies.
    Snapshot instants are hit exactly by shortening the final substep.
    """
    x = grid.x
    u0 = np.asarray(u0(x) if callable(u0) else u0, dtype=float).copy()
    if u0.shape != x.shape:
        raise DomainError(f"u0 must have {x.size} nodes")
    if check_initial:
        check_compatibility(u0, grid.dx)
    times = grid.times
    if t_end is not None:
        times = times[times < t_end - 1e-15]
        times = np.append(times, float(t_end))
    if times.size < 1:
        raise DomainError("no snapshot times requested")
    dt = grid.dx if dt is None else float(dt)
    if dt <= 0:
        raise DomainError("dt must be positive")

    stepper = _Stepper(flux, grid.nx, grid.dx, newton_tol)
    snaps = [u0.copy()]
    v = None
    vsnaps = None
    if with_auxiliary:
        v = _auxiliary_init(u0, grid.dx)
        vsnaps = [v.copy()]

    u = u0.copy()
    t = float(times[0])
    steps = 0
    for target in times[1:]:
        while t < target - 1e-14:
            step_dt = min(dt, target - t)
            u, parts = stepper.step(u, step_dt, t)
            if with_auxiliary:
                for sub_dt, fl in parts:
                    _auxiliary_increment(v, fl, sub_dt)
            t += step_dt
            steps += 1
        snaps.append(u.copy())
        if with_auxiliary:
            vsnaps.append(v.copy())
        t = float(target)

    out_grid = Grid(grid.L, grid.nx, times)
    return Trajectory(out_grid, np.asarray(snaps), flux, u0,
                      v=None if vsnaps is None else np.asarray(vsnaps),
                      newton_iterations=stepper.iterations, steps_taken=steps)


# ---------------------------------------------------------------------------
# Theorem-style diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecayBound:
    """The closed-form exponential decay rate of the strictly parabolic flow."""

    kappa: float
    lam: float
    m: float
    theta: float
    theta_tilde: float
    grad_sup: float
    L: float
    gamma: float


def gamma_bound(flux, u0_grad_sup, kappa, lam, m, L,
                n_samples=4001, second_diff_step=1e-4) -> DecayBound:
    """Decay-rate lower bound from the flux slope extrema.

    theta / theta_tilde are the min slope and max |curvature| of the flux over
    the slope range the solution can visit; curvature comes from second
    differences with the given step.
    """
    if not (0 < kappa < 1):
        raise DomainError("kappa must lie in (0, 1)")
    if lam <= 0 or m <= 1:
        raise DomainError("need lambda > 0 and m > 1")
    a = abs(u0_grad_sup) * m / (m - 1.0)
    s = np.linspace(-a, a, n_samples) if a > 0 else np.zeros(3)
    theta = float(np.min(flux.deriv(s)))
    if hasattr(flux, "second_diff"):
        theta_tilde = float(np.max(flux.second_diff(s, second_diff_step)))
    else:
        h = second_diff_step
        theta_tilde = float(np.max(np.abs(flux(s + h) - 2.0 * flux(s) + flux(s - h)) / h ** 2))
    if theta <= 0:
        raise DomainError("flux slope must stay positive on the visited range")
    e = np.exp(-lam * L)
    denom = max(abs(u0_grad_sup) * theta_tilde / ((1.0 - kappa) * theta) + 1.0, m) - e
    gamma = kappa * theta * lam ** 2 * e / denom
    return DecayBound(kappa, lam, m, theta, theta_tilde,
                      float(abs(u0_grad_sup)), float(L), float(gamma))


@dataclass(frozen=True)
class DecayFit:
    rate: float
    residual: float
    n_points: int


def decay_rate_estimate(traj: Trajectory, noise_floor=1e-12) -> DecayFit:
    """Least-squares exponential rate of the distance to the mean state."""
    norms = traj.sup_distance_to_mean()
    t = traj.times
    mask = norms > noise_floor
    if int(mask.sum()) < 10:
        raise EstimationError(
            f"only {int(mask.sum())} snapshots above the noise floor; "
            "the trajectory has already converged")
    tt, yy = t[mask], np.log(norms[mask])
    A = np.vstack([tt, np.ones_like(tt)]).T
    coef, res, *_ = np.linalg.lstsq(A, yy, rcond=None)
    fitted = A @ coef
    return DecayFit(rate=float(-coef[0]),
                    residual=float(np.sqrt(np.mean((yy - fitted) ** 2))),
                    n_points=int(mask.sum()))


_STATISTICS = {
    "max_ux": (lambda s: max(float(s.max()), 0.0), lambda traj: traj.max_ux(), -1),
    "min_ux": (lambda s: min(float(s.min()), 0.0), lambda traj: traj.min_ux(), +1),
}


def first_hitting_time(traj: Trajectory, statistic: str, level: float,
                       tol_factor=1e-9) -> float:
    """First time the chosen slope envelope crosses the level.

    The envelope is monotone for these flows, so the crossing is located by
    linear interpolation between the bracketing snapshots.
    """
    if statistic not in _STATISTICS:
        raise DomainError(f"statistic must be one of {tuple(_STATISTICS)}")
    _, series_fn, direction = _STATISTICS[statistic]
    series = series_fn(traj)
    t = traj.times
    drift = np.diff(series)
    tol = tol_factor * max(1.0, float(np.max(np.abs(series))))
    if np.any(direction * drift < -tol):
        raise PreconditionError(f"{statistic} is not monotone on this trajectory")
    gap0 = direction * (level - series[0])
    if gap0 < -tol:
        raise DomainError(
            f"level {level:g} lies on the wrong side of the initial value {series[0]:g}")
    if abs(series[0] - level) <= tol:
        return float(t[0])
    crossed = direction * (series - level) >= 0
    if not np.any(crossed):
        k = int(np.argmin(np.abs(series - level)))
        raise NotReachedError(
            f"{statistic} never reached {level:g} by t={t[-1]:g}",
            closest_value=float(series[k]), closest_time=float(t[k]))
    k = int(np.argmax(crossed))
    if k == 0:
        return float(t[0])
    f0, f1 = series[k - 1] - level, series[k] - level
    w = f0 / (f0 - f1)
    return float(t[k - 1] + w * (t[k] - t[k - 1]))


def solve_until(flux, u0, L, nx, statistic, level, dt=None,
                t_start=0.0, t_max=200.0, snap_dt=None,
                newton_tol=NEWTON_TOL, with_auxiliary=True,
                check_initial=True):
    """Integrate until a slope envelope first hits the level, exactly.

    The final substep is bisected so the returned trajectory's last snapshot
    sits on the crossing to high accuracy. Returns the trajectory; its last
    time is the hitting time. Raises NotReachedError when the budget runs out.
    """
    if statistic not in _STATISTICS:
        raise DomainError(f"statistic must be one of {tuple(_STATISTICS)}")
    reduce_fn, _, direction = _STATISTICS[statistic]
    dx = L / nx
    dt = dx if dt is None else float(dt)
    snap_dt = 20 * dt if snap_dt is None else float(snap_dt)
    x = np.linspace(0.0, L, nx + 1)
    u = np.asarray(u0(x) if callable(u0) else u0, dtype=float).copy()
    if check_initial:
        check_compatibility(u, dx)
    stepper = _Stepper(flux, nx, dx, newton_tol)

    def stat(w):
        return reduce_fn(np.diff(w) / dx)

    s0 = stat(u)
    if direction * (level - s0) < 0:
        raise DomainError(
            f"level {level:g} on the wrong side of the initial {statistic} {s0:g}")

    v = _auxiliary_init(u, dx) if with_auxiliary else None
    snaps, vsnaps, times = [u.copy()], ([v.copy()] if with_auxiliary else None), [t_start]
    t = t_start
    last_snap = t_start
    if abs(s0 - level) <= 1e-13 * max(1.0, abs(level)):
        grid = Grid(L, nx, np.array(times))
        return Trajectory(grid, np.asarray(snaps), flux, snaps[0],
                          v=None if vsnaps is None else np.asarray(vsnaps))

    while t < t_max:
        u_new, parts_new = stepper.step(u, dt, t)
        if direction * (stat(u_new) - level) >= 0:
            # bisect the step length for the exact crossing
            lo_dt, hi_dt = 0.0, dt
            for _ in range(60):
                mid = 0.5 * (lo_dt + hi_dt)
                if mid == lo_dt or mid == hi_dt:
                    break
                u_mid, _ = stepper.step(u, mid, t)
                if direction * (stat(u_mid) - level) >= 0:
                    hi_dt = mid
                else:
                    lo_dt = mid
            u_hit, parts_hit = stepper.step(u, hi_dt, t)
            if with_auxiliary:
                for sub_dt, fl in parts_hit:
                    _auxiliary_increment(v, fl, sub_dt)
            t += hi_dt
            snaps.append(u_hit)
            times.append(t)
            if with_auxiliary:
                vsnaps.append(v.copy())
            grid = Grid(L, nx, np.array(times))
            return Trajectory(grid, np.asarray(snaps), flux, snaps[0],
                              v=None if vsnaps is None else np.asarray(vsnaps),
                              newton_iterations=stepper.iterations,
                              steps_taken=len(times))
        u = u_new
        if with_auxiliary:
            for sub_dt, fl in parts_new:
                _auxiliary_increment(v, fl, sub_dt)
        t += dt
        if t - last_snap >= snap_dt - 1e-14:
            snaps.append(u.copy())
            times.append(t)
            if with_auxiliary:
                vsnaps.append(v.copy())
            last_snap = t
    raise NotReachedError(
        f"{statistic} never reached {level:g} by the budget t={t_max:g}",
        closest_value=float(stat(u)), closest_time=t)
