"""Diffusion flux models, inverse branches, potentials, monotone modified fluxes.

A flux model wraps the scalar function sigma(s) together with its landmark
points (local extrema, zeros, matching points) for one of four shape
families:

* ``hollig``             N-shaped with a positive hump between two rising arms,
* ``perona_malik``       unimodal rising core with decaying tails,
* ``non_fourier``        cubic-like, three zeros, double-well potential,
* ``strictly_parabolic`` globally increasing.

All values are immutable after construction; instances can be shared freely
across concurrent tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import PchipInterpolator
from scipy.optimize import brentq

from .errors import ConstructionError, DomainError, FluxHypothesisError

ROOT_TOL = 1e-10          # |sigma(s) - r| acceptance for branch roots
BISECT_XTOL = 1e-13       # s-tolerance passed to the root bracketing
DEFAULT_WINDOW = (-50.0, 50.0)

FAMILIES = ("hollig", "perona_malik", "non_fourier", "strictly_parabolic")


@dataclass(frozen=True)
class FluxModel:
    """A diffusion flux sigma with optional derivative and antiderivative."""

    eval: Callable[[np.ndarray], np.ndarray]
    deriv: Optional[Callable[[np.ndarray], np.ndarray]]
    family: str
    landmarks: dict
    domain_bounds: tuple = DEFAULT_WINDOW
    name: str = "custom"
    anti: Optional[Callable[[np.ndarray], np.ndarray]] = None  # antiderivative, unnormalized

    def __call__(self, s):
        return self.eval(np.asarray(s, dtype=float))

    def d(self, s):
        """sigma'(s), by formula when available, else central differences."""
        s = np.asarray(s, dtype=float)
        if self.deriv is not None:
            return self.deriv(s)
        h = 1e-6 * max(1.0, float(np.max(np.abs(s))) if s.size else 1.0)
        return (self.eval(s + h) - self.eval(s - h)) / (2.0 * h)


# ---------------------------------------------------------------------------
# Built-in models
# ---------------------------------------------------------------------------

def pm_rational(window=DEFAULT_WINDOW) -> FluxModel:
    """sigma(s) = s / (1 + s^2): rising on (-1, 1), decaying tails."""
    def f(s):
        return s / (1.0 + s * s)

    def df(s):
        return (1.0 - s * s) / (1.0 + s * s) ** 2

    def F(s):
        return 0.5 * np.log1p(s * s)

    lm = {"s1": -1.0, "s2": 1.0, "sigma_s1": -0.5, "sigma_s2": 0.5}
    return FluxModel(f, df, "perona_malik", lm, window, "pm_rational", F)


def pm_exponential(window=DEFAULT_WINDOW) -> FluxModel:
    """sigma(s) = s * exp(-s^2/2): the Gaussian-tail variant."""
    def f(s):
        return s * np.exp(-0.5 * s * s)

    def df(s):
        return (1.0 - s * s) * np.exp(-0.5 * s * s)

    def F(s):
        return 1.0 - np.exp(-0.5 * s * s)

    lm = {"s1": -1.0, "s2": 1.0,
          "sigma_s1": -np.exp(-0.5), "sigma_s2": np.exp(-0.5)}
    return FluxModel(f, df, "perona_malik", lm, window, "pm_exponential", F)


def hollig_piecewise(window=DEFAULT_WINDOW) -> FluxModel:
    """Piecewise-linear N-shaped fixture: s, then 1.5 - s/2, then s - 1.5.

    Landmarks: rises to (1, 1), falls to (2, 0.5), rises again; the matching
    points with equal flux values are 0.5 and 2.5.
    """
    def f(s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= 1.0, s,
                        np.where(s <= 2.0, 1.5 - 0.5 * s, s - 1.5))

    def df(s):
        s = np.asarray(s, dtype=float)
        return np.where(s <= 1.0, 1.0, np.where(s <= 2.0, -0.5, 1.0))

    def F(s):
        s = np.asarray(s, dtype=float)
        mid = 0.5 + 1.5 * (s - 1.0) - 0.25 * (s * s - 1.0)
        hi = 1.25 + 0.5 * (s * s - 4.0) - 1.5 * (s - 2.0)
        return np.where(s <= 1.0, 0.5 * s * s, np.where(s <= 2.0, mid, hi))

    lm = {"s1": 1.0, "s2": 2.0, "s1_bar": 0.5, "s2_bar": 2.5,
          "sigma_s1": 1.0, "sigma_s2": 0.5}
    return FluxModel(f, df, "hollig", lm, window, "hollig_piecewise", F)


def cubic_double_well(window=DEFAULT_WINDOW) -> FluxModel:
    """sigma(s) = s^3 - s: three zeros at -1, 0, 1; double-well potential."""
    def f(s):
        return s ** 3 - s

    def df(s):
        return 3.0 * s * s - 1.0

    def F(s):
        return 0.25 * s ** 4 - 0.5 * s * s

    a = 1.0 / np.sqrt(3.0)
    lm = {"s1": -a, "s2": a, "s1_bar": -2.0 * a, "s2_bar": 2.0 * a,
          "s0_minus": -1.0, "s0_plus": 1.0,
          "sigma_s1": f(-a), "sigma_s2": f(a)}
    return FluxModel(f, df, "non_fourier", lm, window, "cubic_double_well", F)


def linear_flux(slope=1.0, window=DEFAULT_WINDOW) -> FluxModel:
    """sigma(s) = slope * s, the strictly parabolic reference."""
    if slope <= 0:
        raise DomainError("linear flux needs a positive slope")

    def f(s):
        return slope * np.asarray(s, dtype=float)

    def df(s):
        return np.full_like(np.asarray(s, dtype=float), slope)

    def F(s):
        return 0.5 * slope * np.asarray(s, dtype=float) ** 2

    return FluxModel(f, df, "strictly_parabolic", {}, window, "linear", F)


def from_knots(s_knots, sigma_knots, family, window=None, name="knots") -> FluxModel:
    """Flux tabulated through knots, interpolated shape-preservingly.

    Outside the knot range the flux continues linearly with the end slopes.
    Landmarks are rediscovered by :func:`classify_flux`.
    """
    s_knots = np.asarray(s_knots, dtype=float)
    sigma_knots = np.asarray(sigma_knots, dtype=float)
    if s_knots.ndim != 1 or s_knots.size < 4:
        raise DomainError("need at least 4 knots")
    if np.any(np.diff(s_knots) <= 0):
        raise DomainError("knot abscissae must be strictly increasing")
    interp = PchipInterpolator(s_knots, sigma_knots, extrapolate=False)
    dinterp = interp.derivative()
    lo, hi = s_knots[0], s_knots[-1]
    slo, shi = float(dinterp(lo)), float(dinterp(hi))
    vlo, vhi = float(interp(lo)), float(interp(hi))

    def f(s):
        s = np.asarray(s, dtype=float)
        out = interp(np.clip(s, lo, hi))
        out = np.where(s < lo, vlo + slo * (s - lo), out)
        out = np.where(s > hi, vhi + shi * (s - hi), out)
        return out

    def df(s):
        s = np.asarray(s, dtype=float)
        out = dinterp(np.clip(s, lo, hi))
        out = np.where(s < lo, slo, out)
        out = np.where(s > hi, shi, out)
        return out

    window = window or (float(lo), float(hi))
    model = FluxModel(f, df, family, {}, window, name)
    report = classify_flux(model)
    return FluxModel(f, df, report.family, report.landmarks, window, name)


BUILTIN_MODELS = {
    "pm_rational": pm_rational,
    "pm_exponential": pm_exponential,
    "hollig_piecewise": hollig_piecewise,
    "cubic_double_well": cubic_double_well,
    "linear": linear_flux,
}


def from_config(spec: dict) -> FluxModel:
    """Build a flux from a structured config record.

    ``{"form": "pm_rational"}`` selects a closed form;
    ``{"form": "knots", "family": ..., "s": [...], "sigma": [...]}`` tabulates.
    """
    form = spec.get("form")
    if form == "knots":
        return from_knots(spec["s"], spec["sigma"], spec.get("family", ""),
                          name=spec.get("name", "knots"))
    if form in BUILTIN_MODELS:
        kwargs = {}
        if "slope" in spec and form == "linear":
            kwargs["slope"] = float(spec["slope"])
        if "window" in spec:
            kwargs["window"] = tuple(spec["window"])
        return BUILTIN_MODELS[form](**kwargs)
    raise DomainError(f"unknown flux form {form!r}")


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassificationReport:
    family: str
    landmarks: dict
    checks: dict  # clause name -> bool (all True when no error raised)


def _critical_points(model, lo, hi, n=20001):
    """Sign changes of sigma' located by bisection on the sampled derivative."""
    s = np.linspace(lo, hi, n)
    d = model.d(s)
    crits = []
    sign = np.sign(d)
    for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        root = brentq(lambda x: float(model.d(x)), s[i], s[i + 1],
                      xtol=BISECT_XTOL)
        crits.append(root)
    # derivative zeros landing exactly on sample points
    for i in np.nonzero(sign == 0)[0]:
        before = sign[:i][sign[:i] != 0]
        after = sign[i + 1:][sign[i + 1:] != 0]
        if before.size and after.size and before[-1] * after[0] < 0:
            crits.append(float(s[i]))
    crits = sorted(set(np.round(crits, 10)))
    return crits, s, d


def _zeros(model, lo, hi, n=20001):
    s = np.linspace(lo, hi, n)
    v = model(s)
    sign = np.sign(v)
    roots = []
    for i in np.nonzero(sign[:-1] * sign[1:] < 0)[0]:
        roots.append(brentq(lambda x: float(model(x)), s[i], s[i + 1],
                            xtol=BISECT_XTOL))
    for i in np.nonzero(v == 0.0)[0]:
        roots.append(float(s[i]))
    roots = sorted(set(np.round(roots, 12)))
    return roots


def classify_flux(model: FluxModel) -> ClassificationReport:
    """Verify the shape hypotheses of a flux and return its landmark points.

    Raises :class:`FluxHypothesisError` naming the violated clause when the
    model fits no family. Landmark candidates from ``model.landmarks`` are
    used as hints but always re-verified.
    """
    lo, hi = model.domain_bounds
    crits, s_sample, d_sample = _critical_points(model, lo, hi)
    checks = {}

    if len(crits) == 0:
        if np.all(d_sample > 0):
            checks["increasing"] = True
            return ClassificationReport("strictly_parabolic", {}, checks)
        raise FluxHypothesisError(
            "monotone", "no critical points but sigma' is not positive")

    if len(crits) != 2:
        raise FluxHypothesisError(
            "critical-points",
            f"expected exactly 2 local extrema in the window, found {len(crits)}")

    c1, c2 = crits
    zeros = _zeros(model, lo, hi)
    v1, v2 = float(model(c1)), float(model(c2))

    if v1 > 0 and v2 < 0:
        # cubic-like: rising, hump above zero, dip below zero, rising
        return _classify_non_fourier(model, c1, c2, zeros, checks)
    if c1 > 0 and c2 > 0:
        return _classify_hollig(model, c1, c2, zeros, checks)
    if c1 < 0 < c2:
        return _classify_pm(model, c1, c2, zeros, checks)
    raise FluxHypothesisError(
        "family", f"extrema at {c1:.6g}, {c2:.6g} match no supported family")


def _classify_hollig(model, s1, s2, zeros, checks):
    lo, hi = model.domain_bounds
    if not (0 < s1 < s2):
        raise FluxHypothesisError("hollig-(b)", "extrema must satisfy 0 < s1 < s2")
    v1, v2, v0 = float(model(s1)), float(model(s2)), float(model(0.0))
    if not (abs(v0) < 1e-9):
        raise FluxHypothesisError("hollig-(c)", f"sigma(0) = {v0:.3g} != 0")
    if not (v1 > v2 > 0):
        raise FluxHypothesisError(
            "hollig-(c)", f"need sigma(s1) > sigma(s2) > 0, got {v1:.3g}, {v2:.3g}")
    mid = np.linspace(s1, s2, 501)[1:-1]
    if not np.all(model(mid) > 0):
        raise FluxHypothesisError("hollig-(b)", "sigma must stay positive between the extrema")
    out = np.concatenate([np.linspace(lo, s1, 2001)[:-1], np.linspace(s2, hi, 2001)[1:]])
    if not np.all(model.d(out) > 0):
        raise FluxHypothesisError("hollig-(b)", "sigma' must be positive outside [s1, s2]")
    s2_bar = brentq(lambda x: float(model(x)) - v1, s2, hi, xtol=BISECT_XTOL)
    s1_bar = brentq(lambda x: float(model(x)) - v2, 0.0, s1, xtol=BISECT_XTOL)
    checks["hollig-(a,b,c)"] = True
    lm = {"s1": s1, "s2": s2, "s1_bar": s1_bar, "s2_bar": s2_bar,
          "sigma_s1": v1, "sigma_s2": v2}
    return ClassificationReport("hollig", lm, checks)


def _classify_pm(model, s1, s2, zeros, checks):
    lo, hi = model.domain_bounds
    if len(zeros) != 1 or abs(zeros[0]) > 1e-9:
        raise FluxHypothesisError("pm-(b)", f"expected the single zero at 0, got {zeros}")
    core = np.linspace(s1, s2, 2001)[1:-1]
    if not np.all(model.d(core) > 0):
        raise FluxHypothesisError("pm-(b)", "sigma' must be positive in (s1, s2)")
    left = np.linspace(lo, s1, 2001)[:-1]
    right = np.linspace(s2, hi, 2001)[1:]
    if not (np.all(model.d(left) < 0) and np.all(model.d(right) < 0)):
        raise FluxHypothesisError("pm-(c)", "sigma must be strictly decreasing outside (s1, s2)")
    # decaying tails: |sigma| decreasing on the sampled tails toward the window ends
    tail_r = model(np.linspace(0.75 * hi, hi, 101))
    tail_l = model(np.linspace(lo, 0.75 * lo, 101))
    if not (np.all(np.diff(np.abs(tail_r)) < 0) and np.all(np.diff(np.abs(tail_l)) > 0)):
        raise FluxHypothesisError("pm-(d)", "|sigma| must decay along both tails")
    checks["pm-(a,b,c,d)"] = True
    lm = {"s1": s1, "s2": s2,
          "sigma_s1": float(model(s1)), "sigma_s2": float(model(s2))}
    return ClassificationReport("perona_malik", lm, checks)


def _classify_non_fourier(model, s1, s2, zeros, checks):
    lo, hi = model.domain_bounds
    if not (s1 < 0 < s2):
        raise FluxHypothesisError("nf-(b)", "need the hump left of 0 and the dip right of 0")
    if len(zeros) != 3:
        raise FluxHypothesisError(
            "nf-(d)", f"sigma must have exactly three zeros, found {len(zeros)}: {zeros}")
    z_minus, z_mid, z_plus = zeros
    if abs(z_mid) > 1e-9:
        raise FluxHypothesisError("nf-(c)", f"middle zero must sit at 0, got {z_mid:.3g}")
    v1, v2 = float(model(s1)), float(model(s2))
    if not (v2 < 0 < v1):
        raise FluxHypothesisError("nf-(c)", "need sigma(s2) < 0 < sigma(s1)")
    out = np.concatenate([np.linspace(lo, s1, 2001)[:-1], np.linspace(s2, hi, 2001)[1:]])
    if not np.all(model.d(out) > 0):
        raise FluxHypothesisError("nf-(b)", "sigma' must be positive outside [s1, s2]")
    s2_bar = brentq(lambda x: float(model(x)) - v1, s2, hi, xtol=BISECT_XTOL)
    s1_bar = brentq(lambda x: float(model(x)) - v2, lo, s1, xtol=BISECT_XTOL)
    # sign pattern of s*sigma(s) away from the zeros
    probe = np.array([z_minus - 0.5 * (z_minus - lo), 0.5 * z_minus,
                      0.5 * z_plus, z_plus + 0.5 * (hi - z_plus)])
    pattern = probe * model(probe)
    if not (pattern[0] > 0 and pattern[1] < 0 and pattern[2] < 0 and pattern[3] > 0):
        raise FluxHypothesisError("nf-sign", "s*sigma(s) has the wrong sign pattern")
    checks["nf-(a,b,c,d)"] = True
    lm = {"s1": s1, "s2": s2, "s1_bar": s1_bar, "s2_bar": s2_bar,
          "s0_minus": z_minus, "s0_plus": z_plus,
          "sigma_s1": v1, "sigma_s2": v2}
    return ClassificationReport("non_fourier", lm, checks)


# ---------------------------------------------------------------------------
# Branch inversion
# ---------------------------------------------------------------------------

def _expand_bracket(model, r, start, step, decreasing):
    """March outward until sigma crosses r on a tail segment."""
    a = start
    for _ in range(200):
        b = a + step
        va, vb = float(model(a)) - r, float(model(b)) - r
        if va * vb <= 0:
            return a, b
        a = b
        step *= 1.6
    raise DomainError(f"could not bracket a root for r={r:g}")


def _branch_bracket(model, r, branch):
    """The monotone segment on which the requested preimage of r lives."""
    fam = model.family
    lm = model.landmarks
    if fam == "strictly_parabolic":
        lo, hi = model.domain_bounds
        a, b = _expand_bracket(model, r, lo, hi - lo, False)
        return a, b
    if fam in ("hollig", "non_fourier"):
        v1, v2 = lm["sigma_s1"], lm["sigma_s2"]
        if not (v2 < r < v1):
            raise DomainError(
                f"r={r:g} outside the two-branch range ({v2:g}, {v1:g})")
        if branch == "minus":
            return lm["s1_bar"], lm["s1"]
        return lm["s2"], lm["s2_bar"]
    if fam == "perona_malik":
        v1, v2 = lm["sigma_s1"], lm["sigma_s2"]
        if 0 < r < v2:
            if branch == "minus":
                return 0.0, lm["s2"]
            return _expand_bracket(model, r, lm["s2"], max(1.0, lm["s2"]), True)
        if v1 < r < 0:
            if branch == "plus":
                return lm["s1"], 0.0
            return _expand_bracket_left(model, r, lm["s1"])
        raise DomainError(
            f"r={r:g} outside the branch range ({v1:g}, 0) U (0, {v2:g})")
    raise DomainError(f"unknown family {fam!r}")


def _expand_bracket_left(model, r, start):
    a = start
    step = max(1.0, abs(start))
    for _ in range(200):
        b = a - step
        if (float(model(a)) - r) * (float(model(b)) - r) <= 0:
            return b, a
        a = b
        step *= 1.6
    raise DomainError(f"could not bracket a root for r={r:g}")


def branch_point(model: FluxModel, r: float, branch: str) -> float:
    """The unique preimage of flux value r on the requested monotone branch.

    ``branch`` is ``"plus"`` (right/outer segment) or ``"minus"``.
    """
    if branch not in ("plus", "minus"):
        raise DomainError(f"branch must be 'plus' or 'minus', got {branch!r}")
    a, b = _branch_bracket(model, float(r), branch)
    fa, fb = float(model(a)) - r, float(model(b)) - r
    if fa == 0.0:
        return float(a)
    if fb == 0.0:
        return float(b)
    if fa * fb > 0:
        raise FluxHypothesisError(
            "branch-segment", f"segment [{a:g},{b:g}] does not bracket r={r:g}")
    root = brentq(lambda x: float(model(x)) - r, a, b, xtol=BISECT_XTOL, rtol=8.9e-16)
    if abs(float(model(root)) - r) > ROOT_TOL:
        raise FluxHypothesisError(
            "branch-root", f"root residual {abs(float(model(root)) - r):.2e} too large")
    return float(root)


# ---------------------------------------------------------------------------
# Branch pairs
# ---------------------------------------------------------------------------

PAIRINGS = ("hollig", "pm_positive", "pm_negative", "non_fourier")


@dataclass(frozen=True)
class BranchPair:
    """Inverse branches g-/g+ of sigma tabulated over a flux interval.

    ``separation``/``spread`` are the min/max of g+ - g- over the tabulation
    grid; both are positive for a legal pair.
    """

    r_lo: float
    r_hi: float
    pairing: str
    r_grid: np.ndarray
    g_plus_tab: np.ndarray
    g_minus_tab: np.ndarray
    _gp: PchipInterpolator = field(repr=False, compare=False, default=None)
    _gm: PchipInterpolator = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        obj = object.__setattr__
        obj(self, "_gp", PchipInterpolator(self.r_grid, self.g_plus_tab))
        obj(self, "_gm", PchipInterpolator(self.r_grid, self.g_minus_tab))

    @property
    def separation(self):
        return float(np.min(self.g_plus_tab - self.g_minus_tab))

    @property
    def spread(self):
        return float(np.max(self.g_plus_tab - self.g_minus_tab))

    def g_plus(self, r):
        return self._gp(np.clip(r, self.r_lo, self.r_hi))

    def g_minus(self, r):
        return self._gm(np.clip(r, self.r_lo, self.r_hi))

    def band_diameter(self):
        """Diameter of the open band between the branch graphs."""
        w = float(np.max(self.g_plus_tab) - np.min(self.g_minus_tab))
        return float(np.hypot(w, self.r_hi - self.r_lo))

    def lipschitz(self):
        """Max slope magnitude of either branch over the tabulation grid."""
        dr = np.diff(self.r_grid)
        lp = np.max(np.abs(np.diff(self.g_plus_tab) / dr))
        lm = np.max(np.abs(np.diff(self.g_minus_tab) / dr))
        return float(max(lp, lm))


def _pairing_branches(pairing):
    # which preimage plays g+ / g- for each theorem's pairing
    if pairing in ("hollig", "non_fourier", "pm_positive"):
        return "plus", "minus"
    if pairing == "pm_negative":
        # negative flux values: the inner preimage is the larger one
        return "plus", "minus"
    raise DomainError(f"unknown pairing {pairing!r}")


def build_branch_pair(model: FluxModel, r1: float, r2: float,
                      pairing: str, n: int = 1001) -> BranchPair:
    """Tabulate the inverse branches of sigma over [r1, r2].

    ``pairing`` selects which monotone segments are inverted, matching the
    construction the caller is running (N-shaped hump, positive or negative
    unimodal pair, or the cubic outer arms).
    """
    if not (r1 < r2):
        raise DomainError(f"need r1 < r2, got [{r1:g}, {r2:g}]")
    if pairing not in PAIRINGS:
        raise DomainError(f"pairing must be one of {PAIRINGS}")
    plus_name, minus_name = _pairing_branches(pairing)
    rs = np.linspace(r1, r2, n)
    gp = np.array([branch_point(model, r, plus_name) for r in rs])
    gm = np.array([branch_point(model, r, minus_name) for r in rs])
    pair = BranchPair(float(r1), float(r2), pairing, rs, gp, gm)
    if pair.separation <= 0:
        raise FluxHypothesisError(
            "branch-order", "g- must lie strictly below g+ on the interval")
    return pair


# ---------------------------------------------------------------------------
# Potential
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Potential:
    """Antiderivative of sigma normalized to absolute minimum 0."""

    eval: Callable[[np.ndarray], np.ndarray]
    normalization_offset: float
    model_name: str = ""

    def __call__(self, s):
        return self.eval(np.asarray(s, dtype=float))


def potential(model: FluxModel, n: int = 50001) -> Potential:
    """The potential W with W' = sigma and min W = 0 over the window."""
    lo, hi = model.domain_bounds
    if model.anti is not None:
        grid = np.linspace(lo, hi, 20001)
        offset = float(np.min(model.anti(grid)))
        anti = model.anti
        return Potential(lambda s: anti(np.asarray(s, dtype=float)) - offset,
                         offset, model.name)
    s = np.linspace(lo, hi, n)
    vals = model(s)
    raw = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(s))])
    offset = float(np.min(raw))
    interp = PchipInterpolator(s, raw - offset)

    def ev(x):
        x = np.asarray(x, dtype=float)
        return interp(np.clip(x, lo, hi))

    return Potential(ev, offset, model.name)


def energy(u_snapshot, dx: float, W: Potential) -> float:
    """Dirichlet-type energy of one spatial snapshot: integral of W(u_x).

    Slopes are taken per cell so a linear profile is integrated exactly.
    """
    u = np.asarray(u_snapshot, dtype=float)
    slopes = np.diff(u) / dx
    return float(dx * np.sum(W(slopes)))


# ---------------------------------------------------------------------------
# Modified monotone fluxes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModifiedFlux:
    """A strictly increasing flux agreeing with the base model on pinned
    intervals and obeying strict inequality bands elsewhere.

    Evaluation is exact (delegates to the base flux) on pinned intervals and
    uses monotone interpolation across transition bands; beyond the outermost
    knots it continues linearly.
    """

    base: FluxModel
    scheme: str
    params: dict
    pinned_regions: tuple          # ((lo, hi), ...) closed intervals, may use inf
    strict_bounds: tuple           # ((lo, hi, kind), ...) kind like "below_min(sigma,r)"
    _segments: tuple = field(repr=False, default=())   # ((lo, hi, kind, payload), ...)
    name: str = "modified"

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        out.fill(np.nan)
        for lo, hi, kind, payload in self._segments:
            mask = (s >= lo) & (s <= hi)
            if not np.any(mask):
                continue
            if kind == "pinned":
                out[mask] = self.base(s[mask])
            elif kind == "interp":
                out[mask] = payload(s[mask])
            else:  # linear tail: payload = (anchor_s, anchor_v, slope)
                a, v, sl = payload
                out[mask] = v + sl * (s[mask] - a)
        return out

    def deriv(self, s):
        s = np.asarray(s, dtype=float)
        out = np.empty_like(s)
        out.fill(np.nan)
        for lo, hi, kind, payload in self._segments:
            mask = (s >= lo) & (s <= hi)
            if not np.any(mask):
                continue
            if kind == "pinned":
                out[mask] = self.base.d(s[mask])
            elif kind == "interp":
                out[mask] = payload.derivative()(s[mask])
            else:
                out[mask] = payload[2]
        return out

    def second_diff(self, s, h=1e-4):
        """|second difference| estimate of the curvature, step h."""
        s = np.asarray(s, dtype=float)
        return np.abs(self(s + h) - 2.0 * self(s) + self(s - h)) / h ** 2


def _running_forward_min(v):
    return np.minimum.accumulate(v[::-1])[::-1]


def _below_transition(model, a, b, cap, margin, n=241):
    """Knots for a strictly increasing arc pinned at (a, sigma(a)) staying
    strictly below min(sigma, cap) on (a, b]."""
    s = np.linspace(a, b, n)
    r_a = float(model(a))
    env = model(s)
    if cap is not None:
        env = np.minimum(env, cap)
    tight = _running_forward_min(env)
    if tight[-1] <= r_a:
        raise ConstructionError(
            "no room below the envelope for an increasing arc", (float(a), float(b)))
    # top factor < 1/2 so a lower arc always stays under a mirrored upper arc
    h = np.linspace(0.35, 0.60, n)
    v = r_a + (tight - r_a) * (1.0 - margin) * h
    # keep the arc strictly increasing even across flat envelope stretches
    floor = r_a + 1e-3 * (1.0 - margin) * (tight[-1] - r_a) * (s - a) / (b - a)
    v = np.maximum(v, floor)
    v = np.maximum.accumulate(v)
    eps = 1e-12 * max(1.0, abs(r_a))
    for i in range(1, n):
        if v[i] <= v[i - 1]:
            v[i] = v[i - 1] + eps
    return s[1:], v[1:]


def _above_transition(model, a, b, floor, margin, n=241):
    """Knots for a strictly increasing arc staying strictly above
    max(sigma, floor) on [a, b) and meeting sigma at b."""
    s = np.linspace(a, b, n)
    r_b = float(model(b))
    env = model(s)
    if floor is not None:
        env = np.maximum(env, floor)
    tight = np.maximum.accumulate(env)
    if tight[0] >= r_b:
        raise ConstructionError(
            "no room above the envelope for an increasing arc", (float(a), float(b)))
    h = np.linspace(0.60, 0.35, n)
    v = r_b - (r_b - tight) * (1.0 - margin) * h
    v = np.minimum.accumulate(v[::-1])[::-1]
    eps = 1e-12 * max(1.0, abs(r_b))
    for i in range(1, n):
        if v[i] <= v[i - 1]:
            v[i] = v[i - 1] + eps
    return s[:-1], v[:-1]


class _KnotAssembler:
    """Collects (s, value) knots segment by segment, then emits segments."""

    def __init__(self, base):
        self.base = base
        self.segments = []

    def pinned(self, lo, hi):
        self.segments.append((lo, hi, "pinned", None))

    def arc(self, s_knots, v_knots, lo, hi):
        if len(s_knots) < 2:
            raise ConstructionError("transition arc needs at least two knots",
                                    (lo, hi))
        interp = PchipInterpolator(np.asarray(s_knots), np.asarray(v_knots))
        self.segments.append((lo, hi, "interp", interp))

    def tail_left(self, anchor_s, anchor_v, slope, lo=-np.inf):
        self.segments.append((lo, anchor_s, "tail", (anchor_s, anchor_v, slope)))

    def tail_right(self, anchor_s, anchor_v, slope, hi=np.inf):
        self.segments.append((anchor_s, hi, "tail", (anchor_s, anchor_v, slope)))


def _verify_modified(mf: ModifiedFlux, n=10000):
    """Dense sampling check: positive slopes, pinned equality, strict bounds."""
    finite = [(lo, hi) for lo, hi, _, _ in mf._segments
              if np.isfinite(lo) and np.isfinite(hi)]
    lo = min(x for x, _ in finite)
    hi = max(y for _, y in finite)
    pad = 0.05 * (hi - lo)
    s = np.linspace(lo - pad, hi + pad, n)
    vals = mf(s)
    if np.any(~np.isfinite(vals)):
        raise ConstructionError("modified flux left undefined gaps")
    slopes = np.diff(vals) / np.diff(s)
    if np.any(slopes <= 0):
        i = int(np.argmin(slopes))
        raise ConstructionError(
            f"modified flux not strictly increasing near s={s[i]:.6g}",
            (float(s[i]), float(s[i + 1])))
    for plo, phi in mf.pinned_regions:
        a = max(plo, lo - pad)
        b = min(phi, hi + pad)
        if a >= b:
            continue
        ss = np.linspace(a, b, 200)
        if np.max(np.abs(mf(ss) - mf.base(ss))) > 1e-12 * max(1.0, np.max(np.abs(mf.base(ss)))):
            raise ConstructionError(f"pinned region [{a:g},{b:g}] not exact")
    for blo, bhi, kind in mf.strict_bounds:
        ss = np.linspace(blo, bhi, 400)[1:-1]
        v = mf(ss)
        sig = mf.base(ss)
        parts = kind.split(":")
        if parts[0] == "below":
            bound = sig if len(parts) == 1 else np.minimum(sig, mf.params[parts[1]])
            if not np.all(v < bound):
                raise ConstructionError(f"bound {kind} violated on ({blo:g},{bhi:g}]",
                                        (blo, bhi))
        else:
            bound = sig if len(parts) == 1 else np.maximum(sig, mf.params[parts[1]])
            if not np.all(v > bound):
                raise ConstructionError(f"bound {kind} violated on [{blo:g},{bhi:g})",
                                        (blo, bhi))


def modify_flux(model: FluxModel, scheme: str, params: dict,
                margin: float = 0.3) -> ModifiedFlux:
    """Build a strictly increasing flux pinned to sigma outside a controlled
    transition region.

    Schemes
    -------
    ``hollig``        pinned outside [s-(r1), s+(r2)]; below sigma on the lower
                      arm, above sigma on the upper arm. params: r1, r2.
    ``pm_two_sided``  pinned on the middle branch segment; below min(sigma, r2')
                      above, above max(sigma, r1') below. params: r1, r1p, r2,
                      r2p, lo, hi. (Covers both the smoothing construction and
                      each rung of the two-sided hierarchy.)
    ``pm_blowup``     pinned on [pin_lo, s-(r_j)]; below min(sigma, r_jp) on the
                      shrinking arm. params: r_j, r_jp, hi (previous arm end),
                      optional pin_lo.
    ``non_fourier``   pinned outside [s-(-r0), s+(r0)]; below sigma left of the
                      negative zero, above sigma right of the positive zero,
                      passing through (0, 0). params: r0.

    ``margin`` is the relative safety factor keeping the strict inequalities
    away from equality; every construction is re-verified by dense sampling.
    """
    if scheme == "hollig":
        mf = _modify_hollig(model, params, margin)
    elif scheme == "pm_two_sided":
        mf = _modify_pm_two_sided(model, params, margin)
    elif scheme == "pm_blowup":
        mf = _modify_pm_blowup(model, params, margin)
    elif scheme == "non_fourier":
        mf = _modify_non_fourier(model, params, margin)
    else:
        raise DomainError(f"unknown modification scheme {scheme!r}")
    _verify_modified(mf)
    return mf


def _modify_hollig(model, params, margin):
    r1, r2 = float(params["r1"]), float(params["r2"])
    if not r1 < r2:
        raise DomainError("need r1 < r2")
    sm1 = branch_point(model, r1, "minus")
    sm2 = branch_point(model, r2, "minus")
    sp1 = branch_point(model, r1, "plus")
    sp2 = branch_point(model, r2, "plus")
    asm = _KnotAssembler(model)
    asm.pinned(-np.inf, sm1)
    s_lo, v_lo = _below_transition(model, sm1, sm2, None, margin)
    s_hi, v_hi = _above_transition(model, sp1, sp2, None, margin)
    # monotone bridge across the unconstrained middle
    bridge_s = np.linspace(sm2, sp1, 41)
    bridge_v = v_lo[-1] + (v_hi[0] - v_lo[-1]) * (bridge_s - sm2) / (sp1 - sm2)
    ss = np.concatenate([[sm1], s_lo, bridge_s[1:-1], s_hi, [sp2]])
    vv = np.concatenate([[r1], v_lo, bridge_v[1:-1], v_hi, [r2]])
    asm.arc(ss, vv, sm1, sp2)
    asm.pinned(sp2, np.inf)
    return ModifiedFlux(model, "hollig", dict(params, r1=r1, r2=r2),
                        ((-np.inf, sm1), (sp2, np.inf)),
                        ((sm1, sm2, "below"), (sp1, sp2, "above")),
                        tuple(asm.segments), f"{model.name}~hollig")


def _modify_pm_two_sided(model, params, margin):
    r1, r1p = float(params["r1"]), float(params["r1p"])
    r2, r2p = float(params["r2"]), float(params["r2p"])
    lo, hi = float(params["lo"]), float(params["hi"])
    if not (r1p < r1 < 0 < r2 < r2p):
        raise DomainError("need r1' < r1 < 0 < r2 < r2'")
    sp1 = branch_point(model, r1, "plus")    # inner negative
    sm2 = branch_point(model, r2, "minus")   # inner positive
    if not (lo < sp1 and sm2 < hi):
        raise DomainError("window [lo, hi] must contain the pinned middle")
    asm = _KnotAssembler(model)
    p = dict(params)
    p["cap_r2p"] = r2p
    p["floor_r1p"] = r1p
    s_lo, v_lo = _above_transition(model, lo, sp1, r1p, margin)
    s_hi, v_hi = _below_transition(model, sm2, hi, r2p, margin)
    lo_slope = max((v_lo[1] - v_lo[0]) / (s_lo[1] - s_lo[0]), 1e-6)
    hi_slope = max((v_hi[-1] - v_hi[-2]) / (s_hi[-1] - s_hi[-2]), 1e-6)
    asm.tail_left(lo, float(v_lo[0]), lo_slope)
    asm.arc(np.concatenate([s_lo, [sp1]]), np.concatenate([v_lo, [r1]]), lo, sp1)
    asm.pinned(sp1, sm2)
    asm.arc(np.concatenate([[sm2], s_hi]), np.concatenate([[r2], v_hi]), sm2, hi)
    asm.tail_right(hi, float(v_hi[-1]), hi_slope)
    return ModifiedFlux(model, "pm_two_sided", p,
                        ((sp1, sm2),),
                        ((lo, sp1, "above:floor_r1p"),
                         (sm2, hi, "below:cap_r2p")),
                        tuple(asm.segments), f"{model.name}~two_sided")


def _modify_pm_blowup(model, params, margin):
    r_j, r_jp = float(params["r_j"]), float(params["r_jp"])
    hi = float(params["hi"])
    if not (0 < r_j < r_jp):
        raise DomainError("need 0 < r_j < r_j'")
    smj = branch_point(model, r_j, "minus")
    if not smj < hi:
        raise DomainError("the transition arm (s-(r_j), hi] is empty")
    s1 = model.landmarks["s1"]
    pin_lo = float(params.get("pin_lo", 0.5 * s1))
    asm = _KnotAssembler(model)
    slope_lo = float(model.d(pin_lo))
    asm.tail_left(pin_lo, float(model(pin_lo)), max(slope_lo, 1e-6))
    asm.pinned(pin_lo, smj)
    s_hi, v_hi = _below_transition(model, smj, hi, r_jp, margin)
    asm.arc(np.concatenate([[smj], s_hi]), np.concatenate([[r_j], v_hi]), smj, hi)
    tail_slope = max((v_hi[-1] - v_hi[-2]) / (s_hi[-1] - s_hi[-2]), 1e-6)
    asm.tail_right(hi, float(v_hi[-1]), tail_slope)
    return ModifiedFlux(model, "pm_blowup", dict(params, cap_r_jp=r_jp),
                        ((pin_lo, smj),),
                        ((smj, hi, "below:cap_r_jp"),),
                        tuple(asm.segments), f"{model.name}~pinch")


def _modify_non_fourier(model, params, margin):
    r0 = float(params["r0"])
    lm = model.landmarks
    if not (0 < r0 < min(lm["sigma_s1"], -lm["sigma_s2"])):
        raise DomainError("need 0 < r0 < min(sigma(s1), -sigma(s2))")
    smr0p = branch_point(model, -r0, "minus")
    spr0 = branch_point(model, r0, "plus")
    z_m, z_p = lm["s0_minus"], lm["s0_plus"]
    asm = _KnotAssembler(model)
    asm.pinned(-np.inf, smr0p)
    s_lo, v_lo = _below_transition(model, smr0p, z_m, None, margin)
    s_hi, v_hi = _above_transition(model, z_p, spr0, None, margin)
    # bridge through the origin: increasing and exactly zero at s = 0
    left_bridge_s = np.linspace(z_m, 0.0, 21)
    left_bridge_v = v_lo[-1] * (1.0 - (left_bridge_s - z_m) / (0.0 - z_m))
    right_bridge_s = np.linspace(0.0, z_p, 21)
    right_bridge_v = v_hi[0] * (right_bridge_s - 0.0) / (z_p - 0.0)
    ss = np.concatenate([[smr0p], s_lo, left_bridge_s[1:],
                         right_bridge_s[1:-1], s_hi, [spr0]])
    vv = np.concatenate([[-r0], v_lo, left_bridge_v[1:],
                         right_bridge_v[1:-1], v_hi, [r0]])
    asm.arc(ss, vv, smr0p, spr0)
    asm.pinned(spr0, np.inf)
    return ModifiedFlux(model, "non_fourier", dict(params),
                        ((-np.inf, smr0p), (spr0, np.inf)),
                        ((smr0p, z_m, "below"), (z_p, spr0, "above")),
                        tuple(asm.segments), f"{model.name}~nf")
