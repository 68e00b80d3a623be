"""Scenario runner and report emitter.

Scenarios are described by a JSON config (versioned schema) and produce a
per-run output directory with trajectory CSVs, staircase reports, a
verification report, a plot-emitting script, and a manifest carrying the
config hash and seed. Identical config and seed give byte-identical output.

One scenario is one process-level job; batch callers fan out their own
processes and give each job its own output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import flux as fluxmod
from . import inclusion, parabolic, staircase, verify
from .errors import ConfigError, FbdiffError

SCHEMA_VERSION = 1

SCHEMES = ("heat", "classical", "hollig_smoothing", "pm_smoothing",
           "pm_blowup", "pm_hierarchy", "nf_allocation")

INITIAL_FORMS = ("cosine", "neg_cosine", "ramp_sin2", "two_sided", "constant")


def canonical_config(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_config(cfg).encode()).hexdigest()[:16]


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: parse error at line {exc.lineno}, column {exc.colno}: "
            f"{exc.msg}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(
            f"field 'schema_version' must be {SCHEMA_VERSION}, got {version!r}")
    scheme = cfg.get("scheme")
    if scheme not in SCHEMES:
        raise ConfigError(f"field 'scheme' must be one of {SCHEMES}, "
                          f"got {scheme!r}")
    fx = cfg.get("flux")
    if not isinstance(fx, dict) or "form" not in fx:
        raise ConfigError("field 'flux' must be an object with a 'form'")
    try:
        fluxmod.from_config(fx)
    except FbdiffError as exc:
        raise ConfigError(f"field 'flux': {exc}") from exc
    init = cfg.get("initial", {})
    if init.get("form", "cosine") not in INITIAL_FORMS:
        raise ConfigError(f"field 'initial.form' must be one of {INITIAL_FORMS}")
    grid = cfg.get("grid", {})
    if not isinstance(grid, dict):
        raise ConfigError("field 'grid' must be an object")
    nx = grid.get("nx", 256)
    if not isinstance(nx, int) or nx < 16:
        raise ConfigError("field 'grid.nx' must be an integer >= 16")


def initial_profile(spec: dict, L: float):
    form = spec.get("form", "cosine")
    amp = float(spec.get("amplitude", 1.0))
    if form == "cosine":
        return lambda x: amp * np.cos(np.pi * x / L)
    if form == "neg_cosine":
        return lambda x: -amp * np.cos(np.pi * x / L)
    if form == "ramp_sin2":
        # slopes amp * sin^2(pi x / L): one-sided, zero wall slopes
        return lambda x: amp * (x / 2.0 - L * np.sin(2 * np.pi * x / L)
                                / (4 * np.pi))
    if form == "two_sided":
        # slopes amp * sin(2 pi x / L) * sin^2(pi x / L): both signs
        def u0(x):
            s = np.pi * x / L
            return amp * L / np.pi * (np.sin(s) ** 4 / 4.0 - 0.0)
        return u0
    if form == "constant":
        return lambda x: np.full_like(x, amp)
    raise ConfigError(f"unknown initial form {form!r}")


def _dt_policy(grid_cfg, dx):
    policy = grid_cfg.get("dt", "dx")
    if policy == "dx":
        return None                 # solver default
    if policy == "dx2":
        return dx * dx
    try:
        return float(policy)
    except (TypeError, ValueError):
        raise ConfigError(f"grid.dt must be 'dx', 'dx2' or a number, "
                          f"got {policy!r}")


def _write(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _field_csv(path, fld, header_lines):
    with open(path, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,x,u,v\n")
        for k, tv in enumerate(fld.t):
            for j, xv in enumerate(fld.x):
                fh.write(f"{tv:.17g},{xv:.17g},{fld.u[k, j]:.17g},"
                         f"{fld.v[k, j]:.17g}\n")


PLOT_SCRIPT = """\
#!/usr/bin/env python3
# Renders the run artifacts written next to this script.
import csv
import os.path as p

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = p.dirname(p.abspath(__file__))


def load(name):
    rows = []
    with open(p.join(here, name)) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
        reader = csv.DictReader(open(p.join(here, name)))
    with open(p.join(here, name)) as fh:
        lines = [l for l in fh if not l.startswith("#")]
    reader = csv.DictReader(lines)
    for row in reader:
        rows.append({k: float(v) if v else float("nan")
                     for k, v in row.items()})
    return rows


if p.exists(p.join(here, "trajectory.csv")):
    rows = load("trajectory.csv")
    times = sorted({r["t"] for r in rows})
    fig, ax = plt.subplots()
    for t in times[:: max(1, len(times) // 8)]:
        xs = [r["x"] for r in rows if r["t"] == t]
        us = [r["u"] for r in rows if r["t"] == t]
        ax.plot(xs, us, label=f"t={t:.3g}")
    ax.set_xlabel("x"); ax.set_ylabel("u"); ax.legend()
    fig.savefig(p.join(here, "trajectory.png"), dpi=120)

if p.exists(p.join(here, "staircase.csv")):
    rows = load("staircase.csv")
    fig, ax = plt.subplots()
    ax.semilogy([r["j"] for r in rows], [r["energy_avg"] for r in rows],
                "o-", label="energy average")
    ax.semilogy([r["j"] for r in rows], [r["blowup_measured"] for r in rows],
                "s-", label="slope sup")
    ax.set_xlabel("step"); ax.legend()
    fig.savefig(p.join(here, "staircase.png"), dpi=120)
print("plots written next to the CSV files")
"""


def run_scenario(cfg: dict, out_dir, seed=None):
    os.makedirs(out_dir, exist_ok=True)
    seed = int(cfg.get("seed", 0)) if seed is None else int(seed)
    chash = config_hash(cfg)
    header = [f"config_hash={chash}", f"seed={seed}"]
    model = fluxmod.from_config(cfg["flux"])
    grid_cfg = cfg.get("grid", {})
    L = float(grid_cfg.get("L", 1.0))
    nx = int(grid_cfg.get("nx", 256))
    dx = L / nx
    dt = _dt_policy(grid_cfg, dx)
    u0 = initial_profile(cfg.get("initial", {}), L)
    scheme = cfg["scheme"]
    params = cfg.get("scheme_params", {})

    written = {}

    def emit(name, text):
        _write(os.path.join(out_dir, name), text)
        written[name] = hashlib.sha256(text.encode()).hexdigest()[:16]

    if scheme in ("heat", "classical"):
        t_end = float(params.get("t_end", 0.5))
        grid = parabolic.make_grid(L, nx, 0.0, t_end,
                                   int(params.get("n_snapshots", 41)))
        traj = parabolic.solve(model, u0, grid, dt=dt)
        path = os.path.join(out_dir, "trajectory.csv")
        traj.export_csv(path, header_lines=header)
        written["trajectory.csv"] = _hash_file(path)
        summary = verify.verify_trajectory(traj, model)
        emit("verification.txt", "\n".join([f"# {h}" for h in header])
             + "\n" + summary.to_text())
        ok = summary.all_passed
    else:
        sc = staircase.StaircaseConfig(
            scheme=scheme,
            J=int(params.get("J", 4)),
            r0=params.get("r0"),
            density_levels=int(params.get("density_levels", 4)),
            epsilon=float(params.get("epsilon", 1.0)),
            nx=nx, dt=dt, L=L, seed=seed,
            snap_rows=int(params.get("snap_rows", 160)),
            t_budget=float(params.get("t_budget", 400.0)),
            r_params=params.get("r_params", {}),
        )
        if scheme == "hollig_smoothing" or scheme == "pm_smoothing":
            rep = staircase.run_smoothing(u0, model, sc)
        elif scheme == "pm_blowup":
            rep = staircase.run_blowup(u0, model, sc)
        elif scheme == "pm_hierarchy":
            rep = staircase.run_hierarchy(u0, model, sc)
        else:
            rep = staircase.run_allocation(u0, model, sc)
        emit("staircase.csv", "\n".join(f"# {h}" for h in header) + "\n"
             + rep.to_csv())
        emit("staircase.txt", "\n".join(f"# {h}" for h in header) + "\n"
             + rep.to_text())
        for i, fld in enumerate(rep.fields):
            path = os.path.join(out_dir, f"composite_{i}.csv")
            _field_csv(path, fld, header)
            written[f"composite_{i}.csv"] = _hash_file(path)
        lines = []
        for s in rep.steps:
            lines.extend(s.density_reports)
        emit("density_steps.jsonl", "\n".join(lines) + "\n" if lines else "")
        ok = True

    emit("plot_artifacts.py", PLOT_SCRIPT)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": chash,
        "seed": seed,
        "config": cfg,
        "files": written,
    }
    emit("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return 0 if ok else 3


def _hash_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# verify subcommand
# ---------------------------------------------------------------------------

def _read_csv_field(path):
    ts, xs, us = [], [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("t,"):
                continue
            parts = line.strip().split(",")
            if len(parts) < 3:
                raise ConfigError(f"{path}: malformed row {line!r}")
            ts.append(float(parts[0]))
            xs.append(float(parts[1]))
            us.append(float(parts[2]))
    t = np.unique(ts)
    x = np.unique(xs)
    if t.size * x.size != len(us):
        raise ConfigError(f"{path}: grid is not tensor-shaped")
    u = np.asarray(us).reshape(t.size, x.size)
    return t, x, u


def verify_run(run_dir):
    """Re-check the integrity and invariants of a stored run."""
    man_path = os.path.join(run_dir, "manifest.json")
    if not os.path.exists(man_path):
        print(f"missing manifest: {man_path}", file=sys.stderr)
        return 2
    manifest = json.load(open(man_path))
    failures = []
    for name, digest in manifest["files"].items():
        path = os.path.join(run_dir, name)
        if not os.path.exists(path):
            failures.append(f"missing file {name}")
            continue
        if name == "manifest.json":
            continue
        if _hash_file(path) != digest:
            failures.append(f"integrity failure for {name}")
    traj_path = os.path.join(run_dir, "trajectory.csv")
    if os.path.exists(traj_path) and not failures:
        t, x, u = _read_csv_field(traj_path)
        model = fluxmod.from_config(manifest["config"]["flux"])
        rep = verify.weak_residual(x, t, u, model)
        drift = abs(np.trapezoid(u[-1], x) - np.trapezoid(u[0], x))
        if drift > 1e-10 * max(1.0, abs(np.trapezoid(u[0], x))):
            failures.append(f"mass drift {drift:.3e}")
        print(f"weak residual max |.| = {rep.max_abs:.3e}")
    for f in failures:
        print(f"FAIL {f}", file=sys.stderr)
    if not failures:
        print("verification passed")
    return 0 if not failures else 1


def compare_runs(dir_a, dir_b, outside_tol=1e-9, inside_min=1e-3):
    """Distinct-solutions witness: two runs of one config with different
    seeds must agree outside the perturbed region and differ inside it."""
    name = "composite_0.csv"
    pa, pb = os.path.join(dir_a, name), os.path.join(dir_b, name)
    if not (os.path.exists(pa) and os.path.exists(pb)):
        print("both runs need a composite field", file=sys.stderr)
        return 2
    ta, xa, ua = _read_csv_field(pa)
    tb, xb, ub = _read_csv_field(pb)
    if ua.shape != ub.shape or not np.allclose(xa, xb) or not np.allclose(ta, tb):
        print("runs sampled on different grids", file=sys.stderr)
        return 2
    man_a = json.load(open(os.path.join(dir_a, "manifest.json")))
    man_b = json.load(open(os.path.join(dir_b, "manifest.json")))
    same_seed = man_a["seed"] == man_b["seed"]
    diff = np.abs(ua - ub)
    moved = diff > outside_tol
    inside_sup = float(diff.max())
    if same_seed:
        ok = inside_sup == 0.0
        print(f"same seed: byte-level agreement {'OK' if ok else 'FAILED'}")
        return 0 if ok else 1
    if not np.any(moved):
        print("FAIL fields identical despite distinct seeds", file=sys.stderr)
        return 1
    if inside_sup < inside_min:
        print(f"FAIL perturbed difference {inside_sup:.2e} < {inside_min:g}",
              file=sys.stderr)
        return 1
    frac = float(np.mean(moved))
    print(f"distinct-solutions witness: sup difference {inside_sup:.3e} on "
          f"{100 * frac:.1f}% of nodes; elsewhere <= {outside_tol:g}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="fbdiff",
        description="forward-backward diffusion laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", required=True)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--nx", type=int, default=None)
    p_run.add_argument("--steps", type=int, default=None,
                       help="override the staircase step count")

    p_ver = sub.add_parser("verify", help="re-check stored runs")
    p_ver.add_argument("paths", nargs="+",
                       help="one run directory, or two to compare seeds")

    p_osc = sub.add_parser("oscillate",
                           help="standalone oscillation-patch demo")
    p_osc.add_argument("--lambda1", type=float, default=1.0)
    p_osc.add_argument("--lambda2", type=float, default=2.0)
    p_osc.add_argument("--epsilon", type=float, default=0.05)
    p_osc.add_argument("--seed", type=int, default=0)
    p_osc.add_argument("--out", default=None)

    p_den = sub.add_parser("density-step",
                           help="standalone oscillation pass demo")
    p_den.add_argument("--delta", type=float, default=0.1)
    p_den.add_argument("--epsilon", type=float, default=0.2)
    p_den.add_argument("--eta", type=float, default=0.05)
    p_den.add_argument("--nx", type=int, default=769)
    p_den.add_argument("--seed", type=int, default=0)

    p_br = sub.add_parser("branch", help="flux and branch queries")
    p_br.add_argument("--flux", default="pm_rational")
    p_br.add_argument("--r", type=float, required=True)

    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except FbdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args):
    if args.command == "run":
        cfg = load_config(args.config)
        if args.nx is not None:
            cfg.setdefault("grid", {})["nx"] = args.nx
        if args.steps is not None:
            cfg.setdefault("scheme_params", {})["J"] = args.steps
        if args.seed is not None:
            cfg["seed"] = args.seed
        return run_scenario(cfg, args.out, seed=args.seed)

    if args.command == "verify":
        if len(args.paths) == 1:
            return verify_run(args.paths[0])
        if len(args.paths) == 2:
            return compare_runs(args.paths[0], args.paths[1])
        print("verify takes one or two run directories", file=sys.stderr)
        return 2

    if args.command == "oscillate":
        rng = np.random.default_rng(args.seed)
        patch = inclusion.generate_oscillation(
            (0, 1, 0, 1), args.lambda1, args.lambda2, args.epsilon, rng=rng)
        stats = {k: v for k, v in patch.diagnostics.items()}
        print(json.dumps(stats, indent=2, sort_keys=True))
        if args.out:
            np.savez(args.out, x=patch.x, t=patch.t, phi=patch.phi,
                     psi=patch.psi)
        return 0

    if args.command == "density-step":
        model = fluxmod.hollig_piecewise()
        pair = fluxmod.build_branch_pair(model, 0.6, 0.9, "hollig")
        w = inclusion.synthetic_subsolution(pair, nx=args.nx, nt=257)
        rng = np.random.default_rng(args.seed)
        _, rep = inclusion.density_step(w, pair, delta=args.delta,
                                        epsilon=args.epsilon, eta=args.eta,
                                        rng=rng)
        print(rep.to_json_line())
        return 0 if all(v for k, v in rep.clauses.items()
                        if k != "short_circuit") else 1

    if args.command == "branch":
        model = fluxmod.from_config({"form": args.flux})
        rep = fluxmod.classify_flux(model)
        out = {"family": rep.family, "landmarks": rep.landmarks}
        try:
            out["s_minus"] = fluxmod.branch_point(model, args.r, "minus")
            out["s_plus"] = fluxmod.branch_point(model, args.r, "plus")
        except FbdiffError as exc:
            out["branch_error"] = str(exc)
        print(json.dumps(out, indent=2, sort_keys=True))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
