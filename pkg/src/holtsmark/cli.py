"""Command-line experiment runner: ``holtsmark run config.json [--workers N] [--out DIR]``.

Each config names one experiment kind, a seed and its parameters; it is
validated against ``schema/experiment.json`` before anything is computed.
Artifacts are CSV (data) and JSON (reports), written with ``repr`` floats and
sorted keys so that reruns are byte-identical. ``manifest.json`` records the
config hash, seed, tool version, wall time and artifact hashes; only its
timing fields change between runs.

Exit status: 0 on success, 2 when the config or a parameter is invalid,
3 when a numerical method fails.
"""

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from .dynamics import CloseEncounterError, cloud_radius, estimate_correlation, integrate_trajectory
from .field import (
    TRUNCATED,
    CoincidentPointError,
    QuadratureError,
    SurfaceProximityError,
    analytic_char_fn,
    estimate_char_fn,
    mean_field_coulomb,
    mean_field_displaced,
    mean_field_mc,
    sample_fields,
    tail_slope,
)
from .kinetics import (
    NormalizationError,
    PathEnsemble,
    SphereDiffusionSpec,
    compare_regimes,
    simulate_particles,
    simulate_sphere_diffusion,
)
from .potentials import PotentialFamily, SingularityError
from .scatterers import ChargeLaw, SamplingDomain, sample_config
from .scattering import (
    BranchResolutionError,
    CaptureError,
    OrbitingError,
    ScatteringProblem,
    build_kernel,
    dchi_db,
    rutherford_kernel,
    scattering_angle,
)
from .timescales import QuadratureFailure, SigmaEvaluator, classify, compute_Ws, solve_TL

log = logging.getLogger("holtsmark")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (
    QuadratureFailure, QuadratureError, CloseEncounterError, CaptureError, OrbitingError,
    BranchResolutionError, CoincidentPointError, SurfaceProximityError, SingularityError,
    NormalizationError, ArithmeticError, RuntimeError,
)


class ConfigError(ValueError):
    """The experiment config is unreadable, fails the schema, or names bad parameters."""


def load_schema():
    return json.loads(resources.files("holtsmark").joinpath("schema/experiment.json").read_text())


def validate(cfg):
    try:
        jsonschema.validate(cfg, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def build_family(cfg, required=True):
    spec = cfg.get("family")
    if spec is None:
        if required:
            raise ConfigError(f"experiment {cfg['experiment']!r} needs a 'family' block")
        return None
    try:
        return PotentialFamily.from_dict(spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid family: {exc}") from None


def build_law(cfg, default=None):
    spec = cfg.get("law")
    if spec is None:
        return default
    try:
        return ChargeLaw.from_dict(spec)
    except ValueError as exc:
        raise ConfigError(f"invalid charge law: {exc}") from None


# ---------------------------------------------------------------------------
# serialization helpers


def _num(x):
    """Plain JSON number; non-finite values become the strings 'inf', '-inf', 'nan'."""
    x = float(x)
    if np.isfinite(x):
        return x
    return "nan" if np.isnan(x) else ("inf" if x > 0 else "-inf")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    return obj


def dump_json(obj):
    return json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n"


def dump_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _vec(p, key, default):
    return np.asarray(p.get(key, default), dtype=float)


# ---------------------------------------------------------------------------
# experiments; each returns {filename: text}


def _expected_tail_slope(family):
    ff = family.far_field
    if ff is None:
        return None
    return -(1.0 + 3.0 / (1.0 + ff[1]))


def run_field_stats(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.symmetric())
    p = cfg.get("params", {})
    point = _vec(p, "point", (0.0, 0.0, 0.0))
    mode = p.get("mode", TRUNCATED)
    samples = sample_fields(fam, law, SamplingDomain.ball(p["R"]), point[None], p["n_samples"],
                            cfg["seed"], mode, workers=workers)
    F = samples.fields[:, 0, :]
    norms = np.linalg.norm(F, axis=1)
    fit = tail_slope(norms, p.get("decades", 2.0))
    report = {
        "slope": fit.slope, "stderr": fit.stderr, "n_tail": fit.n_tail, "threshold": fit.threshold,
        "binned_slope": fit.binned_slope, "n_samples": int(p["n_samples"]),
        "n_resampled": samples.n_resampled, "expected_slope": _expected_tail_slope(fam),
    }
    tol = cfg.get("tolerances", {}).get("slope")
    if tol is not None and report["expected_slope"] is not None:
        report["pass"] = bool(abs(fit.slope - report["expected_slope"]) <= tol)
    rows = [(i, *f, n) for i, (f, n) in enumerate(zip(F, norms))]
    return {
        "field_samples.csv": dump_csv(["sample", "Fx", "Fy", "Fz", "norm"], rows),
        "tail_fit.json": dump_json(report),
    }


def run_char_fn(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.symmetric())
    p = cfg["params"]
    point = _vec(p, "point", (0.0, 0.0, 0.0))
    mode = p.get("mode", TRUNCATED)
    probes = np.asarray(p["probes"], dtype=float)
    k = cfg.get("tolerances", {}).get("stderr_multiple", 3.0)
    est = estimate_char_fn(fam, law, p["R"], point[None], probes, p["n_samples"], cfg["seed"], mode, workers)
    R_an = None if p.get("analytic_R", "finite") == "infinite" else p["R"]
    an = analytic_char_fn(fam, law, probes, point[None], R=R_an, mode=mode)
    rows = []
    passes = []
    for row, a, e, s in zip(est.to_csv_rows(p.get("case", "")), an, est.estimate, est.mc_error):
        ok = bool(abs(e - a) <= k * s) if s > 0 else bool(abs(e - a) <= 1e-12)
        passes.append(ok)
        rows.append((*row, a.real, a.imag, int(ok)))
    header = ["probe_index", "eta_x", "eta_y", "eta_z", "re", "im", "stderr", "n", "R", "case",
              "re_analytic", "im_analytic", "pass"]
    summary = {"all_pass": all(passes), "n_probes": len(rows), "stderr_multiple": k,
               "n_resampled": est.n_resampled}
    return {"char_fn.csv": dump_csv(header, rows), "char_fn_summary.json": dump_json(summary)}


def run_mean_field(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.single(1.0))
    p = cfg["params"]
    x = _vec(p, "x", (0.0, 0.0, 0.0))
    out = {"x": x}
    if "e" in p:
        e = _vec(p, "e", (1.0, 0.0, 0.0))
        res = mean_field_displaced(fam, e, x)
        dom = SamplingDomain.displaced_ball(p.get("R", 20.0), tuple(e), fam.far_field[1])
    else:
        if not (fam.variant == "power" and fam.s == 1.0):
            raise ConfigError("mean-field without a displacement 'e' needs the Coulomb family")
        res = mean_field_coulomb(law, x, fam.far_field[0])
        dom = SamplingDomain.ball(p.get("R", 20.0))
    out.update(limit=res.value, quadrature_check=res.quadrature_check, note=res.note)
    if "n_samples" in p:
        mean, err = mean_field_mc(fam, law, dom, x, p["n_samples"], cfg["seed"], workers=workers)
        out.update(mc_mean=mean, mc_stderr=err, R=p.get("R", 20.0), n_samples=p["n_samples"])
    return {"mean_field.json": dump_json(out)}


def _scattering_problem(cfg, p):
    V = p.get("V", 1.0)
    Q = p.get("Q", 1.0)
    kind = p.get("potential", "coulomb")
    if kind == "coulomb":
        return ScatteringProblem.coulomb(V, Q)
    if kind == "power":
        if "s" not in p:
            raise ConfigError("potential 'power' needs params.s")
        return ScatteringProblem.pure_power(p["s"], p.get("A", 1.0), V, Q)
    return ScatteringProblem.from_family(build_family(cfg), V=V, Q=Q)


def run_scattering(cfg, workers):
    p = cfg["params"]
    prob = _scattering_problem(cfg, p)
    table = build_kernel(prob, p["angles"], p.get("b_min", 1e-3), p.get("b_max", 1e3))
    coulomb = p.get("potential", "coulomb") == "coulomb"
    ref = rutherford_kernel(table.chi, prob.V, prob.Q) if coulomb else [""] * len(table.chi)
    rows = [(c, n, bv, r) for c, n, bv, r in zip(table.chi, table.branch_count, table.B_over_v, ref)]
    files = {
        "kernel.csv": dump_csv(["chi", "branch_count", "B_over_v", "rutherford"], rows),
        "kernel_meta.json": dump_json({**json.loads(table.metadata()),
                                       "branches": [[list(b) for b in br] for br in table.branches]}),
    }
    if "b_values" in p:
        brow = []
        for b in p["b_values"]:
            chi = scattering_angle(prob, b)
            brow.append((b, chi, dchi_db(prob, b),
                         2.0 * np.arctan(prob.Q / (prob.V**2 * b)) if coulomb else ""))
        files["deflection.csv"] = dump_csv(["b", "chi", "dchi_db", "chi_rutherford"], brow)
    return files


def _classify_cell(args):
    fam, eps_grid, M_grid = args
    return json.loads(classify(fam, **_grid_kwargs(eps_grid, M_grid)).to_json())


def _grid_kwargs(eps_grid, M_grid):
    kw = {}
    if eps_grid:
        kw["eps_grid"] = eps_grid
    if M_grid:
        kw["M_grid"] = M_grid
    return kw


def run_timescales(cfg, workers):
    fam = build_family(cfg)
    p = cfg.get("params", {})
    files = {}
    ev = SigmaEvaluator(fam)
    T_grid = p.get("T_grid", [])
    if T_grid:
        rows = []
        for T in T_grid:
            perp, par = ev.components(T)
            rows.append((T, perp, par, max(perp, par)))
        files["sigma.csv"] = dump_csv(["T", "sigma_perp", "sigma_par", "sigma"], rows)
    report = {"family": fam.to_dict(), "T_L": solve_TL(ev), "lambda_eps": fam.collision_length}
    eps_grid = p.get("eps_grid", [])
    if eps_grid:
        report["T_L_by_eps"] = [[e, solve_TL(SigmaEvaluator(fam.with_eps(e)))] for e in eps_grid]
    ff = fam.far_field
    if ff is not None and 0.5 < ff[1] < 1.0:
        w = compute_Ws(ff[1])
        report["W_s"] = {"value": w.value, "perp": w.perp, "par": w.par}
    files["timescales.json"] = dump_json(report)
    if p.get("classify", False):
        files["regime.json"] = dump_json(_classify_cell((fam, eps_grid, p.get("M_grid"))))
    return files


def run_correlations(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.symmetric())
    p = cfg["params"]
    est = estimate_correlation(
        fam, law, _vec(p, "x1", (0, 0, 0)), _vec(p, "v1", (1, 0, 0)), _vec(p, "x2", (0, 1, 0)),
        _vec(p, "v2", (1, 0, 0)), p["h"], p.get("n_samples", 0), cfg["seed"],
        method=p.get("method", "campbell"), radius=p.get("radius"))
    report = json.loads(est.to_json())
    report["trace"] = est.scalar
    return {"correlation.json": dump_json(report)}


def run_simulate(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.symmetric())
    p = cfg["params"]
    x0 = _vec(p, "x0", (0.0, 0.0, 0.0))
    v0 = _vec(p, "v0", (1.0, 0.0, 0.0))
    R = p.get("R_cloud", cloud_radius(float(np.linalg.norm(v0)), p["t_end"]))
    config = sample_config(SamplingDomain.ball(R, tuple(x0)), 1.0, law, cfg["seed"])
    traj = integrate_trajectory(config, fam, x0, v0, p["t_end"], record_every=p.get("record_every"))
    summary = {"n_scatterers": len(config.charges), "R_cloud": R, "steps": traj.steps,
               "rejections": traj.rejections, "min_distance": traj.min_distance,
               "energy_drift": traj.energy_drift, "final_velocity": traj.velocities[-1]}
    return {"trajectory.csv": traj.to_csv(), "trajectory_summary.json": dump_json(summary)}


def _particle_block(args):
    fam, law, box, times, first, count, per, seed, dt = args
    ens = simulate_particles(fam, law, box, times, count, per, seed, dt, first=first)
    return ens.velocities, ens.initial


def run_kinetic_compare(cfg, workers):
    fam = build_family(cfg)
    law = build_law(cfg, ChargeLaw.symmetric())
    p = cfg["params"]
    tol = cfg.get("tolerances", {}).get("w1", 0.05)
    ev = SigmaEvaluator(fam)
    T_L = solve_TL(ev)
    if not np.isfinite(T_L):
        raise QuadratureFailure("T_L is infinite for this family; nothing to normalize by")
    tau = np.asarray(p["times"], dtype=float)
    times = tau * T_L
    n_configs = p.get("n_configs", 1)
    per = p.get("paths_per_config", 100)
    box = p.get("box", 64.0)
    dt = p.get("dt", 0.02)
    seed = cfg["seed"]
    # clouds are split in consecutive blocks and concatenated in order
    n_blocks = max(1, min(workers, n_configs))
    edges = np.linspace(0, n_configs, n_blocks + 1).astype(int)
    tasks = [(fam, law, box, times, int(a), int(b - a), per, seed, dt) for a, b in zip(edges[:-1], edges[1:])]
    if n_blocks > 1:
        with ProcessPoolExecutor(max_workers=n_blocks) as ex:
            parts = list(ex.map(_particle_block, tasks))
    else:
        parts = [_particle_block(t) for t in tasks]
    particle = PathEnsemble(times, np.concatenate([a for a, _ in parts]), None,
                            np.concatenate([b for _, b in parts]))
    n_model = p.get("n_model_paths", particle.n_paths)
    model_seed = seed ^ 0x5DEECE66D
    spec = SphereDiffusionSpec.from_sigma(ev, T_L, law)
    model = simulate_sphere_diffusion(spec, (1.0, 0.0, 0.0), seed=model_seed, times=times, n_paths=n_model)
    params = {"kappa": spec.kappa, "two_kappa_T_L": 2.0 * spec.kappa * T_L}
    rep = compare_regimes(particle, model, w1_tol=tol)
    report = json.loads(rep.to_json())
    report.update(T_L=T_L, normalized_times=tau, model=p["model"], model_params=params,
                  n_particle_paths=particle.n_paths, n_model_paths=model.n_paths)
    rows = [(t, tt, am, ap, se, w) for t, tt, am, ap, se, w in
            zip(tau, times, rep.autocorr_model, rep.autocorr_particle, rep.autocorr_stderr, rep.w1_distances)]
    return {
        "kinetic_compare.json": dump_json(report),
        "autocorrelation.csv": dump_csv(["tau", "t", "autocorr_model", "autocorr_particle", "stderr", "w1"],
                                        rows),
    }


def run_phase_diagram(cfg, workers):
    p = cfg["params"]
    base = dict(cfg.get("family", {}))
    variant = p.get("variant", base.get("variant", "power"))
    base["variant"] = variant
    base.setdefault("eps", 1e-4)
    s_values = p["s_values"]
    r_values = p.get("r_values", [None]) if variant == "weak_amp" else [None]
    if variant == "weak_amp" and r_values == [None]:
        raise ConfigError("weak_amp phase diagram needs params.r_values")
    cells = []
    for s in s_values:
        for r in r_values:
            d = dict(base, s=s)
            if r is not None:
                d["r"] = r
            try:
                fam = PotentialFamily.from_dict(d)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid family in grid (s={s}, r={r}): {exc}") from None
            cells.append((fam, p.get("eps_grid"), p.get("M_grid")))
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            reports = list(ex.map(_classify_cell, cells))
    else:
        reports = [_classify_cell(c) for c in cells]
    nr = len(r_values)
    matrix = [[reports[i * nr + j]["classification"] for j in range(nr)] for i in range(len(s_values))]
    out = {"variant": variant, "s_values": s_values,
           "r_values": r_values if variant == "weak_amp" else None,
           "classification": matrix if variant == "weak_amp" else [row[0] for row in matrix],
           "reports": reports}
    return {"phase_diagram.json": dump_json(out)}


EXPERIMENTS = {
    "field-stats": run_field_stats,
    "char-fn": run_char_fn,
    "mean-field": run_mean_field,
    "scattering": run_scattering,
    "timescales": run_timescales,
    "correlations": run_correlations,
    "simulate": run_simulate,
    "kinetic-compare": run_kinetic_compare,
    "regime-phase-diagram": run_phase_diagram,
}


# ---------------------------------------------------------------------------
# driver


def load_config(path):
    try:
        raw = open(path, "rb").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    try:
        cfg = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    validate(cfg)
    return cfg, raw


def run(path, out_dir=None, workers=None):
    """Run one experiment config; returns the exit status."""
    workers = workers or os.cpu_count() or 1
    t0 = time.perf_counter()
    try:
        cfg, raw = load_config(path)
        if cfg["experiment"] not in ("scattering", "regime-phase-diagram"):
            build_family(cfg)
        build_law(cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = out_dir or os.path.join(os.getcwd(), "out")
    try:
        files = EXPERIMENTS[cfg["experiment"]](cfg, workers)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        log.error("numerical failure: %s: %s", type(exc).__name__, exc)
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    os.makedirs(out_dir, exist_ok=True)
    hashes = {}
    for name, text in sorted(files.items()):
        data = text.encode()
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(data)
        hashes[name] = hashlib.sha256(data).hexdigest()
    manifest = {
        "experiment": cfg["experiment"],
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": cfg["seed"],
        "tool_version": __version__,
        "artifacts": hashes,
        "wall_time_s": round(time.perf_counter() - t0, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(dump_json(manifest))
    log.info("wrote %d artifacts to %s", len(files), out_dir)
    return EXIT_OK


def main(argv=None):
    logging.basicConfig(level=os.environ.get("HK_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    ap = argparse.ArgumentParser(prog="holtsmark", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    rp = sub.add_parser("run", help="run one experiment config")
    rp.add_argument("config")
    rp.add_argument("--workers", type=int, default=None, help="worker processes (default: all CPUs)")
    rp.add_argument("--out", default=None, help="output directory (default: ./out)")
    args = ap.parse_args(argv)
    if args.workers is not None and args.workers < 1:
        ap.error("--workers must be at least 1")
    return run(args.config, args.out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
