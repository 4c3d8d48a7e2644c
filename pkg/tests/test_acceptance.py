"""Acceptance suite: one block per criterion, each recorded as a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the summary at the end of the
session lists every criterion. Criteria that cannot be met by the current
numerics are marked ``xfail(strict=True)`` and still evaluated at their full
tolerance, so they report FAIL and would turn into an error if they started
passing.
"""

import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from holtsmark.cli import main
from holtsmark.dynamics import estimate_correlation, window_correlation
from holtsmark.field import (
    BACKGROUND, FieldEvaluator, FieldSamples, analytic_char_fn, char_fn_from_samples, gauss_flux, sample_fields,
    tail_slope,
)
from holtsmark.kinetics import SphereDiffusionSpec, compare_regimes, simulate_particles, simulate_sphere_diffusion
from holtsmark.potentials import PotentialFamily
from holtsmark.rng import derive_seed
from holtsmark.scatterers import ChargeLaw, SamplingDomain, sample_config
from holtsmark.scattering import ScatteringProblem, build_kernel, ode_deflection, rutherford_kernel, scattering_angle
from holtsmark.timescales import SigmaEvaluator, classify, compute_Ws, solve_TL

NEUTRAL = ChargeLaw.symmetric()
SINGLE = ChargeLaw.single(1.0)


def record(key, ok, msg, part=""):
    ACCEPTANCE.setdefault(key, []).append((part, bool(ok), msg))
    print(f"{key}{' ' + part if part else ''} {'PASS' if ok else 'FAIL'}  {msg}")


def probe_set(radii, seed):
    """Probe vectors with the given lengths and random directions."""
    d = np.random.default_rng(seed).normal(size=(len(radii), 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True) * np.asarray(radii)[:, None]


@pytest.fixture(scope="module")
def coulomb_samples():
    # eps = 0.2 keeps m(eta) = exp(-C0 eps^1.5 |eta|^1.5) above 0.04 on |eta| <= 4
    fam = PotentialFamily("power", 0.2, s=1.0)
    S = sample_fields(fam, NEUTRAL, SamplingDomain.ball(50.0), [[0.0, 0.0, 0.0]], 100_000, seed=2024)
    return fam, S


# --- 1


def test_c1_holtsmark_exponent(coulomb_samples):
    fam, S = coulomb_samples
    radii = np.geomspace(0.5, 4.0, 12)
    est = char_fn_from_samples(S, probe_set(radii, 1))
    y = -np.log(est.estimate.real)
    slope, icpt = np.polyfit(np.log(radii), np.log(y), 1)
    ok = abs(slope - 1.5) <= 0.05
    record("C1", ok, f"log-log slope {slope:.4f} (target 1.500 +- 0.05, 1e5 configs, R=50)")
    assert ok


# --- 2


def _agree(est, an, k=3.0):
    z = np.abs(est.estimate - an) / est.mc_error
    return bool(np.all(z <= k)), float(np.max(z))


def test_c2_single_charge_s3():
    fam = PotentialFamily("power", 1.0, s=3.0)
    S = sample_fields(fam, SINGLE, SamplingDomain.ball(10.0), [[0.0, 0.0, 0.0]], 20_000, seed=31)
    probes = probe_set(np.geomspace(0.05, 2.0, 12), 2)
    est = char_fn_from_samples(S, probes)
    an = analytic_char_fn(fam, SINGLE, probes, [[0.0, 0.0, 0.0]], R=10.0)
    ok, zmax = _agree(est, an)
    record("C2", ok, f"max |MC - analytic| = {zmax:.2f} stderr over 12 probes", "a.1 s=3 single charge")
    assert ok


def test_c2_coulomb_neutral(coulomb_samples):
    fam, S = coulomb_samples
    probes = probe_set(np.geomspace(0.5, 4.0, 12), 3)
    est = char_fn_from_samples(S, probes)
    an = analytic_char_fn(fam, NEUTRAL, probes, [[0.0, 0.0, 0.0]], R=50.0)
    ok, zmax = _agree(est, an)
    record("C2", ok, f"max |MC - analytic| = {zmax:.2f} stderr over 12 probes", "a.2 Coulomb neutral")
    assert ok


def test_c2_background():
    fam = PotentialFamily("power", 0.2, s=1.0)
    y = [[3.0, 1.0, 0.0]]
    S = sample_fields(fam, SINGLE, SamplingDomain.ball(20.0), y, 20_000, seed=33, mode=BACKGROUND)
    probes = probe_set(np.geomspace(0.1, 3.0, 12), 4)
    est = char_fn_from_samples(FieldSamples(S.fields, S.points, 0, 20.0, BACKGROUND), probes)
    an = analytic_char_fn(fam, SINGLE, probes, y, R=20.0, mode=BACKGROUND)
    ok, zmax = _agree(est, an)
    record("C2", ok, f"max |MC - analytic| = {zmax:.2f} stderr over 12 probes", "a.3 background")
    assert ok


# --- 3


def test_c3_force_tail(coulomb_samples):
    _, S = coulomb_samples
    fit = tail_slope(np.linalg.norm(S.fields[:, 0], axis=1), decades=2.0)
    ok = abs(fit.slope + 2.5) <= 0.15
    record("C3", ok, f"|F| density tail slope {fit.slope:.3f} +- {fit.stderr:.3f} from {fit.n_tail} tail samples "
                     f"(binned {fit.binned_slope:.3f}; target -2.5 +- 0.15)")
    assert ok


# --- 4


def test_c4_gauss_flux():
    fam = PotentialFamily("power", 1.0, s=1.0)
    cfg = sample_config(SamplingDomain.ball(10.0), 1.0, SINGLE, seed=41)
    ev = FieldEvaluator(cfg, fam, BACKGROUND, SINGLE)
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(20):
        c = rng.uniform(-4.0, 4.0, 3)
        a = rng.uniform(0.5, 4.0)
        k = int(np.sum(np.linalg.norm(cfg.positions - c, axis=1) < a))
        vol = 4.0 * np.pi * a**3 / 3.0
        target = k - vol
        err = abs(gauss_flux(ev, c, a) / (4.0 * np.pi) - target) / max(1.0, abs(target))
        worst = max(worst, err)
    ok = worst <= 1e-3
    record("C4", ok, f"worst relative flux error {worst:.2e} over 20 spheres (tol 1e-3)")
    assert ok


# --- 5


def test_c5_rutherford():
    t0 = time.perf_counter()
    p = ScatteringProblem.coulomb()
    bs = np.geomspace(0.1, 10.0, 21)
    ang = max(abs(scattering_angle(p, b) / (2.0 * np.arctan(1.0 / b)) - 1.0) for b in bs)
    tab = build_kernel(p, [np.pi / 4, np.pi / 2, 3 * np.pi / 4])
    ker = float(np.max(np.abs(tab.B_over_v / rutherford_kernel(tab.chi) - 1.0)))
    dt = time.perf_counter() - t0
    ok = ang <= 1e-6 and ker <= 1e-6 and dt < 60.0
    record("C5", ok, f"angle rel err {ang:.1e}, kernel rel err {ker:.1e}, {dt:.1f} s")
    assert ok


# --- 6


def test_c6_ode_vs_quadrature():
    rng = np.random.default_rng(6)
    worst_chi = worst_speed = 0.0
    for i in range(20):
        s = (1.0, 2.0, 4.0)[i % 3]
        b = float(rng.uniform(0.2, 3.0))
        V = float(rng.uniform(0.6, 2.0))
        p = ScatteringProblem.pure_power(s, V=V)
        chi, drift = ode_deflection(p, b)
        worst_chi = max(worst_chi, abs(chi - scattering_angle(p, b)))
        worst_speed = max(worst_speed, abs(drift))
    ok = worst_chi <= 1e-4 and worst_speed <= 1e-6
    record("C6", ok, f"worst |chi_ode - chi| {worst_chi:.1e} (tol 1e-4), worst speed drift {worst_speed:.1e}")
    assert ok


# --- 7


@pytest.mark.xfail(strict=True, reason="sigma grows like log(T/(M eps)), about 3 log(1/eps) at T ~ T_L; "
                                       "see decision ledger")
def test_c7_coulomb_sigma_asymptotics():
    ratios = []
    for eps in (1e-3, 1e-4):
        ev = SigmaEvaluator(PotentialFamily("power", eps, s=1.0))
        T = solve_TL(ev)
        ratios.append(ev.sigma(T) / (4.0 * np.pi * T * eps**2 * np.log(1.0 / eps)))
    ok = all(0.9 <= r <= 1.1 for r in ratios)
    record("C7", ok, f"sigma(T_L)/(4 pi T eps^2 log(1/eps)) = {ratios[0]:.3f}, {ratios[1]:.3f} "
                     "at eps = 1e-3, 1e-4 (target [0.9, 1.1])")
    assert ok


# --- 8


def test_c8_correlated_law_and_exponent():
    s = 0.75
    W = compute_Ws(s).value
    eps_grid = [1e-3, 1e-4, 1e-5]
    TL_a = [solve_TL(SigmaEvaluator(PotentialFamily("power", e, s=s))) for e in eps_grid]
    law = (1.0 / (W * 1e-3 ** (2 * s))) ** (1.0 / (3 - 2 * s))
    rel = abs(TL_a[0] / law - 1.0)
    record("C8", rel <= 0.15, f"T_L {TL_a[0]:.2f} vs {law:.2f}, rel {rel:.3f}", "s=3/4 law")
    # eps^s amplitude (variant a) and eps amplitude (variant b, r + 2s < 3) scale differently
    slope_a = np.polyfit(np.log(eps_grid), np.log(TL_a), 1)[0]
    target_a = -2.0 * s / (3 - 2 * s)
    TL_b = [solve_TL(SigmaEvaluator(PotentialFamily("weak_amp", e, s=s, r=1.0))) for e in eps_grid]
    slope_b = np.polyfit(np.log(eps_grid), np.log(TL_b), 1)[0]
    target_b = -2.0 / (3 - 2 * s)
    ok_a = abs(slope_a / target_a - 1.0) <= 0.05
    ok_b = abs(slope_b / target_b - 1.0) <= 0.05
    record("C8", ok_a, f"fitted exponent {slope_a:.4f} vs -2s/(3-2s) = {target_a:.4f}", "s=3/4 exponent, variant a")
    record("C8", ok_b, f"fitted exponent {slope_b:.4f} vs -2/(3-2s) = {target_b:.4f}", "s=3/4 exponent, variant b r=1")
    assert rel <= 0.15 and ok_a and ok_b


@pytest.mark.xfail(strict=True, reason="the log in sigma(T_L) is log(T_L/(M eps)), not log(1/eps); "
                                       "see decision ledger")
def test_c8_coulomb_law():
    eps = 1e-3
    TL = solve_TL(SigmaEvaluator(PotentialFamily("power", eps, s=1.0)))
    law = 1.0 / (4.0 * np.pi * eps**2 * np.log(1.0 / eps))
    rel = abs(TL / law - 1.0)
    ok = rel <= 0.15
    record("C8", ok, f"T_L {TL:.1f} vs {law:.1f}, rel {rel:.3f} (tol 0.15)", "s=1 law")
    assert ok


@pytest.mark.xfail(strict=True, reason="Gaussian bumps give T_L = 2/(pi^2 eps^2 L^2), not 1/(eps^2 L^4); "
                                       "see decision ledger")
def test_c8_wide_gaussian_law():
    eps, L = 1e-4, 10.0
    TL = solve_TL(SigmaEvaluator(PotentialFamily("weak_wide", eps, L0=L)))
    law = 1.0 / (eps**2 * L**4)
    rel = abs(TL / law - 1.0)
    ok = rel <= 0.15
    record("C8", ok, f"T_L {TL:.4g} vs {law:.4g}, rel {rel:.2f} (tol 0.15; "
                     f"2/(pi^2 eps^2 L^2) = {2 / (np.pi**2 * eps**2 * L**2):.4g})", "variant c law")
    assert ok


# --- 9


def test_c9_phase_diagram():
    got_a = [classify(PotentialFamily("power", 1e-4, s=s)).classification for s in (0.75, 1.0, 2.0)]
    want_a = ["Correlated", "Landau", "Boltzmann"]
    s_vals = (0.6, 0.75, 1.0, 1.5)
    r_vals = (0.5, 1.0, 1.5, 2.5)

    def expected(s, r):
        if s >= 1.0:
            return "Boltzmann" if r > 1 else "Landau"
        if r + 2 * s > 3:
            return "Boltzmann"
        return "BoltzmannLandau" if r + 2 * s == 3 else "Correlated"

    got_b = [[classify(PotentialFamily("weak_amp", 1e-4, s=s, r=r)).classification for r in r_vals]
             for s in s_vals]
    want_b = [[expected(s, r) for r in r_vals] for s in s_vals]
    ok_a = got_a == want_a
    ok_b = got_b == want_b
    record("C9", ok_a, f"{got_a}", "variant a")
    wrong = [(s, r, g) for s, row, wrow in zip(s_vals, got_b, want_b) for r, g, w in zip(r_vals, row, wrow) if g != w]
    record("C9", ok_b, f"16 cells, mismatches {wrong}", "variant b")
    assert ok_a and ok_b


# --- 10


def test_c10_correlation_dichotomy():
    ev = SigmaEvaluator(PotentialFamily("power", 1e-3, s=1.0))
    c1 = window_correlation(ev, solve_TL(ev))
    ok1 = c1 < 0.1
    record("C10", ok1, f"s=1 consecutive-window correlation {c1:.4f} at eps=1e-3 (< 0.1)", "s=1")
    traces = []
    for eps in (1e-2, 1e-3):
        fam = PotentialFamily("power", eps, s=0.75)
        traces.append(estimate_correlation(fam, NEUTRAL, (0, 0, 0), (1, 0, 0), (0, 2, 0), (1, 0, 0), 1.0).scalar)
    ok2 = min(traces) > 0.05 and abs(traces[0] - traces[1]) <= 0.1 * traces[0]
    record("C10", ok2, f"trace C at |y|=2: {traces[0]:.4f}, {traces[1]:.4f} at eps=1e-2, 1e-3 (> 0.05)",
           "s=3/4 separated")
    ev = SigmaEvaluator(PotentialFamily("power", 1e-3, s=0.75))
    TL = solve_TL(ev)
    Ts = TL * np.geomspace(0.25, 4.0, 9)
    slope = np.polyfit(np.log(Ts), np.log([ev.sigma(T) for T in Ts]), 1)[0]
    ok3 = abs(slope - 1.5) <= 0.1
    record("C10", ok3, f"self-window variance exponent {slope:.4f} (3 - 2s = 1.5 +- 0.1)", "s=3/4 exponent")
    assert ok1 and ok2 and ok3


# --- 11


def test_c11_landau_limit():
    fam = PotentialFamily("weak_wide", 0.05, L0=0.5)
    ev = SigmaEvaluator(fam)
    TL = solve_TL(ev)
    tau = np.array([0.25, 0.5, 1.0, 1.5, 2.0])
    particle = simulate_particles(fam, NEUTRAL, 64.0, tau * TL, 100, 100, seed=11, dt=0.02)
    model = simulate_sphere_diffusion(SphereDiffusionSpec.from_sigma(ev, TL, NEUTRAL), (1.0, 0.0, 0.0),
                                      seed=derive_seed(11, 1), times=tau * TL, n_paths=10_000)
    rep = compare_regimes(particle, model, w1_tol=0.05)
    w = ", ".join(f"{x:.4f}" for x in rep.w1_distances)
    record("C11", rep.verdict, f"W1 on cos(theta) at tau = 0.25..2: [{w}] (< 0.05, 1e4 paths each)")
    assert rep.verdict


# --- 12


C12_CONFIGS = {
    "field-stats": {"family": {"variant": "power", "eps": 1.0, "s": 1.0}, "params": {"R": 8, "n_samples": 1200}},
    "char-fn": {"family": {"variant": "power", "eps": 0.2, "s": 1.0}, "law": {"charges": [1, -1], "weights": [0.5, 0.5]},
                "params": {"R": 10, "n_samples": 1200, "probes": [[0.5, 0, 0], [0, 2, 0]]}},
    "mean-field": {"family": {"variant": "power", "eps": 1.0, "s": 1.0}, "law": {"charges": [1], "weights": [1]},
                   "params": {"x": [0.5, 0, 0], "R": 6, "n_samples": 1200}},
    "scattering": {"params": {"potential": "power", "s": 2, "angles": [0.5, 1.0], "b_values": [0.5, 2]}},
    "timescales": {"family": {"variant": "power", "eps": 0.001, "s": 0.75}, "params": {"T_grid": [1, 10]}},
    "correlations": {"family": {"variant": "weak_wide", "eps": 0.2, "L0": 1.0},
                     "params": {"h": 0.5, "x2": [0, 0.1, 0], "method": "mc", "n_samples": 40, "radius": 8}},
    "simulate": {"family": {"variant": "power", "eps": 0.01, "s": 1.0}, "params": {"t_end": 2, "R_cloud": 5}},
    "kinetic-compare": {"family": {"variant": "weak_wide", "eps": 0.05, "L0": 0.5},
                        "params": {"model": "landau", "times": [0.25, 0.5], "n_configs": 4, "paths_per_config": 3,
                                   "box": 16}},
    "regime-phase-diagram": {"params": {"variant": "weak_amp", "s_values": [1.5], "r_values": [0.5, 2.5]}},
}


def test_c12_determinism(tmp_path):
    mismatched = []
    for kind, body in C12_CONFIGS.items():
        cfg = {"experiment": kind, "seed": 12, **body}
        path = tmp_path / f"{kind}.json"
        path.write_text(json.dumps(cfg))
        outs = []
        for tag, workers in (("a", 1), ("b", 4), ("c", 1)):
            out = tmp_path / f"{kind}-{tag}"
            assert main(["run", str(path), "--workers", str(workers), "--out", str(out)]) == 0, kind
            outs.append(out)
        names = sorted(json.loads((outs[0] / "manifest.json").read_text())["artifacts"])
        for name in names:
            data = [(o / name).read_bytes() for o in outs]
            if not data[0] == data[1] == data[2]:
                mismatched.append(f"{kind}/{name}")
    ok = not mismatched
    record("C12", ok, f"{len(C12_CONFIGS)} experiment kinds, reruns and workers 1/4 byte-identical"
                      + (f"; differing: {mismatched}" if mismatched else ""))
    assert ok
