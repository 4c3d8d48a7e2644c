"""Random force fields generated by Poisson clouds of charged scatterers.

The field at x from a finite configuration is -sum_n Q_n grad Phi(x - x_n)
("truncated" mode). In "background" mode the uniform-density mean force
q_bar * integral over the ball of grad Phi(x - y) dy is added, which makes
single-sign clouds translation invariant in the large-R limit.

Monte Carlo estimates never materialize the clouds: a fused numba kernel
regenerates each configuration from its counter-based key and accumulates
the force at the probe points directly.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate, special

from .potentials import KIND_POWER, P_A, P_C, P_EPS, P_S, PART_FULL, radial
from .rng import derive_seed, stream_keys
from .scatterers import (
    BALL,
    ChargeLaw,
    SamplingDomain,
    _shape_arrays,
    ball_point,
    box_point,
    draw_count,
    point_charge,
)

log = logging.getLogger(__name__)

TRUNCATED, BACKGROUND = "truncated", "background"
COINCIDENT_TOL = 1e-12
MAX_RESAMPLE_RATE = 1e-3


class CoincidentPointError(ValueError):
    """Field requested at (or within 1e-12 of) a scatterer."""


class UnsupportedDomainError(ValueError):
    pass


class SurfaceProximityError(ValueError):
    pass


class QuadratureError(RuntimeError):
    def __init__(self, msg, achieved):
        super().__init__(f"{msg} (achieved error {achieved:.3g})")
        self.achieved = achieved


# ---------------------------------------------------------------------------
# pair force kernel


@njit(inline="always", cache=True)
def _pair(kind, p, part, dx, dy, dz, q):
    """Force at separation (dx,dy,dz) = x - x_n from charge q: -q Phi'(r) d/r."""
    r2 = dx * dx + dy * dy + dz * dz
    if kind == KIND_POWER and part == PART_FULL and p[P_C] == 0.0:
        s = p[P_S]
        if s == 1.0:
            c = q * p[P_A] * p[P_EPS] / (r2 * np.sqrt(r2))
        else:
            c = q * s * p[P_A] * p[P_EPS] ** s * r2 ** (-0.5 * s - 1.0)
        return c * dx, c * dy, c * dz
    r = np.sqrt(r2)
    d1 = radial(kind, p, part, r)[1]
    c = -q * d1 / r
    return c * dx, c * dy, c * dz


@njit(cache=True)
def _direct_sum(pos, q, kind, p, part, x):
    fx = fy = fz = 0.0
    for n in range(pos.shape[0]):
        dx = x[0] - pos[n, 0]
        dy = x[1] - pos[n, 1]
        dz = x[2] - pos[n, 2]
        if dx * dx + dy * dy + dz * dz < COINCIDENT_TOL**2:
            return np.nan, np.nan, np.nan, True
        a, b, c = _pair(kind, p, part, dx, dy, dz, q[n])
        fx += a
        fy += b
        fz += c
    return fx, fy, fz, False


def direct_field(positions, charges, family, x, part=PART_FULL, M=None):
    """Naive direct sum, the reference the indexed evaluator must reproduce."""
    fx, fy, fz, bad = _direct_sum(
        np.ascontiguousarray(positions, dtype=float), np.ascontiguousarray(charges, dtype=float),
        family.kind, family.params(M), part, np.asarray(x, dtype=float),
    )
    if bad:
        raise CoincidentPointError("evaluation point coincides with a scatterer")
    return np.array([fx, fy, fz])


# ---------------------------------------------------------------------------
# background term


def ball_background(family, R, d):
    """Radial component of integral over a radius-R ball of grad Phi(x - y) dy.

    ``d`` is the distance of x from the ball center; the vector term is this
    value times (x - center)/d. Closed form for Coulomb, otherwise a 1D
    quadrature over spherical shells.
    """
    ff = family.far_field
    if d == 0.0:
        return 0.0
    if family.variant == "power" and family.s == 1.0 and family.C == 0.0:
        amp = ff[0]
        if d <= R:
            return -amp * 4.0 * np.pi * d / 3.0
        return -amp * 4.0 * np.pi * R**3 / (3.0 * d * d)

    def shell(a):
        # derivative in d of the potential of a thin shell of radius a
        lo, hi = abs(d - a), d + a
        val = integrate.quad(lambda t: family.phi(t)[0] * t, lo, hi, limit=200)[0]
        sgn = 1.0 if d >= a else -1.0
        dv = (family.phi(hi)[0] * hi - sgn * family.phi(lo)[0] * lo) if lo > 0 else family.phi(hi)[0] * hi
        return 2.0 * np.pi * a / d * (dv - val / d)

    pts = [d] if d < R else None
    return integrate.quad(shell, 0.0, R, points=pts, limit=400, epsabs=1e-11, epsrel=1e-10)[0]


def background_term(family, domain, law, x):
    if not domain.is_ball:
        raise UnsupportedDomainError("background mode requires a ball domain")
    c = domain.effective_center
    rel = np.asarray(x, dtype=float) - c
    d = float(np.linalg.norm(rel))
    if d == 0.0:
        return np.zeros(3)
    return law.mean_charge * ball_background(family, domain.scale, d) * rel / d


# ---------------------------------------------------------------------------
# indexed evaluator


@njit(cache=True)
def _cell_sum(spos, sq, starts, kind, p, part, x):
    fx = fy = fz = 0.0
    ncell = starts.shape[0] - 1
    for c in range(ncell):
        for n in range(starts[c], starts[c + 1]):
            dx = x[0] - spos[n, 0]
            dy = x[1] - spos[n, 1]
            dz = x[2] - spos[n, 2]
            if dx * dx + dy * dy + dz * dz < COINCIDENT_TOL**2:
                return np.nan, np.nan, np.nan, True
            a, b, cc = _pair(kind, p, part, dx, dy, dz, sq[n])
            fx += a
            fy += b
            fz += cc
    return fx, fy, fz, False


@njit(cache=True)
def _nearest(spos, starts, origin, h, dims, x, radius):
    """Distance to the nearest scatterer within ``radius`` (inf if none)."""
    best = np.inf
    nx, ny, nz = dims[0], dims[1], dims[2]
    k = int(np.ceil(radius / h))
    cx = int(np.floor((x[0] - origin[0]) / h))
    cy = int(np.floor((x[1] - origin[1]) / h))
    cz = int(np.floor((x[2] - origin[2]) / h))
    for iz in range(max(cz - k, 0), min(cz + k + 1, nz)):
        for iy in range(max(cy - k, 0), min(cy + k + 1, ny)):
            for ix in range(max(cx - k, 0), min(cx + k + 1, nx)):
                c = ix + nx * (iy + ny * iz)
                for n in range(starts[c], starts[c + 1]):
                    dx = x[0] - spos[n, 0]
                    dy = x[1] - spos[n, 1]
                    dz = x[2] - spos[n, 2]
                    d = np.sqrt(dx * dx + dy * dy + dz * dz)
                    if d < best:
                        best = d
    return best if best <= radius else np.inf


class FieldEvaluator:
    """Force field of a fixed configuration, with a uniform cell index.

    The index orders scatterers cell by cell; every cell is still summed, so
    the result equals the naive sum up to rounding. It also answers
    nearest-scatterer queries for the trajectory integrator.
    """

    def __init__(self, config, family, mode=TRUNCATED, law=None, part=PART_FULL, M=None, cell=1.0):
        if mode not in (TRUNCATED, BACKGROUND):
            raise ValueError(f"unknown field mode {mode!r}")
        self.config = config
        self.family = family
        self.mode = mode
        self.part = part
        self.M = M
        self.law = law or config.law or ChargeLaw.single(1.0)
        if mode == BACKGROUND and not config.domain.is_ball:
            raise UnsupportedDomainError("background mode requires a ball domain")
        self._params = family.params(M)
        pos = config.positions
        dom = config.domain
        if dom.is_ball:
            lo = dom.effective_center - dom.scale
            hi = dom.effective_center + dom.scale
        else:
            lo = dom.effective_center - dom.half_widths
            hi = dom.effective_center + dom.half_widths
        span = hi - lo
        h = max(float(cell), float(span.max()) / 128.0)
        dims = np.maximum(np.ceil(span / h).astype(np.int64), 1)
        idx = np.clip(np.floor((pos - lo) / h).astype(np.int64), 0, dims - 1)
        cid = idx[:, 0] + dims[0] * (idx[:, 1] + dims[1] * idx[:, 2])
        order = np.argsort(cid, kind="stable")
        self._spos = np.ascontiguousarray(pos[order])
        self._sq = np.ascontiguousarray(config.charges[order])
        ncell = int(np.prod(dims))
        self._starts = np.searchsorted(cid[order], np.arange(ncell + 1)).astype(np.int64)
        self._origin = lo.astype(float)
        self._h = h
        self._dims = dims

    def field_at(self, x):
        x = np.asarray(x, dtype=float)
        fx, fy, fz, bad = _cell_sum(self._spos, self._sq, self._starts, self.family.kind,
                                    self._params, self.part, x)
        if bad:
            raise CoincidentPointError(f"evaluation point {x} coincides with a scatterer")
        f = np.array([fx, fy, fz])
        if self.mode == BACKGROUND:
            f += background_term(self.family, self.config.domain, self.law, x)
        return f

    def nearest_distance(self, x, radius):
        return _nearest(self._spos, self._starts, self._origin, self._h, self._dims,
                        np.asarray(x, dtype=float), float(radius))


def field_at(ev, x):
    return ev.field_at(x)


# ---------------------------------------------------------------------------
# Monte Carlo field samples


@njit(cache=True)
def _mc_fields(keys, counts, shape, center, half, cum, charges, kind, p, part, points):
    nconf = keys.shape[0]
    J = points.shape[0]
    out = np.zeros((nconf, J, 3))
    bad = np.zeros(nconf, dtype=np.bool_)
    for c in range(nconf):
        key = keys[c]
        for i in range(counts[c]):
            if shape == BALL:
                x, y, z = ball_point(key, i, half[0])
            else:
                x, y, z = box_point(key, i, half[0], half[1], half[2])
            x += center[0]
            y += center[1]
            z += center[2]
            q = point_charge(key, i, cum, charges)
            for k in range(J):
                dx = points[k, 0] - x
                dy = points[k, 1] - y
                dz = points[k, 2] - z
                if dx * dx + dy * dy + dz * dz < COINCIDENT_TOL**2:
                    bad[c] = True
                    continue
                a, b, cc = _pair(kind, p, part, dx, dy, dz, q)
                out[c, k, 0] += a
                out[c, k, 1] += b
                out[c, k, 2] += cc
    return out, bad


@njit(cache=True)
def _mc_power_ball(keys, counts, center, radius, cum, charges, coef, s, points):
    """Specialized kernel for a pure power law on a ball: force coef*q*d/|d|^(s+2)."""
    nconf = keys.shape[0]
    J = points.shape[0]
    out = np.zeros((nconf, J, 3))
    bad = np.zeros(nconf, dtype=np.bool_)
    tol2 = COINCIDENT_TOL**2
    coulomb = s == 1.0
    ex = -0.5 * s - 1.0
    for c in range(nconf):
        key = keys[c]
        acc = np.zeros((J, 3))
        for i in range(counts[c]):
            x, y, z = ball_point(key, i, radius)
            x += center[0]
            y += center[1]
            z += center[2]
            q = coef * point_charge(key, i, cum, charges)
            for k in range(J):
                dx = points[k, 0] - x
                dy = points[k, 1] - y
                dz = points[k, 2] - z
                r2 = dx * dx + dy * dy + dz * dz
                if r2 < tol2:
                    bad[c] = True
                    continue
                if coulomb:
                    w = q / (r2 * np.sqrt(r2))
                else:
                    w = q * r2**ex
                acc[k, 0] += w * dx
                acc[k, 1] += w * dy
                acc[k, 2] += w * dz
        out[c] = acc
    return out, bad


def _run_kernel(keys, counts, shape, center, half, cum, ch, kind, p, part, points):
    if shape == BALL and kind == KIND_POWER and part == PART_FULL and p[P_C] == 0.0:
        s = p[P_S]
        coef = s * p[P_A] * p[P_EPS] ** s
        return _mc_power_ball(keys, counts, center, half[0], cum, ch, coef, s, points)
    return _mc_fields(keys, counts, shape, center, half, cum, ch, kind, p, part, points)


def _config_streams(seed, indices, mean, attempt=0):
    keys = np.empty(len(indices), dtype=np.uint64)
    counts = np.empty(len(indices), dtype=np.int64)
    for j, k in enumerate(indices):
        sk = derive_seed(seed, k) if attempt == 0 else derive_seed(derive_seed(seed, k), attempt)
        ku, kc = stream_keys(sk)
        keys[j] = ku
        counts[j] = draw_count(kc, mean)
    return keys, counts


def _fields_chunk(args):
    family, law, domain, intensity, points, seed, lo, hi, part, M = args
    shape, half = _shape_arrays(domain)
    center = domain.effective_center.astype(float)
    cum = law.cumulative()
    ch = np.array(law.charges)
    kind, p = family.kind, family.params(M)
    idx = np.arange(lo, hi)
    keys, counts = _config_streams(seed, idx, intensity * domain.volume)
    out, bad = _run_kernel(keys, counts, shape, center, half, cum, ch, kind, p, part, points)
    n_resampled = 0
    attempt = 0
    while bad.any():
        attempt += 1
        n_resampled += int(bad.sum())
        redo = idx[bad]
        keys, counts = _config_streams(seed, redo, intensity * domain.volume, attempt)
        o2, b2 = _run_kernel(keys, counts, shape, center, half, cum, ch, kind, p, part, points)
        out[bad] = o2
        sel = np.flatnonzero(bad)
        bad[:] = False
        bad[sel[b2]] = True
    return out, n_resampled


@dataclass
class FieldSamples:
    fields: np.ndarray  # (n, J, 3)
    points: np.ndarray
    n_resampled: int
    R: float
    mode: str


def sample_fields(family, law, domain, points, n_samples, seed, mode=TRUNCATED,
                  intensity=1.0, workers=1, chunk=512, part=PART_FULL, M=None):
    """Field at each point for ``n_samples`` independent configurations.

    Configuration k uses seed ``derive_seed(seed, k)``; chunks are merged in
    index order, so the result does not depend on the worker count.
    """
    if isinstance(domain, (int, float)):
        domain = SamplingDomain.ball(float(domain))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    bounds = [(lo, min(lo + chunk, n_samples)) for lo in range(0, n_samples, chunk)]
    tasks = [(family, law, domain, intensity, points, seed, lo, hi, part, M) for lo, hi in bounds]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_fields_chunk, tasks))
    else:
        results = [_fields_chunk(t) for t in tasks]
    fields = np.concatenate([r[0] for r in results]) if results else np.zeros((0, len(points), 3))
    n_res = sum(r[1] for r in results)
    if n_samples and n_res / n_samples > MAX_RESAMPLE_RATE:
        raise RuntimeError(f"coincident-point resample rate {n_res / n_samples:.2%} too high")
    if mode == BACKGROUND:
        bg = np.array([background_term(family, domain, law, y) for y in points])
        fields = fields + bg[None]
    return FieldSamples(fields, points, n_res, domain.scale, mode)


# ---------------------------------------------------------------------------
# characteristic functions


@dataclass
class CharFnEstimate:
    probes: np.ndarray  # (P, J, 3)
    points: np.ndarray  # (J, 3)
    estimate: np.ndarray  # complex (P,)
    mc_error: np.ndarray  # (P,)
    n_samples: int
    R: float
    n_resampled: int = 0

    def to_csv_rows(self, case=""):
        rows = []
        for i, (eta, est, err) in enumerate(zip(self.probes, self.estimate, self.mc_error)):
            e = eta[0]
            rows.append((i, e[0], e[1], e[2], est.real, est.imag, err, self.n_samples, self.R, case))
        return rows


def _as_probes(probes, J):
    pr = np.asarray(probes, dtype=float)
    if pr.ndim == 1:
        pr = pr.reshape(1, 1, 3)
    elif pr.ndim == 2:
        pr = pr.reshape(-1, 1, 3) if J == 1 else pr.reshape(1, J, 3)
    if pr.shape[1] != J or pr.shape[2] != 3:
        raise ValueError("probes must have shape (P, J, 3)")
    return pr


def char_fn_from_samples(samples, probes):
    """Empirical characteristic function and its complex standard error."""
    F = samples.fields
    n = F.shape[0]
    pr = _as_probes(probes, F.shape[1])
    est = np.empty(len(pr), dtype=complex)
    err = np.empty(len(pr))
    for i, eta in enumerate(pr):
        if not np.any(eta):
            est[i] = 1.0
            err[i] = 0.0
            continue
        ph = np.einsum("njk,jk->n", F, eta)
        c, s = np.cos(ph), np.sin(ph)
        est[i] = complex(c.mean(), s.mean())
        err[i] = np.sqrt((c.var(ddof=1) + s.var(ddof=1)) / n)
    return CharFnEstimate(pr, samples.points, est, err, n, samples.R, samples.n_resampled)


def estimate_char_fn(family, law, R, points, probes, n_samples, seed, mode=TRUNCATED, workers=1):
    """Monte Carlo J-point characteristic function over fresh clouds in the ball RU."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if n_samples < 100:
        raise ValueError("n_samples must be at least 100")
    pr = _as_probes(probes, len(points))
    if not np.any(pr):
        P = len(pr)
        return CharFnEstimate(pr, points, np.ones(P, dtype=complex), np.zeros(P), n_samples, R)
    samples = sample_fields(family, law, SamplingDomain.ball(R), points, n_samples, seed, mode,
                            workers=workers)
    return char_fn_from_samples(samples, pr)


def _sinc(a):
    return np.sinc(a / np.pi)


def _radial_log_cf(family, law, eta_norm, rmax=None):
    """sum_j mu_j * integral over the ball |z| < rmax of (sin a/a - 1), a = Q_j |eta| |Phi'(r)|."""
    total = 0.0
    for Q, w in zip(law.charges, law.weights):
        if w == 0 or Q == 0:
            continue
        c = abs(Q) * eta_norm

        def f(t):
            r = np.exp(t)
            a = c * abs(family.profile(r)[1, 0])
            return 4.0 * np.pi * r**3 * (_sinc(a) - 1.0)

        # below r_a the oscillating sinc averages out; keep only the -1 term
        r_a = 0.0
        if family.singular:
            r_a = brent_radius(lambda r: c * abs(family.profile(r)[1, 0]) - 1e3, 1e-12, 1e6)
        ff = family.far_field
        big = rmax if rmax is not None else _tail_radius(family, c)
        lo = np.log(r_a) if r_a > 0 else np.log(1e-8 * max(big, 1.0))
        edges = np.linspace(lo, np.log(big), 40)
        val = -4.0 * np.pi * r_a**3 / 3.0
        err = 0.0
        for a, b in zip(edges[:-1], edges[1:]):
            v, e = integrate.quad(f, a, b, limit=200, epsabs=1e-13, epsrel=1e-11)
            val += v
            err += e
        if rmax is None and ff is not None:
            amp, s = ff
            val -= (4.0 * np.pi / 6.0) * (c * s * amp) ** 2 * big ** (1.0 - 2.0 * s) / (2.0 * s - 1.0)
        total += w * val
    return total


def brent_radius(g, lo, hi):
    from scipy.optimize import brentq

    if g(lo) * g(hi) > 0:
        return 0.0
    return float(np.exp(brentq(lambda lr: g(np.exp(lr)), np.log(lo), np.log(hi), xtol=1e-13)))


def _tail_radius(family, c):
    """Radius beyond which the small-argument expansion of sinc is exact to 1e-14."""
    r = 1.0
    for _ in range(200):
        a = c * abs(family.profile(r)[1, 0])
        if a < 1e-4 and r > 10.0 * max(family.collision_length, family.L, 1.0):
            return r
        r *= 2.0
    return r


def _gl(n, a, b):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (b + a), 0.5 * (b - a) * w


def _offcenter_shell(family, law, eta, y, R, mode, n=96):
    """Part of the ball |z| < R outside the ball |z - y| < R - |y|, by 2D Gauss rules."""
    d = float(np.linalg.norm(y))
    yh = y / d
    e_par = float(eta @ yh)
    e_perp = float(np.linalg.norm(eta - e_par * yh))
    rho, wr = _gl(n, R - d, R + d)
    total = 0.0 + 0.0j
    for Q, w in zip(law.charges, law.weights):
        for rk, wk in zip(rho, wr):
            b = Q * family.profile(rk)[1, 0]
            cmax = (R * R - d * d - rk * rk) / (2.0 * d * rk)
            cmax = min(1.0, max(-1.0, cmax))
            mu, wm = _gl(n, -1.0, cmax)
            ang = np.exp(1j * b * e_par * mu) * special.j0(b * e_perp * np.sqrt(1.0 - mu * mu)) - 1.0
            if mode == BACKGROUND:
                ang = ang - 1j * b * e_par * mu
            total += w * wk * rk * rk * 2.0 * np.pi * np.sum(wm * ang)
    return total


def analytic_char_fn(family, law, probes, points, R=None, mode=TRUNCATED, xi=None, n_quad=48):
    """Characteristic function of the field from the Poisson exponential formula.

    ``R=None`` gives the infinite-volume limit. A finite ``R`` gives the exact
    characteristic function for the cloud in the ball |z| < R centered at the
    origin (one probe point only). The mean-field factor of non-neutral
    Coulomb clouds is included in the limit; it vanishes in the other cases.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    J = len(points)
    pr = _as_probes(probes, J)
    out = np.empty(len(pr), dtype=complex)
    for i, eta in enumerate(pr):
        if not np.any(eta):
            out[i] = 1.0
            continue
        if J == 1:
            y = points[0]
            e = eta[0]
            en = float(np.linalg.norm(e))
            if R is None:
                lg = _radial_log_cf(family, law, en)
                mf = limit_mean_field(family, law, y, mode)
                out[i] = np.exp(1j * (e @ mf) + lg)
            else:
                d = float(np.linalg.norm(y))
                lg = _radial_log_cf(family, law, en, rmax=R - d)
                if d > 0:
                    lg = lg + _offcenter_shell(family, law, e, y, R, mode)
                out[i] = np.exp(lg)
        else:
            if R is not None:
                raise NotImplementedError("finite-R analytic values support one point only")
            out[i] = np.exp(_multi_point_log_cf(family, law, eta, points, xi, n_quad))
    return out


def limit_mean_field(family, law, x, mode=TRUNCATED):
    """Infinite-volume mean field: nonzero only for non-neutral Coulomb clouds."""
    if mode == BACKGROUND:
        return np.zeros(3)
    if family.variant == "power" and family.s == 1.0 and abs(law.mean_charge) > 1e-12:
        return mean_field_coulomb(law, x, A=family.far_field[0]).value
    return np.zeros(3)


def default_xi(family):
    """Cutoff xi: quintic step from 0 at |y|<=1/2 to 1 at |y|>=1 when grad Phi is not integrable at 0."""
    if family.singular and family.far_field is not None and family.variant == "power" and family.s >= 2.0:
        def xi(r):
            u = np.clip(2.0 * r - 1.0, 0.0, 1.0)
            return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)
        return xi
    return lambda r: np.ones_like(r)


def _sphere_rule(nmu, nphi):
    mu, wm = _gl(nmu, -1.0, 1.0)
    ph = 2.0 * np.pi * np.arange(nphi) / nphi
    st = np.sqrt(1.0 - mu * mu)
    u = np.stack([np.outer(st, np.cos(ph)), np.outer(st, np.sin(ph)), np.outer(mu, np.ones(nphi))], -1)
    w = np.outer(wm, np.full(nphi, 2.0 * np.pi / nphi))
    return u.reshape(-1, 3), w.reshape(-1)


def _multi_point_log_cf(family, law, eta, points, xi, n):
    """3D quadrature of the exponent with a smooth partition of unity around each point."""
    xi = xi or default_xi(family)
    J = len(points)
    sep = np.inf
    for a in range(J):
        for b in range(a + 1, J):
            sep = min(sep, np.linalg.norm(points[a] - points[b]))
    rho = 0.25 * sep if np.isfinite(sep) else 1.0
    u, wu = _sphere_rule(n, 2 * n)

    def integrand(z):
        # z: (m, 3)
        val = np.zeros(len(z), dtype=complex)
        for Q, w in zip(law.charges, law.weights):
            phase = np.zeros(len(z))
            lin = np.zeros(len(z))
            for k in range(J):
                dvec = points[k] - z
                r = np.linalg.norm(dvec, axis=1)
                d1 = family.profile(r)[1]
                grad = d1[:, None] * dvec / r[:, None]
                b = -Q * grad @ eta[k]
                phase += b
                lin += b * xi(r)
            val += w * (np.exp(1j * phase) - 1.0 - 1j * lin)
        return val

    def bump(r):
        t = np.clip(r / rho - 1.0, 0.0, 1.0)
        return 1.0 - t**3 * (10.0 - 15.0 * t + 6.0 * t * t)

    def weight_near(z, k):
        return bump(np.linalg.norm(z - points[k], axis=1))

    def weight_far(z):
        w = np.ones(len(z))
        for k in range(J):
            w -= weight_near(z, k)
        return w

    total = 0.0 + 0.0j
    # balls around each point, radial nodes clustered at the singular center
    t, wt = _gl(n, 0.0, 1.0)
    for k in range(J):
        r = 2.0 * rho * t**3
        wr = 2.0 * rho * 3.0 * t**2 * wt
        for rk, wk in zip(r, wr):
            z = points[k] + rk * u
            total += wk * rk * rk * np.sum(wu * weight_near(z, k) * integrand(z))
    # the rest in shells around the centroid, r = r1 / tau**2 on the outer part
    c0 = points.mean(axis=0)
    r1 = 2.0 * rho + np.max(np.linalg.norm(points - c0, axis=1))
    r_in, w_in = _gl(2 * n, 0.0, r1)
    for rk, wk in zip(r_in, w_in):
        z = c0 + rk * u
        total += wk * rk * rk * np.sum(wu * weight_far(z) * integrand(z))
    tau, wtau = _gl(2 * n, 0.0, 1.0)
    r_out = r1 / tau**2
    w_out = 2.0 * r1 / tau**3 * wtau
    for rk, wk in zip(r_out, w_out):
        z = c0 + rk * u
        total += wk * rk * rk * np.sum(wu * weight_far(z) * integrand(z))
    return total


# ---------------------------------------------------------------------------
# mean fields


@dataclass
class MeanFieldResult:
    value: np.ndarray
    quadrature_check: np.ndarray
    note: str = ""


def sphere_surface_moment(e, s, n=64):
    """Integral over the unit sphere of (e.y) n(y) / |y|^(s+2) dS by a product Gauss rule."""
    u, w = _sphere_rule(n, 2 * n)
    return (w * (u @ np.asarray(e, dtype=float))) @ u


def mean_field_displaced(family, e, x=(0.0, 0.0, 0.0)):
    """Limit mean field at x of the cloud in the displaced ball R U - R**(s-1) e.

    With the force -Q grad Phi the closed form is +A s (4 pi / 3) e for the
    unit ball (repulsive scatterers push away from the side with more mass).
    """
    ff = family.far_field
    if ff is None or not (1.0 < ff[1] < 2.0):
        raise ValueError("displaced-domain mean field requires 1 < s < 2")
    amp, s = ff
    e = np.asarray(e, dtype=float)
    value = amp * s * (4.0 * np.pi / 3.0) * e
    check = amp * s * sphere_surface_moment(e, s)
    return MeanFieldResult(value, check)


def mean_field_coulomb(law, x, A=1.0):
    """Limit mean field of a Coulomb cloud in the unit-ball geometry: A q_bar (4 pi / 3) x."""
    x = np.asarray(x, dtype=float)
    qbar = law.mean_charge
    u, w = _sphere_rule(64, 128)
    check = A * qbar * ((w * (u @ x)) @ u)
    if abs(qbar) <= 1e-12:
        return MeanFieldResult(np.zeros(3), check, "neutral law: mean field vanishes")
    return MeanFieldResult(A * qbar * (4.0 * np.pi / 3.0) * x, check)


def mean_field_mc(family, law, domain, x, n_samples, seed, exclude=1.0, workers=1):
    """MC mean of the field at x, dropping scatterers within ``exclude`` of x.

    A ball around x that lies inside the domain contributes zero mean by
    symmetry, so removing it leaves the mean unchanged and tames the heavy
    near-field tail. Returns (mean, standard error).
    """
    x = np.asarray(x, dtype=float)
    full = sample_fields(family, law, domain, x[None], n_samples, seed, workers=workers)
    near = _near_part_samples(family, law, domain, x, n_samples, seed, exclude)
    F = full.fields[:, 0, :] - near
    return F.mean(axis=0), F.std(axis=0, ddof=1) / np.sqrt(n_samples)


@njit(cache=True)
def _near_kernel(keys, counts, center, radius, cum, charges, kind, p, x, excl):
    n = keys.shape[0]
    out = np.zeros((n, 3))
    for c in range(n):
        key = keys[c]
        for i in range(counts[c]):
            a, b, cc = ball_point(key, i, radius)
            dx = x[0] - (a + center[0])
            dy = x[1] - (b + center[1])
            dz = x[2] - (cc + center[2])
            if dx * dx + dy * dy + dz * dz < excl * excl:
                q = point_charge(key, i, cum, charges)
                f0, f1, f2 = _pair(kind, p, PART_FULL, dx, dy, dz, q)
                out[c, 0] += f0
                out[c, 1] += f1
                out[c, 2] += f2
    return out


def _near_part_samples(family, law, domain, x, n_samples, seed, exclude):
    if not domain.is_ball:
        raise UnsupportedDomainError("exclusion estimator requires a ball domain")
    keys, counts = _config_streams(seed, np.arange(n_samples), domain.volume)
    return _near_kernel(keys, counts, domain.effective_center.astype(float), domain.scale,
                        law.cumulative(), np.array(law.charges), family.kind, family.params(),
                        np.asarray(x, dtype=float), float(exclude))


# ---------------------------------------------------------------------------
# Gauss flux


def _point_flux(a, dist, n=None):
    """Flux of (y - p)/|y - p|^3 through a sphere of radius a whose center is ``dist`` from p.

    Axisymmetric about the line center-p, so one quadrature in the polar
    cosine suffices; the near-surface peak is handled adaptively.
    """
    if dist == 0.0:
        return 4.0 * np.pi

    def g(mu):
        # y = a n, p at distance dist along the pole
        r2 = a * a + dist * dist - 2.0 * a * dist * mu
        return 2.0 * np.pi * a * a * (a - dist * mu) / r2**1.5

    width = abs(a - dist) / a
    pts = [1.0 - width] if 0 < width < 1 else None
    val = integrate.quad(g, -1.0, 1.0, points=pts, limit=500, epsabs=1e-12, epsrel=1e-11)[0]
    return val


def gauss_flux(ev, center, a, clearance=1e-6):
    """Outward flux of the field through the sphere |y - center| = a."""
    center = np.asarray(center, dtype=float)
    fam = ev.family
    if not (fam.variant == "power" and fam.s == 1.0 and fam.C == 0.0):
        raise ValueError("gauss_flux requires the Coulomb family")
    pos = ev.config.positions
    d = np.linalg.norm(pos - center, axis=1) if len(pos) else np.zeros(0)
    if np.any(np.abs(d - a) < clearance):
        raise SurfaceProximityError("a scatterer lies within the clearance of the sphere")
    amp = fam.far_field[0]
    total = 0.0
    for qn, dn in zip(ev.config.charges, d):
        total += qn * amp * _point_flux(a, float(dn))
    if ev.mode == BACKGROUND:
        u, w = _sphere_rule(32, 64)
        ys = center + a * u
        bg = np.array([background_term(fam, ev.config.domain, ev.law, y) for y in ys])
        total += a * a * np.sum(w * np.einsum("ij,ij->i", bg, u))
    return float(total)


# ---------------------------------------------------------------------------
# tail of |F|


@dataclass
class TailFit:
    slope: float
    stderr: float
    n_tail: int
    threshold: float
    binned_slope: float


def tail_slope(norms, decades=2.0, n_bins=12):
    """Log-log slope of the density of |F| over its top ``decades`` decades.

    The primary estimate is the maximum-likelihood Pareto exponent of the
    values above max/10^decades (density slope -(1 + alpha)); a weighted
    least-squares fit to log-binned densities is reported alongside.
    """
    x = np.sort(np.asarray(norms, dtype=float))
    x = x[np.isfinite(x) & (x > 0)]
    lo = x[-1] / 10.0**decades
    tail = x[x >= lo]
    k = len(tail)
    if k < 10:
        raise ValueError("too few samples in the tail")
    alpha = k / np.sum(np.log(tail / lo))
    slope = -(1.0 + alpha)
    err = alpha / np.sqrt(k)
    edges = np.geomspace(lo, x[-1] * (1 + 1e-12), n_bins + 1)
    counts, _ = np.histogram(tail, edges)
    dens = counts / (np.diff(edges) * len(x))
    mid = np.sqrt(edges[:-1] * edges[1:])
    ok = counts > 0
    w = np.sqrt(counts[ok])
    binned = np.polyfit(np.log(mid[ok]), np.log(dens[ok]), 1, w=w)[0]
    return TailFit(float(slope), float(err), int(k), float(lo), float(binned))
