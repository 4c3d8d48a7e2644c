"""Kinetic time scales: the deflection variance sigma(T; eps), T_L, W_s and regimes.

For a straight path x = v t, |v| = 1, the deflection accumulated by the far
part Phi_L over [0, T] has, per unit charge second moment, the covariance
quadratic form

    theta -> int dy (theta . int_0^T grad Phi_L(v t - y) dt)^2.

By radial symmetry it is diagonal with one eigenvalue along v and a double
one across v. Both are evaluated in Fourier space:

    sigma_perp(T) = 16 int_0^inf U(k)^2 P(k T / 2) dk,
    sigma_par(T)  = 16 int_0^inf U(k)^2 (1 - sin(kT)/(kT)) dk,

with U(k) = int_0^inf r Phi_L(r) sin(k r) dr (so the 3D transform of Phi_L
is 4 pi U(k)/k) and P(a) = a Si(2a) - sin^2 a - 1/2 + sin(2a)/(4a). The
radial sine transform of slowly decaying power tails is only conditionally
convergent; it is computed on Gauss-Legendre panels up to a crossover radius
X >= 20/k and on the rotated contour X + i t beyond it, where the integrand
decays like exp(-k t).
"""

import functools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import integrate, optimize, special

from .potentials import KIND_EXPO, KIND_GAUSS, KIND_POWER, P_A, P_B, P_C, P_EPS, P_R, P_RHO, P_S, P_XC, PART_FAR, radial

log = logging.getLogger(__name__)

T_MAX = 1e12
PANELS_PER_DECADE = 16
CONTOUR_C = 20.0

BOLTZMANN, LANDAU, BOLTZMANN_LANDAU, CORRELATED, INCONCLUSIVE = (
    "Boltzmann", "Landau", "BoltzmannLandau", "Correlated", "Inconclusive",
)

# ---------------------------------------------------------------------------
# angular kernels


def perp_kernel(a):
    """P(a) = int_0^1 (1 - mu^2) sin^2(a mu) / mu^2 dmu."""
    a = np.asarray(a, dtype=float)
    out = np.empty_like(a)
    small = a < 1.0
    x = a[small]
    # alternating series, 14 terms reach 1e-17 for a < 1
    acc = np.zeros_like(x)
    term_pow = np.ones_like(x)
    fact = 1.0
    for n in range(1, 15):
        term_pow = term_pow * (2.0 * x) ** 2
        fact *= (2 * n - 1) * (2 * n)
        acc += (-1) ** (n + 1) * term_pow / (fact * (2 * n - 1) * (2 * n + 1))
    out[small] = acc
    y = a[~small]
    si = special.sici(2.0 * y)[0]
    out[~small] = y * si - np.sin(y) ** 2 - 0.5 + np.sin(2.0 * y) / (4.0 * y)
    return out


def par_kernel(b):
    """1 - sin(b)/b with a series near 0."""
    b = np.asarray(b, dtype=float)
    out = np.empty_like(b)
    small = b < 0.1
    x2 = b[small] ** 2
    out[small] = x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0)))
    y = b[~small]
    out[~small] = 1.0 - np.sin(y) / y
    return out


def _septic_step(x, a, b):
    t = np.clip((x - a) / (b - a), 0.0, 1.0)
    return t**4 * (35.0 - 84.0 * t + 70.0 * t * t - 20.0 * t**3)


def power_transform_constant(s):
    """G_s with int_0^inf r^(1-s) sin(k r) dr = G_s k^(s-2) (Abel sense), 0 < s < 3."""
    return np.sqrt(np.pi) * 2.0 ** (1.0 - s) * special.gamma((3.0 - s) / 2.0) / special.gamma(s / 2.0)


# ---------------------------------------------------------------------------
# radial sine transform of r Phi_L


_GL_SIZES = np.array([8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256, 384, 512, 768, 1024, 1536,
                      2048, 3072, 4096, 6144, 8192])


@functools.lru_cache(maxsize=None)
def _gl_table():
    """Gauss-Legendre rules of every size in _GL_SIZES (rows zero-padded), plus a Laguerre rule."""
    nmax = _GL_SIZES[-1]
    X = np.zeros((len(_GL_SIZES), nmax))
    W = np.zeros((len(_GL_SIZES), nmax))
    for i, n in enumerate(_GL_SIZES):
        x, w = special.roots_legendre(int(n))
        X[i, :n] = x
        W[i, :n] = w
    lag_x, lag_w = special.roots_laguerre(48)
    return X, W, lag_x, lag_w


@njit(cache=True)
def _h_complex(kind, p, z):
    """z * Phi(z) on the complex plane for the power-type profiles."""
    if kind == KIND_POWER:
        v = p[P_A] * p[P_EPS] ** p[P_S] * z ** (-p[P_S])
        if p[P_C] != 0.0:
            v += p[P_C] * p[P_EPS] ** p[P_RHO] * z ** (-p[P_RHO])
        return z * v
    r = p[P_R]
    return z * p[P_EPS] * p[P_B] * z ** (-r) * (1.0 + z / p[P_XC]) ** (r - p[P_S])


@njit(cache=True)
def _sine_transform(kind, p, ell, r_first, ks, sizes, glx, glw, lag_x, lag_w, c):
    out = np.empty(ks.shape[0])
    for i in range(ks.shape[0]):
        k = ks[i]
        if ell > 0.0:
            lo, hi, x0 = ell, 2.0 * ell, 2.0 * ell
        else:
            lo, hi, x0 = 0.0, r_first, r_first
        X = max(x0, c / k)
        total = 0.0
        while lo < X:
            if hi > X:
                hi = X
            need = 12.0 + 1.0 * k * (hi - lo)
            row = sizes.shape[0] - 1
            for j in range(sizes.shape[0]):
                if sizes[j] >= need:
                    row = j
                    break
            n = sizes[row]
            half = 0.5 * (hi - lo)
            mid = 0.5 * (hi + lo)
            acc = 0.0
            for m in range(n):
                r = mid + half * glx[row, m]
                f0 = radial(kind, p, PART_FAR, r)[0]
                acc += glw[row, m] * r * f0 * np.sin(k * r)
            total += half * acc
            lo = hi
            hi = 2.0 * hi
        tail = 0.0 + 0.0j
        for m in range(lag_x.shape[0]):
            z = X + 1j * lag_x[m] / k
            tail += lag_w[m] * _h_complex(kind, p, z)
        total += (np.exp(1j * k * X) * 1j / k * tail).imag
        out[i] = total
    return out


def fourier_amplitude(family, k, M=None):
    """U(k) = int_0^inf r Phi_L(r) sin(k r) dr for the far part of ``family``.

    The 3D Fourier transform of Phi_L is 4 pi U(k) / k. Closed forms are used
    for the Gaussian and exponential profiles.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    if np.any(k <= 0):
        raise ValueError("wavenumbers must be positive")
    kind = family.kind
    if kind == KIND_GAUSS:
        L = family.L
        return family.eps * np.sqrt(np.pi) * L**3 * k * np.exp(-0.25 * (k * L) ** 2) / 4.0
    if kind == KIND_EXPO:
        L = family.L
        return 2.0 * family.eps * L**3 * k / (1.0 + (k * L) ** 2) ** 2
    p = family.params(M)
    ell = (family.M if M is None else M) * family.collision_length
    r_first = 0.0 if ell > 0 else 0.05 * min(family.x_c, 1.0)
    glx, glw, lag_x, lag_w = _gl_table()
    return _sine_transform(kind, p, ell, r_first, k, _GL_SIZES, glx, glw, lag_x, lag_w, CONTOUR_C)


# ---------------------------------------------------------------------------
# sigma


class QuadratureFailure(RuntimeError):
    def __init__(self, msg, achieved):
        super().__init__(f"{msg} (achieved {achieved:.3g})")
        self.achieved = achieved


@dataclass
class SigmaEvaluator:
    """sigma(T; eps) for one family, cutoff scale M and unit speed.

    U is tabulated lazily on a fixed lattice of log-k panels (16 per decade,
    8 Gauss nodes each) and reused for every T.
    """

    family: object
    M: float = None
    v: tuple = (0.0, 0.0, 1.0)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.M is None:
            self.M = self.family.M
        if abs(np.linalg.norm(self.v) - 1.0) > 1e-12:
            raise ValueError("sigma is defined for unit speed")
        f = self.family
        self.ell = self.M * f.collision_length
        ff = f.far_field
        self.far = ff  # (amplitude, s) or None
        scales = [self.ell]
        if f.variant == "weak_amp":
            scales.append(f.x_c)
        if f.variant == "weak_wide":
            scales.append(f.L)
        if f.variant == "power" and f.C != 0:
            scales.append(f.eps)
        self.struct_max = max(x for x in scales if x > 0)
        small = [x for x in scales if x > 0]
        lo_scale = min(small)
        if f.kind == KIND_GAUSS:
            self.k_hi = 16.0 / f.L
        else:
            self.k_hi = 3000.0 / lo_scale
        self._nodes, self._weights = np.polynomial.legendre.leggauss(8)

    def _panel(self, j):
        got = self._cache.get(j)
        if got is None:
            a = j / PANELS_PER_DECADE
            b = (j + 1) / PANELS_PER_DECADE
            x = 0.5 * (b - a) * self._nodes + 0.5 * (a + b)
            k = 10.0**x
            w = 0.5 * (b - a) * self._weights * np.log(10.0) * k
            u = fourier_amplitude(self.family, k, self.M)
            got = (k, w, u)
            self._cache[j] = got
        return got

    def _k_lo(self, T):
        return 1e-4 * min(1.0 / max(T, 1e-300), 1.0 / self.struct_max)

    def _lattice(self, T):
        j0 = int(np.floor(PANELS_PER_DECADE * np.log10(self._k_lo(T))))
        j1 = int(np.ceil(PANELS_PER_DECADE * np.log10(self.k_hi)))
        parts = [self._panel(j) for j in range(j0, j1)]
        k = np.concatenate([q[0] for q in parts])
        w = np.concatenate([q[1] for q in parts])
        u = np.concatenate([q[2] for q in parts])
        return 10.0 ** (j0 / PANELS_PER_DECADE), k, w, u

    def components(self, T):
        """(perpendicular, parallel) eigenvalues of the deflection quadratic form."""
        T = float(T)
        if T < 0:
            raise ValueError("T must be nonnegative")
        if T == 0.0:
            return 0.0, 0.0
        k_lo, k, w, u = self._lattice(T)
        u2 = u * u
        b = k * T
        perp = 16.0 * np.sum(w * u2 * perp_kernel(0.5 * b))
        # the oscillating part of the parallel kernel is switched off beyond kT ~ 24,
        # where its integral against the smooth U^2 is below 1e-6 of the total
        sinc = np.where(b > 0.1, np.sin(b) / np.maximum(b, 1e-300), 1.0 - b * b / 6.0)
        par_k = np.where(b < 0.1, par_kernel(b), 1.0 - sinc * (1.0 - _septic_step(b, 8.0, 24.0)))
        par = 16.0 * np.sum(w * u2 * par_k)
        if self.far is not None:
            amp, s = self.far
            g2 = (amp * power_transform_constant(s)) ** 2
            base = k_lo ** (2.0 * s - 1.0) / (2.0 * s - 1.0)
            perp += 16.0 * g2 * (2.0 / 3.0) * (0.5 * T) ** 2 * base
            par += 16.0 * g2 * T * T / 6.0 * base
        return float(perp), float(par)

    def sigma(self, T):
        return max(self.components(T))

    def __call__(self, T):
        return self.sigma(T)


def sigma(ev, T, eps=None):
    """sup over unit theta of the deflection quadratic form over [0, T]."""
    if eps is not None and eps != ev.family.eps:
        ev = SigmaEvaluator(ev.family.with_eps(eps), ev.M, ev.v)
    return ev.sigma(T)


def solve_TL(ev, eps=None, T_max=T_MAX, rtol=1e-10):
    """Root of sigma(T) = 1 by log-scale bracketing; inf if sigma(T_max) < 1."""
    if eps is not None and eps != ev.family.eps:
        ev = SigmaEvaluator(ev.family.with_eps(eps), ev.M, ev.v)
    if ev.sigma(T_max) < 1.0:
        return np.inf
    hi = T_max
    lo = T_max
    while ev.sigma(lo) >= 1.0:
        hi = lo
        lo = lo / 10.0
        if lo < 1e-30:
            raise QuadratureFailure("sigma does not fall below 1 as T -> 0", lo)
    f = lambda lt: np.log(ev.sigma(np.exp(lt)))
    lt = optimize.brentq(f, np.log(lo), np.log(hi), xtol=1e-14, rtol=rtol)
    return float(np.exp(lt))


# ---------------------------------------------------------------------------
# W_s


@dataclass
class WsResult:
    value: float
    perp: float
    par: float


def compute_Ws(s):
    """Constant W_s with sigma(T) ~ W_s A^2 eps^(2s) T^(3-2s) for 1/2 < s < 1.

    Returns the larger of the two symmetry eigenvalues and both of them:
    W_perp = 16 G_s^2 2^(2s-3) int a^(2s-4) P(a) da and
    W_par = 16 G_s^2 int b^(2s-4) (1 - sin b / b) db.
    """
    if not 0.5 < s < 1.0:
        raise ValueError("W_s is defined for 1/2 < s < 1")
    g2 = 16.0 * power_transform_constant(s) ** 2
    p = 2.0 * s - 4.0
    a0 = 40.0

    # perpendicular: exact part on (0, a0], asymptote pi a / 2 - 1 plus an
    # oscillating remainder of order a^(2s-5) beyond
    f = lambda a: a**p * perp_kernel(np.array([a]))[0]
    head = integrate.quad(f, 0.0, 1.0, epsabs=0, epsrel=1e-12, limit=200)[0]
    head += integrate.quad(f, 1.0, a0, epsabs=0, epsrel=1e-12, limit=400)[0]
    asym = 0.5 * np.pi * a0 ** (p + 2.0) / -(p + 2.0) - a0 ** (p + 1.0) / -(p + 1.0)
    rem = lambda a: a**p * (perp_kernel(np.array([a]))[0] - (0.5 * np.pi * a - 1.0))
    tail = _oscillatory_tail(rem, a0)
    w_perp = g2 * 2.0 ** (2.0 * s - 3.0) * (head + asym + tail)

    fb = lambda b: b**p * par_kernel(np.array([b]))[0]
    head = integrate.quad(fb, 0.0, 1.0, epsabs=0, epsrel=1e-12, limit=200)[0]
    head += integrate.quad(fb, 1.0, a0, epsabs=0, epsrel=1e-12, limit=400)[0]
    asym = a0 ** (p + 1.0) / -(p + 1.0)
    # -b^(p-1) sin b on (a0, inf) with QAWF
    osc = -integrate.quad(lambda b: b ** (p - 1.0), a0, np.inf, weight="sin", wvar=1.0)[0]
    w_par = g2 * (head + asym + osc)
    return WsResult(max(w_perp, w_par), w_perp, w_par)


def _oscillatory_tail(g, a0, periods=200):
    """int_a0^inf g(a) da for a remainder oscillating with period pi.

    The remainder decays like a^(2s-5); beyond ``periods`` periods past a0 = 40
    it contributes below 1e-9 relative and is dropped.
    """
    b = a0 + np.pi * periods
    return integrate.quad(g, a0, b, epsabs=1e-14, epsrel=1e-10, limit=4 * periods)[0]


# ---------------------------------------------------------------------------
# classification


def boltzmann_grad_time(family):
    lam = family.collision_length
    return np.inf if lam == 0 else 1.0 / lam**2


def much_less(ratios, final=0.1):
    """X << Y on an eps grid: X/Y strictly decreasing and the last ratio below ``final``."""
    r = np.asarray(ratios, dtype=float)
    return bool(np.all(np.diff(r) < 0) and r[-1] < final)


def delta_vanishes(deltas, final=0.05):
    """delta(M) -> 0 on the M grid (doubling steps).

    Strictly decreasing, and either small at the largest M or shrinking by at
    least sqrt(2) per doubling of M (a power law in M with exponent >= 1/2).
    """
    d = np.asarray(deltas, dtype=float)
    if not np.all(np.diff(d) < 0):
        return False
    return bool(d[-1] < final or np.all(d[1:] / d[:-1] <= 1.0 / np.sqrt(2.0)))


@dataclass
class RegimeReport:
    lambda_eps: list
    T_BG: list
    T_L: list
    sigma_at_TBG: dict
    classification: str
    eps_grid: list
    M_grid: list
    correlation: list = None
    residuals: dict = field(default_factory=dict)

    def to_json(self):
        def clean(x):
            if isinstance(x, (list, tuple)):
                return [clean(y) for y in x]
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, float) and not np.isfinite(x):
                return "inf" if x > 0 else "-inf"
            return x

        return json.dumps(clean({
            "lambda_eps": self.lambda_eps, "T_BG": self.T_BG, "T_L": self.T_L,
            "sigma_at_TBG": self.sigma_at_TBG, "classification": self.classification,
            "eps_grid": self.eps_grid, "M_grid": self.M_grid,
            "correlation": self.correlation, "residuals": self.residuals,
        }), sort_keys=True)


def classify(family, eps_grid=(1e-4, 2.5e-5, 6.25e-6), M_grid=(5.0, 10.0, 20.0, 40.0),
             correlation_flag=None, T_max=np.inf):
    """Kinetic regime of a family from T_BG, T_L and delta(M) on finite grids.

    ``correlation_flag(ev, T_L)`` returns the normalized correlation of
    consecutive deflection windows; by default the Fourier evaluation in
    :mod:`holtsmark.dynamics` is used. The rules, in order:

    * T_L << T_BG: Correlated if the window correlation exceeds 0.1 at every
      eps, else Landau;
    * delta(M) = sigma(T_BG; eps_min) vanishes with M: Boltzmann;
    * T_L / T_BG within a factor 2 across the grid: BoltzmannLandau;
    * otherwise Inconclusive.
    """
    if correlation_flag is None:
        from .dynamics import window_correlation

        correlation_flag = window_correlation
    eps_grid = [float(e) for e in eps_grid]
    M_grid = [float(m) for m in M_grid]
    lams, tbg, tl, corr = [], [], [], []
    for e in eps_grid:
        f = family.with_eps(e)
        ev = SigmaEvaluator(f)
        lams.append(f.collision_length)
        tbg.append(boltzmann_grad_time(f))
        T_L = solve_TL(ev, T_max=min(T_max, 1e40))
        tl.append(T_L)
        corr.append(float(correlation_flag(ev, T_L)) if np.isfinite(T_L) else 0.0)
    f_min = family.with_eps(eps_grid[-1])
    deltas = {}
    if np.isfinite(tbg[-1]):
        for M in M_grid:
            deltas[M] = SigmaEvaluator(f_min, M).sigma(tbg[-1])
    ratios = [a / b if np.isfinite(b) else 0.0 for a, b in zip(tl, tbg)]
    res = {"TL_over_TBG": ratios, "delta_M": list(deltas.values())}
    corr_on = all(c > 0.1 for c in corr)
    if not np.isfinite(tbg[-1]) or much_less(ratios):
        cls = CORRELATED if corr_on else LANDAU
    elif deltas and delta_vanishes(list(deltas.values())):
        cls = BOLTZMANN
    elif all(np.isfinite(ratios)) and max(ratios) / min(ratios) < 2.0:
        cls = BOLTZMANN_LANDAU
    else:
        cls = INCONCLUSIVE
    return RegimeReport(lams, tbg, tl, {str(k): v for k, v in deltas.items()}, cls,
                        eps_grid, M_grid, corr, res)
