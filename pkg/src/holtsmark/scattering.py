"""Classical two-body scattering off a radial potential and the Boltzmann kernel.

Lengths are in units of the collision length, so the near part of a family
becomes a fixed profile psi(y). A particle of unit mass with asymptotic speed
V and impact parameter b, moving in the potential Q psi, is deflected by

    chi(b) = pi - 2 int_{r*}^inf b dr / (r^2 sqrt(F(r))),
    F(r)   = 1 - b^2/r^2 - 2 Q psi(r) / V^2,

with r* the largest zero of F. chi > 0 means a repulsive deflection. Only
the combination Q / V^2 enters, so problems are stored in the canonical form
(sign of Q, V / sqrt|Q|).
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .potentials import PART_NEAR

log = logging.getLogger(__name__)


class CaptureError(ValueError):
    """The orbit falls into the origin: F stays positive all the way in."""


class OrbitingError(ValueError):
    """F has a double zero at the turning point; the angle integral diverges."""


class BranchResolutionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# tanh-sinh rule on [0, 1]


def _tanh_sinh(level):
    """Nodes x, complements 1 - x and weights of the tanh-sinh rule with step 2**-level."""
    h = 2.0**-level
    t = np.arange(-int(3.2 / h), int(3.2 / h) + 1) * h
    a = 0.5 * np.pi * np.sinh(t)
    # 1 - x computed directly so nodes near 1 keep full relative accuracy
    comp = 1.0 / (np.exp(2.0 * a) + 1.0)
    x = 1.0 / (np.exp(-2.0 * a) + 1.0)
    w = h * 0.5 * np.pi * np.cosh(t) / (2.0 * np.cosh(a) ** 2)
    keep = (x > 0) & (comp > 0) & (w > 1e-300)
    return x[keep], comp[keep], w[keep]


_TS = {k: _tanh_sinh(k) for k in range(3, 9)}


def tanh_sinh(f, tol=1e-13, max_level=8):
    """Integral of f over (0, 1); f receives (x, 1 - x) arrays.

    Levels are doubled until two successive estimates agree to ``tol``.
    Returns (value, error estimate).
    """
    prev = None
    for k in range(3, max_level + 1):
        x, c, w = _TS[k]
        val = float(np.sum(w * f(x, c)))
        if prev is not None and abs(val - prev) <= tol * max(1.0, abs(val)):
            return val, abs(val - prev)
        prev = val
    return val, abs(val - prev)


# ---------------------------------------------------------------------------
# problem definition


@dataclass(frozen=True)
class ScatteringProblem:
    """Radial potential psi in collision-length units, speed V and charge Q.

    ``power = (A, s)`` marks a pure power law psi = A y^-s, which enables the
    cancellation-free turning-point formulas and the closed-form dchi/db.
    ``psi`` maps radii to (psi, psi') arrays for the general case.
    """

    V: float
    Q: float = 1.0
    power: tuple = None
    psi: object = field(default=None, compare=False)
    label: str = ""
    reach: float = np.inf

    def __post_init__(self):
        if not np.isfinite(self.V) or self.V <= 0:
            raise ValueError("speed V must be positive")
        if self.power is None and self.psi is None:
            object.__setattr__(self, "power", (0.0, 1.0))

    @classmethod
    def coulomb(cls, V=1.0, Q=1.0):
        return cls(V, Q, (1.0, 1.0), label="coulomb")

    @classmethod
    def pure_power(cls, s, A=1.0, V=1.0, Q=1.0):
        return cls(V, Q, (float(A), float(s)), label=f"power s={s}")

    @classmethod
    def free(cls, V=1.0):
        return cls(V, 1.0, (0.0, 1.0), label="free")

    @classmethod
    def from_family(cls, family, M=None, V=1.0, Q=1.0):
        """Near part Phi_B of a family rescaled by its collision length."""
        lam = family.collision_length
        if lam <= 0:
            raise ValueError("family has no collision length; the near part vanishes")
        Mv = family.M if M is None else float(M)

        def psi(y):
            prof = family.profile(np.asarray(y) * lam, PART_NEAR, Mv)
            return prof[0], prof[1] * lam

        return cls(V, Q, None, psi, label=f"{family.variant} near part M={Mv}", reach=2.0 * Mv)

    # -- canonical form --------------------------------------------------
    @property
    def sign(self):
        return float(np.sign(self.Q))

    @property
    def speed(self):
        """Canonical speed V / sqrt|Q| (the kernel depends on Q and V only through it)."""
        return self.V / np.sqrt(abs(self.Q)) if self.Q != 0 else np.inf

    @property
    def coupling(self):
        """2 sgn(Q) / V_c^2, the factor multiplying psi in F."""
        if self.Q == 0 or self.is_free:
            return 0.0
        return 2.0 * self.sign / self.speed**2

    @property
    def is_free(self):
        return self.power is not None and self.power[0] == 0.0

    @property
    def repulsive_power(self):
        return self.power is not None and self.power[0] * self.Q > 0

    def rescaled(self):
        """The same problem with charge sgn(Q) and speed V / sqrt|Q|."""
        return ScatteringProblem(self.speed, self.sign, self.power, self.psi, self.label, self.reach)

    def potential(self, r):
        r = np.asarray(r, dtype=float)
        if self.power is not None:
            A, s = self.power
            v = A * r**-s
            return v, -s * v / r
        return self.psi(r)

    def F(self, r, b):
        """1 - b^2/r^2 - 2 Q psi(r) / V^2."""
        return 1.0 - (b / r) ** 2 - self.coupling * self.potential(r)[0]

    def dF(self, r, b):
        return 2.0 * b * b / r**3 - self.coupling * self.potential(r)[1]


# ---------------------------------------------------------------------------
# turning point and deflection


def nearest_approach(p, b):
    """Largest root r* of F(r) = 0, bracketed by an inward log scan."""
    if not b > 0:
        raise ValueError("impact parameter must be positive")
    if p.coupling == 0.0:
        return float(b)
    f = lambda r: float(np.squeeze(p.F(r, b)))
    hi = max(b, 1.0) * 4.0
    while f(hi) <= 0:
        hi *= 4.0
        if hi > 1e30:
            raise CaptureError("no asymptotic region found")
    r = hi
    floor = 1e-12 * min(b, 1.0)
    while True:
        lo = r / 1.25
        if f(lo) <= 0:
            break
        r = lo
        if r < floor:
            raise CaptureError(f"capture at b={b:g}: no turning point above {floor:g}")
    root = optimize.brentq(f, lo, r, xtol=1e-300, rtol=1e-15, maxiter=500)
    return float(root)


def _gap_over_u2(p, b, rs, u, c):
    """F(r)/u^2 at r = r*/(1 - u^2), arranged so no cancellation occurs near u = 0.

    c = 1 - u. Uses F(r) - F(r*) with F(r*) = 0.
    """
    one_minus_u2 = c * (1.0 + u)
    r = rs / one_minus_u2
    kin = (b / rs) ** 2 * (2.0 - u * u)
    g = p.coupling
    if g == 0.0:
        return kin
    if p.power is not None:
        A, s = p.power
        # psi(r*) - psi(r) = A r*^-s (1 - (1-u^2)^s)
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(u < 0.5, np.log1p(-u * u), np.log(one_minus_u2))
            pot = -A * rs**-s * np.expm1(s * lg)
            pot_u2 = np.where(u > 1e-8, pot / (u * u), A * s * rs**-s)
        return kin + g * pot_u2
    # general profile: difference quotient, midpoint derivative for tiny gaps
    dr = rs * u * u / one_minus_u2
    d_small = dr < 1e-5 * rs
    psi_rs = p.potential(np.array([rs]))[0][0]
    psi_r = p.potential(r)[0]
    mid = p.potential(rs + 0.5 * dr)[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        diff = np.where(d_small, -mid * dr, psi_rs - psi_r)
        pot_u2 = np.where(u > 0, diff / (u * u), -p.potential(np.array([rs]))[1][0] * rs)
    return kin + g * pot_u2


def _phi0(p, b, rs, tol):
    def f(u, c):
        q = _gap_over_u2(p, b, rs, u, c)
        return 2.0 * b / (rs * np.sqrt(q))

    return tanh_sinh(f, tol)


def scattering_angle(p, b, tol=1e-13, return_error=False):
    """Deflection chi(b) = pi - 2 phi_0 in (-pi, pi); positive when repulsive."""
    if not b > 0:
        raise ValueError("impact parameter must be positive")
    if p.coupling == 0.0:
        return (0.0, 0.0) if return_error else 0.0
    rs = nearest_approach(p, b)
    slope = float(np.squeeze(p.dF(rs, b))) * rs
    if slope < 1e-9:
        raise OrbitingError(f"orbiting at b={b:g}: F'(r*) r* = {slope:.3g}")
    phi0, err = _phi0(p, b, rs, tol)
    chi = np.pi - 2.0 * phi0
    if not -np.pi < chi < np.pi:
        raise OrbitingError(f"deflection {chi:.4g} leaves (-pi, pi) at b={b:g}")
    return (chi, 2.0 * err) if return_error else chi


def _power_dchi_db(p, b, tol):
    """dchi/db for a repulsive pure power by integration over the angle variable xi.

    With w = b/r and kappa = 2 Q A / V^2 the turning condition reads
    sin^2 xi = w^2 + kappa (w/b)^s; differentiating phi_0 at fixed xi gives
    dchi/db = 2 int_0^{pi/2} sin xi dD/db / D^2 dxi, D = w + (s kappa / 2) w^(s-1) b^-s.
    """
    A, s = p.power
    kap = p.coupling * A
    bs = b**-s

    def w_of(sin2):
        # solve w^2 + kap bs w^s = sin2 for w in [0, 1]; monotone in w
        w = np.sqrt(sin2)
        for _ in range(100):
            g = w * w + kap * bs * w**s - sin2
            dg = 2.0 * w + kap * s * bs * w ** (s - 1.0)
            step = g / dg
            w_new = np.where(w - step > 0, w - step, 0.5 * w)
            if np.all(np.abs(w_new - w) <= 1e-16 * np.maximum(w, 1e-300)):
                w = w_new
                break
            w = w_new
        return w

    def f(x, c):
        xi = 0.5 * np.pi * x
        sx = np.sin(xi)
        w = w_of(sx * sx)
        D = w + 0.5 * s * kap * w ** (s - 1.0) * bs
        wb = kap * s * w**s / (b ** (s + 1.0) * (2.0 * w + kap * s * w ** (s - 1.0) * bs))
        dD = wb + 0.5 * s * kap * ((s - 1.0) * w ** (s - 2.0) * wb * bs - s * w ** (s - 1.0) * bs / b)
        return 0.5 * np.pi * 2.0 * sx * dD / (D * D)

    return tanh_sinh(f, tol)[0]


def _fd_dchi_db(p, b, tol):
    h = 1e-4 * b
    chi = [scattering_angle(p, b + k * h, tol) for k in (-2, -1, 1, 2)]
    return (chi[0] - 8.0 * chi[1] + 8.0 * chi[2] - chi[3]) / (12.0 * h)


def dchi_db(p, b, method="auto", tol=1e-13):
    """Derivative of the deflection in the impact parameter.

    ``auto`` uses the angle-variable integral for repulsive pure powers and a
    5-point central difference (step 1e-4 b) otherwise. Values below 1e-10 in
    magnitude are flagged as caustics in the log.
    """
    if p.coupling == 0.0:
        return 0.0
    if method == "auto":
        method = "integral" if p.repulsive_power else "fd"
    if method == "integral":
        if not p.repulsive_power:
            raise ValueError("the integral formula applies to repulsive pure powers only")
        val = _power_dchi_db(p, b, tol)
    else:
        val = _fd_dchi_db(p, b, tol)
    if abs(val) < 1e-10:
        log.warning("caustic: |dchi/db| = %.3g at b = %.6g", abs(val), b)
    return val


# ---------------------------------------------------------------------------
# kernel


@dataclass
class CrossSectionTable:
    """Kernel B(v; omega)/|v| sampled on deflection angles, with its preimages.

    ``branches[i]`` lists (b_j, dchi/db at b_j) for every impact parameter
    whose deflection magnitude is ``chi[i]``. ``partition[k]`` holds the
    indices of angles with exactly k preimages.
    """

    V: float
    chi: np.ndarray
    branches: list
    B_over_v: np.ndarray
    capture_fraction: float
    label: str = ""
    b_range: tuple = (1e-3, 1e3)

    @property
    def branch_count(self):
        return np.array([len(br) for br in self.branches], dtype=int)

    @property
    def partition(self):
        counts = self.branch_count
        return {int(k): np.flatnonzero(counts == k) for k in np.unique(counts)}

    def kernel(self, k=None):
        """Total kernel, or the branch-k piece B_k (zero off the set A_k)."""
        if k is None:
            return self.B_over_v * self.V
        return np.where(self.branch_count == k, self.B_over_v * self.V, 0.0)

    def to_csv(self):
        lines = ["chi,branch_count,B_over_v"]
        for c, n, bv in zip(self.chi, self.branch_count, self.B_over_v):
            lines.append(f"{c!r},{n},{bv!r}")
        return "\n".join(lines) + "\n"

    def metadata(self):
        return json.dumps(
            {"V": self.V, "potential": self.label, "capture_fraction": self.capture_fraction,
             "b_range": list(self.b_range)},
            sort_keys=True,
        )


def _scan(p, bgrid, tol):
    chi = np.full(len(bgrid), np.nan)
    for i, b in enumerate(bgrid):
        try:
            chi[i] = scattering_angle(p, b, tol)
        except CaptureError:
            pass
    return chi


def orbiting_screen(p, bgrid):
    """Impact parameters on the grid where F and F' vanish together at the turning point."""
    hits = []
    for b in bgrid:
        try:
            rs = nearest_approach(p, b)
        except CaptureError:
            continue
        if float(np.squeeze(p.dF(rs, b))) * rs < 1e-6:
            hits.append(float(b))
    return hits


def build_kernel(p, angles, b_min=1e-3, b_max=1e3, n_grid=512, tol=1e-13):
    """Invert chi(b) on a log grid and assemble B/|v| = sum_j b_j / (|sin chi| |dchi/db|).

    The target set for a deflection magnitude theta is {theta, -theta}:
    both deflect the velocity onto the same cone. Monotone pieces of chi are
    delimited by sign changes of its grid differences, with the extrema
    refined by bounded minimization.
    """
    angles = np.asarray(angles, dtype=float)
    if np.any((angles <= 0) | (angles >= np.pi)):
        raise ValueError("angles must lie in (0, pi)")
    if orbiting_screen(p, np.geomspace(b_min, b_max, 64)):
        raise OrbitingError("well-posedness screen failed: orbiting impact parameters found")
    bgrid = np.geomspace(b_min, b_max, n_grid)
    chi = _scan(p, bgrid, tol)
    ok = np.isfinite(chi)
    # capture measure in b db
    w = np.gradient(bgrid**2 / 2.0)
    capture_fraction = float(np.sum(w[~ok]) / np.sum(w))

    # split into monotone segments over runs of finite values
    segments = []
    idx = np.flatnonzero(ok)
    runs = np.split(idx, np.flatnonzero(np.diff(idx) != 1) + 1) if len(idx) else []
    for run in runs:
        if len(run) < 2:
            continue
        d = np.sign(np.diff(chi[run]))
        b_start = bgrid[run[0]]
        for j in range(1, len(d)):
            if d[j] != d[j - 1] and d[j] != 0:
                # extremum between run[j-1] and run[j+1]
                lo, hi = bgrid[run[j - 1]], bgrid[run[j + 1]]
                sgn = d[j - 1]
                res = optimize.minimize_scalar(
                    lambda lb: -sgn * scattering_angle(p, np.exp(lb), tol),
                    bounds=(np.log(lo), np.log(hi)), method="bounded",
                    options={"xatol": 1e-12},
                )
                b_ext = float(np.exp(res.x))
                segments.append((b_start, b_ext))
                b_start = b_ext
        segments.append((b_start, bgrid[run[-1]]))

    branches = []
    vals = np.empty(len(angles))
    for i, th in enumerate(angles):
        br = []
        for a, bnd in segments:
            ca, cb = scattering_angle(p, a, tol), scattering_angle(p, bnd, tol)
            for target in (th, -th):
                ga, gb = ca - target, cb - target
                if ga * gb > 0:
                    continue
                if min(abs(ga), abs(gb)) < 1e-9 and (a, bnd) != segments[0]:
                    raise BranchResolutionError(
                        f"deflection {th:.6g} sits at a segment end (b={a:.6g}..{bnd:.6g}); "
                        "refine the impact-parameter grid"
                    )
                bj = optimize.brentq(lambda b: scattering_angle(p, b, tol) - target, a, bnd,
                                     xtol=1e-15, rtol=1e-15, maxiter=200)
                br.append((float(bj), float(dchi_db(p, bj, tol=tol))))
        branches.append(br)
        vals[i] = sum(bj / (np.sin(th) * abs(dj)) for bj, dj in br)
    return CrossSectionTable(p.V, angles, branches, vals, capture_fraction, p.label, (b_min, b_max))


def rutherford_kernel(chi, V=1.0, Q=1.0):
    """Rutherford cross section (Q / (2 V^2))^2 / sin^4(chi/2)."""
    return (Q / (2.0 * V * V)) ** 2 / np.sin(0.5 * np.asarray(chi)) ** 4


# ---------------------------------------------------------------------------
# direct orbit integration (independent check of chi)


def ode_deflection(p, b, start=None, rtol=1e-12, atol=1e-14):
    """Deflection and speed drift from integrating the planar equations of motion.

    The particle starts at (-X, b) with velocity (V, 0) and is followed until
    it is again at distance X from the scatterer. For slowly decaying
    potentials the finite start distance is corrected to leading order by
    adding the deflection accumulated beyond X on both legs.
    """
    V = p.V
    if start is None:
        s = p.power[1] if p.power is not None else 6.0
        start = 1e8 if s <= 1.0 else (1e5 if s < 3 else 1e3)
        start = max(start, 100.0 * b)
    g = p.Q

    def rhs(t, y):
        x1, x2, v1, v2 = y
        r = np.hypot(x1, x2)
        d1 = float(p.potential(np.array([r]))[1][0])
        a = -g * d1 / r
        return [v1, v2, a * x1, a * x2]

    def leave(t, y):
        return np.hypot(y[0], y[1]) - start * 1.000001

    leave.terminal = True
    leave.direction = 1
    t_end = 10.0 * start / V
    y0 = [-np.sqrt(start * start - b * b), b, V, 0.0]
    sol = integrate.solve_ivp(rhs, (0, t_end), y0, method="DOP853", rtol=rtol, atol=atol,
                              events=leave)
    x1, x2, v1, v2 = sol.y[:, -1]
    # outgoing direction measured against the incoming one; repulsion bends toward +x2
    chi = np.arctan2(v2, v1)
    speed = np.hypot(v1, v2)
    # far-field correction for each leg outside radius X: Q A s-power impulse
    if p.power is not None and p.power[0] != 0:
        A, s = p.power
        # small-angle deflection from the region |x| > X on a straight line at offset b
        tail = _straight_tail(g * A, s, b, start, V)
        chi += 2.0 * tail
    return float(chi), float(speed - V) / V


def _straight_tail(k, s, b, X, V):
    """Transverse impulse / V^2 from the straight segment of one leg beyond distance X."""
    # integral over x from sqrt(X^2-b^2) to inf of s k b (x^2+b^2)^(-(s+2)/2) dx / V^2
    x0 = np.sqrt(X * X - b * b)
    # x = x0 / t maps the half line onto (0, 1]
    f = lambda t: s * k * b * x0 / t**2 * ((x0 / t) ** 2 + b * b) ** (-(s + 2.0) / 2.0) if t > 0 else 0.0
    return integrate.quad(f, 0.0, 1.0, epsabs=0, epsrel=1e-12)[0] / V**2
