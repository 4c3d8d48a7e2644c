"""Interaction potential families, forces and the near/far splitting.

Three families are supported, all radial:

``power``     Phi(x) = Psi(|x|/eps) with Psi(y) = A y^-s (+ C y^-rho),
``weak_amp``  Phi(x) = eps G(|x|), G(x) = B x^-r (1 + x/x_c)^(r-s), which
              behaves like B x^-r at the origin and A x^-s at infinity,
``weak_wide`` Phi(x) = eps Psi(|x|/L) with Psi Gaussian or exponential and
              L = L0 eps^-a.

The radial profile and its first two derivatives are evaluated by the
numba function :func:`radial` from a flat parameter vector, so the same
code serves the field sums, the trajectory integrator and the quadratures.
The splitting uses a quintic smoothstep cutoff eta(|x| / (M lambda)):
eta = 1 below 1, 0 above 2, and C^2 in between.
"""

from dataclasses import dataclass, asdict

import numpy as np
from numba import njit

KIND_POWER, KIND_WEAK, KIND_GAUSS, KIND_EXPO = 0, 1, 2, 3
PART_FULL, PART_NEAR, PART_FAR = 0, 1, 2

# indices into the parameter vector
P_EPS, P_A, P_B, P_S, P_R, P_XC, P_C, P_RHO, P_L, P_ELL = range(10)
NPARAM = 10

VARIANTS = ("power", "weak_amp", "weak_wide")


class SingularityError(ValueError):
    """Potential or force requested at the singular origin."""


@njit(inline="always", cache=True)
def cutoff(u):
    """Quintic smoothstep cutoff and its first two derivatives in u."""
    if u <= 1.0:
        return 1.0, 0.0, 0.0
    if u >= 2.0:
        return 0.0, 0.0, 0.0
    t = u - 1.0
    val = 1.0 - t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
    d1 = -30.0 * t * t * (1.0 - t) * (1.0 - t)
    d2 = -60.0 * t * (1.0 - t) * (1.0 - 2.0 * t)
    return val, d1, d2


@njit(inline="always", cache=True)
def _base(kind, p, r):
    """Unsplit profile Phi(r) and its first two radial derivatives."""
    eps = p[P_EPS]
    if kind == KIND_POWER:
        s = p[P_S]
        a = p[P_A] * eps**s * r ** (-s)
        f0 = a
        f1 = -s * a / r
        f2 = s * (s + 1.0) * a / (r * r)
        if p[P_C] != 0.0:
            rho = p[P_RHO]
            c = p[P_C] * eps**rho * r ** (-rho)
            f0 += c
            f1 += -rho * c / r
            f2 += rho * (rho + 1.0) * c / (r * r)
        return f0, f1, f2
    if kind == KIND_WEAK:
        s = p[P_S]
        rr = p[P_R]
        xc = p[P_XC]
        g = p[P_B] * r ** (-rr) * (1.0 + r / xc) ** (rr - s)
        l1 = -rr / r + (rr - s) / (xc + r)
        l2 = l1 * l1 + rr / (r * r) - (rr - s) / ((xc + r) * (xc + r))
        return eps * g, eps * g * l1, eps * g * l2
    if kind == KIND_GAUSS:
        L = p[P_L]
        g = eps * np.exp(-(r * r) / (L * L))
        return g, -2.0 * r / (L * L) * g, (-2.0 / (L * L) + 4.0 * r * r / L**4) * g
    L = p[P_L]
    g = eps * np.exp(-r / L)
    return g, -g / L, g / (L * L)


@njit(cache=True)
def radial(kind, p, part, r):
    """Phi, dPhi/dr and d2Phi/dr2 of the requested part at radius r > 0."""
    f0, f1, f2 = _base(kind, p, r)
    if part == PART_FULL:
        return f0, f1, f2
    ell = p[P_ELL]
    if ell <= 0.0:
        if part == PART_NEAR:
            return 0.0, 0.0, 0.0
        return f0, f1, f2
    u = r / ell
    if part == PART_NEAR:
        if u >= 2.0:
            return 0.0, 0.0, 0.0
        e0, e1, e2 = cutoff(u)
    else:
        if u <= 1.0:
            return 0.0, 0.0, 0.0
        e0, e1, e2 = cutoff(u)
        e0, e1, e2 = 1.0 - e0, -e1, -e2
    e1 /= ell
    e2 /= ell * ell
    return e0 * f0, e1 * f0 + e0 * f1, e2 * f0 + 2.0 * e1 * f1 + e0 * f2


@njit(cache=True)
def radial_array(kind, p, part, r):
    n = r.shape[0]
    out = np.empty((3, n))
    for i in range(n):
        a, b, c = radial(kind, p, part, r[i])
        out[0, i] = a
        out[1, i] = b
        out[2, i] = c
    return out


@dataclass(frozen=True)
class PotentialFamily:
    """One member of an interaction family at a fixed eps.

    ``L0`` and ``L_exp`` define L_eps = L0 * eps**(-L_exp) for ``weak_wide``.
    ``psi`` selects the concrete profile: ``power`` (variants power and
    weak_amp) or ``gaussian`` / ``exponential`` (weak_wide).
    """

    variant: str
    eps: float
    s: float = 1.0
    A: float = 1.0
    r: float = 0.0
    B: float = 1.0
    C: float = 0.0
    rho: float = 3.0
    L0: float = 1.0
    L_exp: float = 0.0
    M: float = 10.0
    psi: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown potential variant {self.variant!r}")
        if not np.isfinite(self.eps) or self.eps <= 0:
            raise ValueError("eps must be positive")
        if not np.isfinite(self.M) or self.M <= 0:
            raise ValueError("cutoff scale M must be positive")
        psi = self.psi or ("gaussian" if self.variant == "weak_wide" else "power")
        object.__setattr__(self, "psi", psi)
        if self.variant in ("power", "weak_amp"):
            if not self.s > 0.5:
                raise ValueError("the far-field exponent must satisfy s > 1/2")
            if self.A == 0:
                raise ValueError("far-field amplitude A must be nonzero")
            if psi != "power":
                raise ValueError(f"variant {self.variant} requires psi='power'")
        if self.variant == "power" and self.C != 0 and not self.rho > self.s:
            raise ValueError("remainder exponent rho must exceed s")
        if self.variant == "weak_amp":
            if self.r < 0:
                raise ValueError("near-field exponent r must be nonnegative")
            if self.B == 0:
                raise ValueError("near-field amplitude B must be nonzero")
            if self.r != self.s and self.A * self.B <= 0:
                raise ValueError("A and B must have the same sign")
            if self.r == self.s and self.A != self.B:
                raise ValueError("r == s requires A == B")
        if self.variant == "weak_wide":
            if psi not in ("gaussian", "exponential"):
                raise ValueError("weak_wide requires psi 'gaussian' or 'exponential'")
            if self.L0 <= 0:
                raise ValueError("L0 must be positive")

    # -- derived scales -------------------------------------------------
    @property
    def kind(self):
        if self.variant == "power":
            return KIND_POWER
        if self.variant == "weak_amp":
            return KIND_WEAK
        return KIND_GAUSS if self.psi == "gaussian" else KIND_EXPO

    @property
    def L(self):
        """Interaction width L_eps (weak_wide only, else 0)."""
        if self.variant != "weak_wide":
            return 0.0
        return self.L0 * self.eps ** (-self.L_exp)

    @property
    def x_c(self):
        if self.variant != "weak_amp" or self.r == self.s:
            return 1.0
        return (self.B / self.A) ** (1.0 / (self.s - self.r))

    @property
    def collision_length(self):
        return collision_length(self)

    @property
    def far_field(self):
        """(amplitude, exponent) of the leading power-law tail, or None."""
        if self.variant == "power":
            return self.A * self.eps**self.s, self.s
        if self.variant == "weak_amp":
            return self.eps * self.A, self.s
        return None

    @property
    def singular(self):
        return self.variant == "power" or (self.variant == "weak_amp" and self.r > 0)

    def with_eps(self, eps):
        d = asdict(self)
        d["eps"] = eps
        return PotentialFamily(**d)

    def with_M(self, M):
        d = asdict(self)
        d["M"] = M
        return PotentialFamily(**d)

    def params(self, M=None):
        """Flat parameter vector for :func:`radial`; ELL slot holds M * lambda."""
        p = np.zeros(NPARAM)
        p[P_EPS] = self.eps
        p[P_A] = self.A
        p[P_B] = self.B
        p[P_S] = self.s
        p[P_R] = self.r
        p[P_XC] = self.x_c
        p[P_C] = self.C
        p[P_RHO] = self.rho
        p[P_L] = self.L
        p[P_ELL] = (self.M if M is None else M) * self.collision_length
        return p

    # -- vectorized radial evaluation ----------------------------------
    def profile(self, r, part=PART_FULL, M=None):
        """Array (3, n) with Phi, Phi' and Phi'' of ``part`` at radii r."""
        r = np.atleast_1d(np.asarray(r, dtype=np.float64))
        return radial_array(self.kind, self.params(M), part, np.ascontiguousarray(r))

    def phi(self, r, part=PART_FULL):
        return self.profile(r, part)[0]

    def dphi(self, r, part=PART_FULL):
        return self.profile(r, part)[1]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "L_law" in d:
            law = d.pop("L_law")
            if isinstance(law, dict):
                d["L0"] = law.get("L0", 1.0)
                d["L_exp"] = law.get("exponent", 0.0)
            else:
                d["L0"] = float(law)
        return cls(**d)


def collision_length(f):
    """Distance at which one scatterer deflects by order one (0 if none)."""
    if f.variant == "power":
        return f.eps
    if f.variant == "weak_amp":
        if f.r > 0:
            return (f.B * f.eps) ** (1.0 / f.r)
        return 0.0
    return 0.0


def _norm(x):
    x = np.asarray(x, dtype=float)
    if x.shape != (3,):
        raise ValueError("expected a 3-vector")
    return x, float(np.sqrt(x @ x))


def eval_potential(f, x, part=PART_FULL):
    """Phi(x, eps) of the family (or of one split part)."""
    x, r = _norm(x)
    if r == 0.0:
        if f.singular:
            raise SingularityError("potential is singular at the origin")
        if part == PART_NEAR and f.collision_length > 0:
            return 0.0
        return f.eps
    return float(f.profile(r, part)[0, 0])


def eval_force(f, x, Q=1.0, part=PART_FULL):
    """Force -Q grad Phi(x) on a unit charge at x from a scatterer of charge Q at 0."""
    x, r = _norm(x)
    if r == 0.0:
        if f.singular:
            raise SingularityError("force is singular at the origin")
        return np.zeros(3)
    if Q == 0:
        return np.zeros(3)
    d1 = f.profile(r, part)[1, 0]
    return -Q * d1 * x / r


@dataclass(frozen=True)
class SplitPotential:
    """Near part Phi_B = eta Phi and far part Phi_L = (1 - eta) Phi."""

    base: PotentialFamily
    M: float

    @property
    def ell(self):
        """Split radius M * lambda (0 when the family has no collision length)."""
        return self.M * self.base.collision_length

    def params(self):
        return self.base.params(self.M)

    def phi_B(self, r):
        return self.base.profile(r, PART_NEAR, self.M)[0]

    def phi_L(self, r):
        return self.base.profile(r, PART_FAR, self.M)[0]

    def profile(self, r, part):
        return self.base.profile(r, part, self.M)


def split(f, M=None):
    return SplitPotential(f, f.M if M is None else float(M))


@dataclass(frozen=True)
class MembershipReport:
    exponent: float
    constant: float
    required: float
    satisfied: bool


def check_membership(f, rmin=1.0, rmax=100.0, n=200):
    """Fit the decay of Phi - A eps^s/|x|^s (plus |x| times its gradient).

    Returns the fitted remainder exponent and constant. Potentials whose
    exponent does not exceed max(s, 2) are flagged, not rejected.
    """
    ff = f.far_field
    if ff is None:
        raise ValueError("family has no power-law far field")
    amp, s = ff
    r = np.geomspace(rmin, rmax, n)
    prof = f.profile(r)
    rem = np.abs(prof[0] - amp * r**-s) + r * np.abs(prof[1] + s * amp * r ** (-s - 1))
    scale = np.abs(prof[0]) + r * np.abs(prof[1])
    required = max(s, 2.0)
    if np.all(rem <= 1e-13 * scale):
        return MembershipReport(np.inf, 0.0, required, True)
    mask = rem > 1e-13 * scale
    slope = np.polyfit(np.log(r[mask]), np.log(rem[mask]), 1)[0]
    expo = -slope
    const = float(np.max(rem[mask] * r[mask] ** expo))
    return MembershipReport(float(expo), const, required, bool(expo > required))
