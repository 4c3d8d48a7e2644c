"""Tagged-particle trajectories, straight-line deflections and their correlations.

Trajectories solve dx/dt = v, dv/dt = F(x) for a fixed scatterer cloud with
a velocity-Verlet scheme whose step is halved near scatterers. Deflections
along frozen straight paths, D = int_0^T F_L(x0 + v t) dt, are linear in
the cloud; their second moments are therefore given exactly by Campbell's
formula as double time integrals of the force covariance

    R(z) = int grad Phi_L(y) grad Phi_L(y + z)^T dy,

which is known in closed form for the Gaussian profile and, for pure power
laws, equals A^2 eps^(2s) W_s |z|^(1-2s) Lambda(z/|z|). A Monte Carlo
estimator over sampled clouds is kept for cross-checks at small scale.
"""

import csv
import io
import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import integrate as spi, special

from .potentials import KIND_EXPO, KIND_GAUSS, PART_FAR, PART_FULL, radial
from .rng import derive_seed
from .scatterers import ChargeLaw, SamplingDomain, sample_config

log = logging.getLogger(__name__)

_OK, _CLOSE, _UNDERFLOW = 0, 1, 2


class CloseEncounterError(RuntimeError):
    def __init__(self, t, x, distance, reason="distance below 1e-6 lambda"):
        where = [float(a) for a in x]
        super().__init__(f"close encounter at t={t:.6g}, x={where}, distance {distance:.3g}: {reason}")
        self.t = t
        self.x = np.asarray(x)
        self.distance = distance


# ---------------------------------------------------------------------------
# trajectories


@njit(cache=True)
def _force_energy(pos, q, kind, p, part, x):
    fx = fy = fz = 0.0
    u = 0.0
    dmin = np.inf
    for n in range(pos.shape[0]):
        dx = x[0] - pos[n, 0]
        dy = x[1] - pos[n, 1]
        dz = x[2] - pos[n, 2]
        r = np.sqrt(dx * dx + dy * dy + dz * dz)
        if r < dmin:
            dmin = r
        f0, f1, _ = radial(kind, p, part, r)
        c = -q[n] * f1 / r
        fx += c * dx
        fy += c * dy
        fz += c * dz
        u += q[n] * f0
    return fx, fy, fz, u, dmin


@njit(cache=True)
def _verlet(pos, q, kind, p, part, x0, v0, t_end, base, lam, record_every, max_halvings):
    x = x0.copy()
    v = v0.copy()
    fx, fy, fz, u, dmin = _force_energy(pos, q, kind, p, part, x)
    f = np.array([fx, fy, fz])
    e0 = 0.5 * (v @ v) + u
    escale = max(abs(e0), 1e-300)
    n_macro = int(np.ceil(t_end / base - 1e-12))
    n_rec = n_macro // record_every + 2
    T = np.empty(n_rec)
    X = np.empty((n_rec, 3))
    Vv = np.empty((n_rec, 3))
    E = np.empty(n_rec)
    T[0] = 0.0
    X[0] = x
    Vv[0] = v
    E[0] = e0
    k = 1
    t = 0.0
    steps = 0
    rejections = 0
    min_dist = dmin
    status = _OK
    h = base
    h_floor = base * 0.5**max_halvings
    for m in range(n_macro):
        t_stop = min((m + 1) * base, t_end)
        while t < t_stop - 1e-15 * max(1.0, t_stop):
            h = min(2.0 * h, base, t_stop - t)
            ok = False
            while True:
                speed = np.sqrt(v @ v)
                if lam > 0.0 and dmin < 4.0 * lam and h * speed > 0.05 * dmin:
                    if h <= h_floor:
                        break
                    h *= 0.5
                    rejections += 1
                    continue
                vh = v + 0.5 * h * f
                xn = x + h * vh
                gx, gy, gz, un, dn = _force_energy(pos, q, kind, p, part, xn)
                if abs(un - u) > 1e-3 * escale:
                    if h <= h_floor:
                        break
                    h *= 0.5
                    rejections += 1
                    continue
                ok = True
                break
            if not ok:
                # no admissible step above the floor: the orbit is falling into a singularity
                status = _UNDERFLOW
                break
            g = np.array([gx, gy, gz])
            x = xn
            v = vh + 0.5 * h * g
            f = g
            u = un
            dmin = dn
            t += h
            steps += 1
            if dmin < min_dist:
                min_dist = dmin
            if lam > 0.0 and dmin < 1e-6 * lam:
                status = _CLOSE
                break
        if status != _OK:
            break
        if (m + 1) % record_every == 0 or m == n_macro - 1:
            T[k] = t
            X[k] = x
            Vv[k] = v
            E[k] = 0.5 * (v @ v) + u
            k += 1
    if status != _OK:
        T[k] = t
        X[k] = x
        Vv[k] = v
        E[k] = 0.5 * (v @ v) + u
        k += 1
    return T[:k], X[:k], Vv[:k], E[:k], steps, rejections, min_dist, status, dmin


@dataclass
class Trajectory:
    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    energies: np.ndarray
    steps: int
    rejections: int
    min_distance: float

    @property
    def energy_drift(self):
        e0 = self.energies[0]
        return float(np.max(np.abs(self.energies - e0)) / abs(e0))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "x", "y", "z", "vx", "vy", "vz", "E"])
        for t, x, v, e in zip(self.times, self.positions, self.velocities, self.energies):
            w.writerow([repr(float(t)), *(repr(float(a)) for a in x), *(repr(float(a)) for a in v),
                        repr(float(e))])
        return buf.getvalue()


def base_step(family, speed):
    """min(0.01, 0.1 lambda / |v|); 0.01 when the collision length vanishes."""
    lam = family.collision_length
    return 0.01 if lam == 0 else min(0.01, 0.1 * lam / speed)


def integrate_trajectory(config, family, x0, v0, t_end, part=PART_FULL, record_every=None,
                         max_halvings=40):
    """Velocity-Verlet trajectory in the field of a fixed cloud.

    The step starts at :func:`base_step` and is halved while the particle is
    within 4 lambda of a scatterer and the step is longer than 5% of that
    distance, or while the potential energy changes by more than 1e-3 |E|
    in one step. Distances below 1e-6 lambda raise CloseEncounterError, as
    does a step that still breaks these rules at base / 2^max_halvings.
    """
    x0 = np.asarray(x0, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    speed = float(np.linalg.norm(v0))
    if speed == 0:
        raise ValueError("initial velocity must be nonzero")
    pos = np.ascontiguousarray(config.positions)
    q = np.ascontiguousarray(config.charges)
    if len(q) and np.min(np.linalg.norm(pos - x0, axis=1)) == 0.0:
        raise ValueError("initial point coincides with a scatterer")
    base = base_step(family, speed)
    n_macro = int(np.ceil(t_end / base - 1e-12))
    if record_every is None:
        record_every = max(1, n_macro // 10000)
    T, X, V, E, steps, rej, dmin_all, status, dmin = _verlet(
        pos, q, family.kind, family.params(), part, x0, v0, float(t_end), base,
        family.collision_length, int(record_every), int(max_halvings))
    if status == _CLOSE:
        raise CloseEncounterError(T[-1], X[-1], dmin)
    if status == _UNDERFLOW:
        raise CloseEncounterError(T[-1], X[-1], dmin, f"no admissible step above base / 2^{max_halvings}")
    return Trajectory(T, X, V, E, int(steps), int(rej), float(dmin_all))


# public name used by the experiment runner
integrate = integrate_trajectory


def cloud_radius(speed, t_end):
    return speed * t_end + 50.0


# ---------------------------------------------------------------------------
# straight-line deflections


_GL16 = np.polynomial.legendre.leggauss(16)


@njit(cache=True)
def _segment_force(kind, p, dx, dy, dz, vx, vy, vz, q, a, b, glx, glw, out):
    half = 0.5 * (b - a)
    mid = 0.5 * (b + a)
    for j in range(glx.shape[0]):
        t = mid + half * glx[j]
        rx = dx + vx * t
        ry = dy + vy * t
        rz = dz + vz * t
        r = np.sqrt(rx * rx + ry * ry + rz * rz)
        if r == 0.0:
            continue
        f1 = radial(kind, p, PART_FAR, r)[1]
        c = -q * f1 / r * glw[j] * half
        out[0] += c * rx
        out[1] += c * ry
        out[2] += c * rz


@njit(cache=True)
def _line_deflections(pos, q, kind, p, x0, v, T, ell, reach, glx, glw):
    """Deflection from each scatterer along x0 + v t, t in [0, T].

    Panels start at the closest-approach time with width of order the miss
    distance and double outward; breakpoints are added where the path
    crosses the cutoff radii ell and 2 ell, where Phi_L is only C^2.
    """
    out = np.zeros(3)
    tmp = np.zeros(3)
    vv = v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    sp = np.sqrt(vv)
    bk = np.empty(8)
    for n in range(pos.shape[0]):
        dx = x0[0] - pos[n, 0]
        dy = x0[1] - pos[n, 1]
        dz = x0[2] - pos[n, 2]
        ts = -(dx * v[0] + dy * v[1] + dz * v[2]) / vv
        cx = dx + v[0] * ts
        cy = dy + v[1] * ts
        cz = dz + v[2] * ts
        rho = np.sqrt(cx * cx + cy * cy + cz * cz)
        tc = min(max(ts, 0.0), T)
        ex = dx + v[0] * tc
        ey = dy + v[1] * tc
        ez = dz + v[2] * tc
        if reach > 0.0 and np.sqrt(ex * ex + ey * ey + ez * ez) > reach:
            continue
        nb = 0
        bk[nb] = tc
        nb += 1
        for rad in (ell, 2.0 * ell):
            if rad > rho:
                w = np.sqrt(rad * rad - rho * rho) / sp
                for tt in (ts - w, ts + w):
                    if 0.0 < tt < T:
                        bk[nb] = tt
                        nb += 1
        pts = np.sort(bk[:nb])
        w0 = 0.25 * max(rho, ell) / sp
        tmp[:] = 0.0
        # march left from tc and right from tc through the breakpoints
        for side in (-1.0, 1.0):
            lo = tc
            width = w0
            end = 0.0 if side < 0 else T
            while (end - lo) * side > 0.0:
                hi = lo + side * width
                if (hi - end) * side > 0.0:
                    hi = end
                for jj in range(nb):
                    j = jj if side > 0 else nb - 1 - jj
                    if (pts[j] - lo) * side > 1e-15 and (hi - pts[j]) * side > 1e-15:
                        hi = pts[j]
                        break
                a = min(lo, hi)
                b = max(lo, hi)
                _segment_force(kind, p, dx, dy, dz, v[0], v[1], v[2], q[n], a, b, glx, glw, tmp)
                # grow panels with distance from closest approach
                width = max(width, 0.5 * abs(hi - ts))
                lo = hi
        out += tmp
    return out


def deflection_straightline(config, family, x0, v, T, M=None):
    """D = int_0^T F_L(x0 + v t) dt, summed scatterer by scatterer."""
    if T <= 0:
        raise ValueError("window length must be positive")
    return _deflection(config.positions, config.charges, family, x0, v, T, M)


def _deflection(pos, q, family, x0, v, T, M=None):
    p = family.params(M)
    ell = (family.M if M is None else M) * family.collision_length
    reach = 0.0
    if family.kind == KIND_GAUSS:
        reach = 8.0 * family.L
    elif family.kind == KIND_EXPO:
        reach = 45.0 * family.L
    return _line_deflections(np.ascontiguousarray(pos, dtype=float), np.ascontiguousarray(q, dtype=float),
                             family.kind, p, np.asarray(x0, dtype=float), np.asarray(v, dtype=float),
                             float(T), ell, reach, _GL16[0], _GL16[1])


@dataclass
class DeflectionSample:
    x0: np.ndarray
    v: np.ndarray
    T: float
    D: np.ndarray

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("window length must be positive")


# ---------------------------------------------------------------------------
# long-range correlation tensor


def _bipolar_moments(s):
    """tau1 = int eta.(eta-e) w, tau2 = int (eta.e)((eta-e).e) w, w = |eta|^-(s+2) |eta-e|^-(s+2).

    With r = |eta| and w = |eta - e| the volume element is 2 pi r w dr dw on
    |r - w| <= 1 <= r + w; the r > 4 tail is mapped to x = 4/r and
    integrated against the weight x^(2s-2) by Gauss-Jacobi.
    """
    nums = (lambda r, w: 0.5 * (r * r + w * w - 1.0),
            lambda r, w: 0.25 * (r * r + 1.0 - w * w) * (r * r - 1.0 - w * w))
    out = []
    for num in nums:
        g = lambda w, r: 2.0 * np.pi * num(r, w) * r ** (-s - 1.0) * w ** (-s - 1.0)

        def inner(r):
            # near r = 1 the endpoint singularities cap the attainable accuracy at ~1e-12
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", spi.IntegrationWarning)
                return spi.quad(g, abs(r - 1.0), r + 1.0, args=(r,), epsabs=0, epsrel=1e-11,
                                limit=200)[0]

        R1 = 4.0
        head = spi.quad(inner, 0.0, 1.0, epsabs=0, epsrel=1e-10, limit=200)[0]
        head += spi.quad(inner, 1.0, R1, epsabs=0, epsrel=1e-10, limit=200)[0]
        xj, wj = special.roots_jacobi(40, 0.0, 2.0 * s - 2.0)
        x = 0.5 * (xj + 1.0)
        wts = wj * 0.5 ** (2.0 * s - 1.0)
        h = np.array([inner(R1 / xi) * (R1 / xi) ** (2.0 * s) for xi in x])
        out.append(head + R1 ** (1.0 - 2.0 * s) * np.sum(wts * h))
    return out


_LAMBDA_CACHE = {}


def lambda_coefficients(s):
    """(alpha, beta) with int eta (x) (eta - e) w deta = alpha I + beta e e^T."""
    if not 0.5 < s < 2.0:
        raise ValueError("the force covariance integral converges for 1/2 < s < 2")
    key = float(s)
    if key not in _LAMBDA_CACHE:
        t1, t2 = _bipolar_moments(key)
        _LAMBDA_CACHE[key] = (0.5 * (t1 - t2), 0.5 * (3.0 * t2 - t1))
    return _LAMBDA_CACHE[key]


def lambda_tensor(s, e):
    """Lambda(e) = (s^2 / W_s) int eta (x) (eta - e) |eta|^-(s+2) |eta - e|^-(s+2) deta."""
    if not 0.5 < s < 1.0:
        raise ValueError("Lambda is defined for 1/2 < s < 1")
    from .timescales import compute_Ws

    e = np.asarray(e, dtype=float)
    e = e / np.linalg.norm(e)
    a, b = lambda_coefficients(s)
    return s * s / compute_Ws(s).value * (a * np.eye(3) + b * np.outer(e, e))


def force_covariance(family, z, M=None):
    """R(z) = int grad Phi(y) grad Phi(y + z)^T dy for pure power laws and Gaussians."""
    z = np.asarray(z, dtype=float)
    if family.kind == KIND_GAUSS:
        L = family.L
        c0 = family.eps**2 * (0.5 * np.pi * L * L) ** 1.5
        return c0 * np.exp(-(z @ z) / (2 * L * L)) * (np.eye(3) / L**2 - np.outer(z, z) / L**4)
    if family.variant == "power" and family.C == 0:
        d = np.linalg.norm(z)
        a, b = lambda_coefficients(family.s)
        amp = family.s**2 * (family.A * family.eps**family.s) ** 2
        zh = z / d
        return amp * d ** (1.0 - 2.0 * family.s) * (a * np.eye(3) + b * np.outer(zh, zh))
    raise NotImplementedError("closed-form force covariance needs a pure power law or a Gaussian")


def window_covariance(family, x1, v1, x2, v2, T, law=None):
    """E[D1 D2^T] for straight windows of length T by Campbell's formula.

    Self windows of pure power laws use the closed form of the double time
    integral; other pairs are integrated numerically over (t1, t2).
    """
    law = law or ChargeLaw.symmetric()
    mu2 = law.second_moment
    x1, v1, x2, v2 = (np.asarray(a, dtype=float) for a in (x1, v1, x2, v2))
    same = np.allclose(x1, x2) and np.allclose(v1, v2)
    if same and family.variant == "power" and family.C == 0:
        s = family.s
        a, b = lambda_coefficients(s)
        sp = np.linalg.norm(v1)
        vh = v1 / sp
        amp = s * s * (family.A * family.eps**s) ** 2 * sp ** (1.0 - 2.0 * s)
        c = 2.0 * T ** (3.0 - 2.0 * s) / ((2.0 - 2.0 * s) * (3.0 - 2.0 * s))
        return mu2 * amp * c * (a * np.eye(3) + b * np.outer(vh, vh))
    d = x1 - x2

    def inner(t1):
        # closest approach of z(t2) = d + v1 t1 - v2 t2 to the origin
        base = d + v1 * t1
        vv = v2 @ v2
        tstar = float(np.clip(base @ v2 / vv, 0.0, T))
        pts = [tstar] if 0.0 < tstar < T else None
        f = lambda t2: force_covariance(family, base - v2 * t2).ravel()
        if pts:
            return (spi.quad_vec(f, 0.0, tstar, epsabs=0, epsrel=1e-9)[0]
                    + spi.quad_vec(f, tstar, T, epsabs=0, epsrel=1e-9)[0])
        return spi.quad_vec(f, 0.0, T, epsabs=0, epsrel=1e-9)[0]

    K = spi.quad_vec(inner, 0.0, T, epsabs=0, epsrel=1e-8)[0]
    return mu2 * K.reshape(3, 3)


@dataclass
class CorrelationEstimate:
    y: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    h: float
    K: np.ndarray
    C: np.ndarray
    K_err: np.ndarray
    C_err: np.ndarray
    n_samples: int
    method: str
    T_L: float

    @property
    def scalar(self):
        """Trace of the normalized matrix C."""
        return float(np.trace(self.C))

    def to_json(self):
        return json.dumps({
            "y": self.y.tolist(), "v1": self.v1.tolist(), "v2": self.v2.tolist(), "h": self.h,
            "T_L": self.T_L, "K": self.K.tolist(), "C": self.C.tolist(), "K_err": self.K_err.tolist(),
            "C_err": self.C_err.tolist(), "n_samples": self.n_samples, "method": self.method,
        }, sort_keys=True)


def _normalize(K12, K11, K22):
    return K12 / np.sqrt(np.outer(np.diag(K11), np.diag(K22)))


def estimate_correlation(family, law, x1, v1, x2, v2, h, n_samples=0, seed=0, T_L=None,
                         method="campbell", radius=None):
    """Deflection correlation of two windows of length h T_L.

    ``method="campbell"`` evaluates the exact second moments by quadrature
    (errors reported as zero); ``method="mc"`` averages D1 D2^T over
    ``n_samples`` clouds in a ball of the given radius. The normalized matrix
    uses the self variances of each window: C_ij = K12_ij / sqrt(K11_ii K22_jj).
    Positions are in units of T_L.
    """
    if not 0.0 < h <= 1.0:
        raise ValueError("window fraction h must lie in (0, 1]")
    if T_L is None:
        from .timescales import SigmaEvaluator, solve_TL

        T_L = solve_TL(SigmaEvaluator(family))
    if not np.isfinite(T_L):
        raise ValueError("T_L is infinite; correlations on the Landau scale are undefined")
    x1, v1, x2, v2 = (np.asarray(a, dtype=float) for a in (x1, v1, x2, v2))
    X1, X2 = x1 * T_L, x2 * T_L
    T = h * T_L
    if method == "campbell":
        K12 = window_covariance(family, X1, v1, X2, v2, T, law)
        K11 = window_covariance(family, X1, v1, X1, v1, T, law)
        K22 = window_covariance(family, X2, v2, X2, v2, T, law)
        z = np.zeros((3, 3))
        return CorrelationEstimate(x2 - x1, v1, v2, h, K12, _normalize(K12, K11, K22), z, z.copy(),
                                   0, method, T_L)
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    if n_samples < 2:
        raise ValueError("Monte Carlo needs at least two samples")
    mid = 0.5 * (X1 + X2 + T * (v1 + v2) / 2.0)
    if radius is None:
        radius = np.linalg.norm(X1 - X2) + 2.0 * T + 50.0
    dom = SamplingDomain.ball(radius, tuple(mid))
    d1 = np.empty((n_samples, 3))
    d2 = np.empty((n_samples, 3))
    for i in range(n_samples):
        cfg = sample_config(dom, 1.0, law, derive_seed(seed, i))
        d1[i] = _deflection(cfg.positions, cfg.charges, family, X1, v1, T)
        d2[i] = _deflection(cfg.positions, cfg.charges, family, X2, v2, T)
    prod12 = d1[:, :, None] * d2[:, None, :]
    K12 = prod12.mean(0)
    K11 = (d1[:, :, None] * d1[:, None, :]).mean(0)
    K22 = (d2[:, :, None] * d2[:, None, :]).mean(0)
    K_err = prod12.std(0, ddof=1) / np.sqrt(n_samples)
    C = _normalize(K12, K11, K22)
    C_err = K_err / np.sqrt(np.outer(np.diag(K11), np.diag(K22)))
    return CorrelationEstimate(x2 - x1, v1, v2, h, K12, C, K_err, C_err, n_samples, method, T_L)


def window_correlation(ev, T):
    """Normalized correlation of consecutive windows [0, T] and [T, 2T].

    From Var(D_[0,2T]) = 2 Var(D_T) + 2 Cov, applied to the trace of the
    deflection covariance (two perpendicular and one parallel eigenvalue).
    """
    p1, a1 = ev.components(T)
    p2, a2 = ev.components(2.0 * T)
    return (2.0 * p2 + a2) / (2.0 * (2.0 * p1 + a1)) - 1.0
