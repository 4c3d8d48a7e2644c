"""Reference kinetic processes and their comparison with particle simulations.

The linear Boltzmann limit is realized as a velocity-jump process: collisions
arrive at rate |v| pi b_max^2 (unit scatterer density), the impact parameter
is area-uniform on the disc of radius b_max and the velocity turns by the
two-body deflection chi(b) about a uniformly random azimuth. The Landau
limit is Brownian motion on the sphere of constant speed with generator
kappa times the Laplace-Beltrami operator, so <v(0).v(t)> = exp(-2 kappa t).

All processes are simulated path by path in numba with counter-based
uniforms, one key per path, so ensembles do not depend on how they are
split across workers.
"""

import json
import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import stats

from .potentials import KIND_EXPO, KIND_GAUSS, radial, PART_FULL
from .rng import derive_seed, normal_pair, stream_keys, uniform, uniform_open
from .scatterers import ChargeLaw, SamplingDomain, sample_config
from .scattering import CaptureError, ScatteringProblem, scattering_angle

log = logging.getLogger(__name__)

_TABLE_SIZE = 4097


class NormalizationError(ValueError):
    """Particle and model paths do not share the same speed normalization."""


def _keys(seed, n):
    return np.array([stream_keys(derive_seed(seed, i))[0] for i in range(n)], dtype=np.uint64)


@njit(inline="always", cache=True)
def _rotate(vx, vy, vz, chi, phi):
    """Turn (vx, vy, vz) by angle chi about the azimuth phi around itself."""
    sp = np.sqrt(vx * vx + vy * vy + vz * vz)
    ux, uy, uz = vx / sp, vy / sp, vz / sp
    # orthonormal frame around u
    if abs(ux) < 0.9:
        ax, ay, az = 1.0, 0.0, 0.0
    else:
        ax, ay, az = 0.0, 1.0, 0.0
    e1x = ay * uz - az * uy
    e1y = az * ux - ax * uz
    e1z = ax * uy - ay * ux
    n1 = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
    e1x, e1y, e1z = e1x / n1, e1y / n1, e1z / n1
    e2x = uy * e1z - uz * e1y
    e2y = uz * e1x - ux * e1z
    e2z = ux * e1y - uy * e1x
    c, s = np.cos(chi), np.sin(chi)
    cp, spp = np.cos(phi), np.sin(phi)
    wx = c * ux + s * (cp * e1x + spp * e2x)
    wy = c * uy + s * (cp * e1y + spp * e2y)
    wz = c * uz + s * (cp * e1z + spp * e2z)
    nw = np.sqrt(wx * wx + wy * wy + wz * wz)
    return sp * wx / nw, sp * wy / nw, sp * wz / nw


# ---------------------------------------------------------------------------
# jump process


@dataclass
class JumpProcessSpec:
    """Velocity-jump process with total rate ``rate`` at speed ``speed``.

    ``chi_tables[j]`` holds the deflection at the quantiles u = i/(n-1) of
    the collision draw for charge class j (chosen with probability
    ``weights[j]``); for impact parameters b = b_max sqrt(u) this is chi(b).
    """

    rate: float
    speed: float
    chi_tables: np.ndarray
    weights: np.ndarray
    kernel: object = None
    label: str = ""

    def __post_init__(self):
        self.chi_tables = np.atleast_2d(np.asarray(self.chi_tables, dtype=float))
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.isfinite(self.rate) or self.rate < 0:
            raise ValueError("total rate must be finite and nonnegative")

    @classmethod
    def isotropic(cls, rate, speed=1.0):
        u = np.linspace(0.0, 1.0, _TABLE_SIZE)
        return cls(rate, speed, np.arccos(np.clip(1.0 - 2.0 * u, -1, 1))[None], np.ones(1), label="isotropic")

    @classmethod
    def null(cls, speed=1.0):
        return cls(0.0, speed, np.zeros((1, _TABLE_SIZE)), np.ones(1), label="no collisions")

    @classmethod
    def from_family(cls, family, law=None, M=None, speed=1.0, kernel=None):
        """Collisions with the near part Phi_B, impact parameters up to M lambda.

        Deflections are tabulated in collision-length units from the
        two-body problem for each charge of the law.
        """
        law = law or ChargeLaw.single(1.0)
        Mv = family.M if M is None else float(M)
        lam = family.collision_length
        if lam <= 0:
            raise ValueError("family has no collision length; there is no Boltzmann kernel")
        u = np.linspace(0.0, 1.0, _TABLE_SIZE)
        b = Mv * np.sqrt(u)
        tables = []
        for q in law.charges:
            p = ScatteringProblem.from_family(family, Mv, speed, q)
            chi = np.empty(len(b))
            for i, bi in enumerate(b):
                chi[i] = _abs_angle(p, bi)
            tables.append(chi)
        rate = speed * np.pi * (Mv * lam) ** 2
        return cls(rate, speed, np.array(tables), np.array(law.weights), kernel,
                   label=f"{family.variant} s={family.s} M={Mv}")


def _abs_angle(p, b):
    if b == 0.0:
        return np.pi
    if b >= p.reach:
        return 0.0
    try:
        return abs(float(scattering_angle(p, b)))
    except CaptureError:
        # captured orbits are not produced by repulsive near parts; treat as backscatter
        return np.pi


@njit(cache=True)
def _jump_paths(keys, v0, times, rate, tables, cumw):
    n = keys.shape[0]
    nt = times.shape[0]
    out = np.empty((n, nt, 3))
    counts = np.zeros(n, dtype=np.int64)
    m = tables.shape[1] - 1
    for i in range(n):
        key = keys[i]
        vx, vy, vz = v0[i, 0], v0[i, 1], v0[i, 2]
        ctr = 0
        if rate > 0:
            t_next = -np.log(uniform_open(key, ctr)) / rate
        else:
            t_next = np.inf
        ctr += 1
        for k in range(nt):
            while t_next <= times[k]:
                uc = uniform(key, ctr)
                j = 0
                while j < cumw.shape[0] - 1 and uc >= cumw[j]:
                    j += 1
                x = uniform(key, ctr + 1) * m
                i0 = min(int(x), m - 1)
                fr = x - i0
                chi = (1.0 - fr) * tables[j, i0] + fr * tables[j, i0 + 1]
                phi = 2.0 * np.pi * uniform(key, ctr + 2)
                vx, vy, vz = _rotate(vx, vy, vz, chi, phi)
                counts[i] += 1
                t_next += -np.log(uniform_open(key, ctr + 3)) / rate
                ctr += 4
            out[i, k, 0] = vx
            out[i, k, 1] = vy
            out[i, k, 2] = vz
    return out, counts


@dataclass
class PathEnsemble:
    times: np.ndarray
    velocities: np.ndarray  # (paths, times, 3)
    events: np.ndarray = None
    initial: np.ndarray = None

    @property
    def n_paths(self):
        return self.velocities.shape[0]

    def cosines(self):
        """cos of the angle between v(0) and v(t) for every path and time."""
        v = self.velocities
        u = v / np.linalg.norm(v, axis=2, keepdims=True)
        u0 = self.initial / np.linalg.norm(self.initial, axis=1, keepdims=True)
        return np.einsum("ptk,pk->pt", u, u0)


def _initial(v0, n):
    v0 = np.asarray(v0, dtype=float)
    if v0.ndim == 1:
        v0 = np.tile(v0, (n, 1))
    return np.ascontiguousarray(v0)


def simulate_jump(spec, v0, t_end=None, seed=0, times=None, n_paths=1):
    """Velocities of ``n_paths`` jump-process paths at the given times."""
    if times is None:
        times = np.array([0.0, float(t_end)])
    times = np.asarray(times, dtype=float)
    v0 = _initial(v0, n_paths)
    cumw = np.cumsum(spec.weights)
    cumw[-1] = 1.0
    vel, counts = _jump_paths(_keys(seed, n_paths), v0, times, float(spec.rate), spec.chi_tables, cumw)
    return PathEnsemble(times, vel, counts, v0)


# ---------------------------------------------------------------------------
# sphere diffusion


@dataclass
class SphereDiffusionSpec:
    """Brownian motion on the sphere |v| = speed with generator kappa * Laplace-Beltrami.

    Each step adds a tangent Gaussian increment with variance 2 kappa dt per
    tangential direction and projects back to the sphere.
    """

    kappa: float
    speed: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.kappa) or self.kappa < 0:
            raise ValueError("kappa must be finite and nonnegative")

    @classmethod
    def from_sigma(cls, ev, T, law=None, speed=1.0):
        """kappa = mu2 sigma_perp(T) / (2 T): the per-component deflection variance rate."""
        law = law or ChargeLaw.symmetric()
        perp = ev.components(T)[0]
        return cls(law.second_moment * perp / (2.0 * T), speed)


@njit(cache=True)
def _sphere_paths(keys, v0, times, kappa, dt):
    n = keys.shape[0]
    nt = times.shape[0]
    out = np.empty((n, nt, 3))
    amp = np.sqrt(2.0 * kappa * dt)
    for i in range(n):
        key = keys[i]
        vx, vy, vz = v0[i, 0], v0[i, 1], v0[i, 2]
        sp = np.sqrt(vx * vx + vy * vy + vz * vz)
        ux, uy, uz = vx / sp, vy / sp, vz / sp
        t = 0.0
        ctr = 0
        for k in range(nt):
            while t < times[k] - 1e-12 * max(1.0, times[k]):
                h = min(dt, times[k] - t)
                a = np.sqrt(2.0 * kappa * h) if h < dt else amp
                # tangent frame
                if abs(ux) < 0.9:
                    ax, ay, az = 1.0, 0.0, 0.0
                else:
                    ax, ay, az = 0.0, 1.0, 0.0
                e1x = ay * uz - az * uy
                e1y = az * ux - ax * uz
                e1z = ax * uy - ay * ux
                n1 = np.sqrt(e1x * e1x + e1y * e1y + e1z * e1z)
                e1x, e1y, e1z = e1x / n1, e1y / n1, e1z / n1
                e2x = uy * e1z - uz * e1y
                e2y = uz * e1x - ux * e1z
                e2z = ux * e1y - uy * e1x
                g1, g2 = normal_pair(key, ctr)
                ctr += 2
                wx = ux + a * (g1 * e1x + g2 * e2x)
                wy = uy + a * (g1 * e1y + g2 * e2y)
                wz = uz + a * (g1 * e1z + g2 * e2z)
                nw = np.sqrt(wx * wx + wy * wy + wz * wz)
                ux, uy, uz = wx / nw, wy / nw, wz / nw
                t += h
            out[i, k, 0] = sp * ux
            out[i, k, 1] = sp * uy
            out[i, k, 2] = sp * uz
    return out


def simulate_sphere_diffusion(spec, v0, t_end=None, dt=None, seed=0, times=None, n_paths=1):
    """Velocities of ``n_paths`` sphere-diffusion paths at the given times."""
    if times is None:
        times = np.array([0.0, float(t_end)])
    times = np.asarray(times, dtype=float)
    if dt is None:
        dt = 1e-3 / spec.kappa if spec.kappa > 0 else float(times[-1]) or 1.0
    if spec.kappa > 0 and dt > 1e-3 / spec.kappa * (1 + 1e-12):
        raise ValueError("time step must satisfy dt <= 1e-3 / kappa")
    v0 = _initial(v0, n_paths)
    vel = _sphere_paths(_keys(seed, n_paths), v0, times, float(spec.kappa), float(dt))
    return PathEnsemble(times, vel, None, v0)


# ---------------------------------------------------------------------------
# particle simulation in a periodic cloud


@njit(cache=True)
def _periodic_force(spos, sq, starts, ncell, h, box, kind, p, rc, x):
    fx = fy = fz = 0.0
    cx = int(np.floor(x[0] / h)) % ncell
    cy = int(np.floor(x[1] / h)) % ncell
    cz = int(np.floor(x[2] / h)) % ncell
    rc2 = rc * rc
    for ddz in range(-1, 2):
        iz = (cz + ddz) % ncell
        for ddy in range(-1, 2):
            iy = (cy + ddy) % ncell
            for ddx in range(-1, 2):
                ix = (cx + ddx) % ncell
                c = ix + ncell * (iy + ncell * iz)
                for n in range(starts[c], starts[c + 1]):
                    dx = x[0] - spos[n, 0]
                    dy = x[1] - spos[n, 1]
                    dz = x[2] - spos[n, 2]
                    dx -= box * np.round(dx / box)
                    dy -= box * np.round(dy / box)
                    dz -= box * np.round(dz / box)
                    r2 = dx * dx + dy * dy + dz * dz
                    if r2 >= rc2:
                        continue
                    r = np.sqrt(r2)
                    d1 = radial(kind, p, PART_FULL, r)[1]
                    cc = -sq[n] * d1 / r
                    fx += cc * dx
                    fy += cc * dy
                    fz += cc * dz
    return np.array([fx, fy, fz])


@njit(cache=True)
def _particle_paths(spos, sq, starts, ncell, h, box, kind, p, rc, keys, times, dt):
    n = keys.shape[0]
    nt = times.shape[0]
    out = np.empty((n, nt, 3))
    v0 = np.empty((n, 3))
    for i in range(n):
        key = keys[i]
        x = np.array([box * uniform(key, 0), box * uniform(key, 1), box * uniform(key, 2)])
        ct = 2.0 * uniform(key, 3) - 1.0
        st = np.sqrt(max(0.0, 1.0 - ct * ct))
        ph = 2.0 * np.pi * uniform(key, 4)
        v = np.array([st * np.cos(ph), st * np.sin(ph), ct])
        v0[i] = v
        f = _periodic_force(spos, sq, starts, ncell, h, box, kind, p, rc, x)
        t = 0.0
        for k in range(nt):
            while t < times[k] - 1e-12 * max(1.0, times[k]):
                hh = min(dt, times[k] - t)
                vh = v + 0.5 * hh * f
                x = x + hh * vh
                for d in range(3):
                    x[d] -= box * np.floor(x[d] / box)
                f = _periodic_force(spos, sq, starts, ncell, h, box, kind, p, rc, x)
                v = vh + 0.5 * hh * f
                t += hh
            out[i, k] = v
    return out, v0


def interaction_range(family):
    if family.kind == KIND_GAUSS:
        return 4.0 * family.L
    if family.kind == KIND_EXPO:
        return 30.0 * family.L
    raise ValueError("periodic particle simulation needs a rapidly decaying potential")


def simulate_particles(family, law, box, times, n_configs, paths_per_config, seed, dt=0.02, first=0):
    """Velocities of tagged particles in periodic Poisson clouds of side ``box``.

    Each configuration carries ``paths_per_config`` independent particles
    started at uniform positions with isotropic unit velocities; forces are
    cut at :func:`interaction_range` and found with a cell list. Cloud c
    (counted from ``first``) uses seed ``derive_seed(seed, c)``, so a run
    split into consecutive blocks concatenates to the unsplit ensemble.
    """
    times = np.asarray(times, dtype=float)
    rc = interaction_range(family)
    ncell = int(np.floor(box / rc))
    if ncell < 3:
        raise ValueError("box must hold at least three interaction ranges")
    h = box / ncell
    vel, init = [], []
    for c in range(first, first + n_configs):
        s_c = derive_seed(seed, c)
        cfg = sample_config(SamplingDomain.box(0.5 * box, (0.5 * box,) * 3), 1.0, law, s_c)
        pos = np.mod(cfg.positions, box)
        idx = np.minimum((pos / h).astype(np.int64), ncell - 1)
        cid = idx[:, 0] + ncell * (idx[:, 1] + ncell * idx[:, 2])
        order = np.argsort(cid, kind="stable")
        starts = np.searchsorted(cid[order], np.arange(ncell**3 + 1)).astype(np.int64)
        keys = _keys(derive_seed(s_c, 1), paths_per_config)
        v, v0 = _particle_paths(np.ascontiguousarray(pos[order]), np.ascontiguousarray(cfg.charges[order]),
                                starts, ncell, h, float(box), family.kind, family.params(), rc, keys,
                                times, float(dt))
        vel.append(v)
        init.append(v0)
    return PathEnsemble(times, np.concatenate(vel), None, np.concatenate(init))


# ---------------------------------------------------------------------------
# comparison


@dataclass
class ComparisonReport:
    times: list
    w1_distances: list
    autocorr_model: list
    autocorr_particle: list
    autocorr_stderr: list
    tolerances: dict
    verdict: bool

    def to_json(self):
        return json.dumps({
            "times": self.times, "w1_distances": self.w1_distances,
            "autocorr_model": self.autocorr_model, "autocorr_particle": self.autocorr_particle,
            "autocorr_stderr": self.autocorr_stderr, "tolerances": self.tolerances,
            "verdict": "pass" if self.verdict else "fail",
        }, sort_keys=True)


def compare_regimes(particle, model, w1_tol=0.05, band_sigmas=3.0, speed_rtol=0.05):
    """Wasserstein-1 distances of cos(theta(t)) and autocorrelation bands.

    Both ensembles must be sampled at the same normalized times. The verdict
    requires every W1 below ``w1_tol`` and the mean cosines to agree within
    ``band_sigmas`` combined standard errors.
    """
    if len(particle.times) != len(model.times) or not np.allclose(particle.times, model.times):
        raise ValueError("ensembles must share the sampling times")
    sp = np.mean(np.linalg.norm(particle.initial, axis=1))
    sm = np.mean(np.linalg.norm(model.initial, axis=1))
    if abs(sp - sm) > speed_rtol * sm:
        raise NormalizationError(f"mean speeds differ: particle {sp:.6g}, model {sm:.6g}")
    cp = particle.cosines()
    cm = model.cosines()
    w1 = [float(stats.wasserstein_distance(cp[:, k], cm[:, k])) for k in range(cp.shape[1])]
    ap = cp.mean(0)
    am = cm.mean(0)
    se = np.sqrt(cp.var(0, ddof=1) / len(cp) + cm.var(0, ddof=1) / len(cm))
    band_ok = bool(np.all(np.abs(ap - am) <= band_sigmas * np.maximum(se, 1e-15)))
    verdict = bool(all(w < w1_tol for w in w1))
    return ComparisonReport([float(t) for t in particle.times], w1, am.tolist(), ap.tolist(), se.tolist(),
                            {"w1": w1_tol, "band_sigmas": band_sigmas, "bands_within": band_ok}, verdict)
