import numpy as np
import pytest
from scipy import stats

from holtsmark.kinetics import (
    JumpProcessSpec, NormalizationError, PathEnsemble, SphereDiffusionSpec, compare_regimes,
    interaction_range, simulate_jump, simulate_particles, simulate_sphere_diffusion,
)
from holtsmark.potentials import PotentialFamily
from holtsmark.scatterers import ChargeLaw
from holtsmark.timescales import SigmaEvaluator

EX = np.array([1.0, 0.0, 0.0])


def isotropic_start(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


# --- jump process


def test_null_kernel_keeps_velocity():
    ens = simulate_jump(JumpProcessSpec.null(), EX, t_end=50.0, seed=1, n_paths=100)
    np.testing.assert_array_equal(ens.velocities, np.tile(EX, (100, 2, 1)))
    assert np.all(ens.events == 0)


def test_isotropic_jump_directions_are_uniform():
    ens = simulate_jump(JumpProcessSpec.isotropic(1.0), EX, times=[0.0, 0.5], seed=2, n_paths=20000)
    jumped = ens.events > 0
    # after at least one isotropic jump the direction forgets v0
    c = ens.cosines()[jumped, 1]
    assert stats.kstest(c, stats.uniform(-1, 2).cdf).pvalue > 1e-3


def test_mean_jump_count_matches_rate():
    rate, t, n = 2.0, 3.0, 10000
    ens = simulate_jump(JumpProcessSpec.isotropic(rate), EX, t_end=t, seed=3, n_paths=n)
    assert abs(ens.events.mean() - rate * t) < 3.0 * np.sqrt(rate * t / n)


def test_jump_process_preserves_speed():
    spec = JumpProcessSpec.from_family(PotentialFamily("power", 0.1, s=2.0), M=5.0, speed=1.5)
    ens = simulate_jump(spec, 1.5 * EX, times=np.linspace(0, 10, 6), seed=4, n_paths=500)
    np.testing.assert_allclose(np.linalg.norm(ens.velocities, axis=2), 1.5, rtol=1e-12)


def test_rate_from_family():
    fam = PotentialFamily("power", 0.1, s=2.0)
    spec = JumpProcessSpec.from_family(fam, M=5.0, speed=2.0)
    assert spec.rate == pytest.approx(2.0 * np.pi * (5.0 * 0.1) ** 2)
    assert spec.chi_tables.shape[0] == 1
    # grazing end of the table deflects least
    assert spec.chi_tables[0, -1] < spec.chi_tables[0, 1]
    with pytest.raises(ValueError):
        JumpProcessSpec.from_family(PotentialFamily("weak_wide", 0.1, L0=1.0))


def test_jump_two_time_joint_is_swap_symmetric():
    # reversibility: (u0.z, ut.z) and (ut.z, u0.z) have the same law for isotropic starts
    spec = JumpProcessSpec.from_family(PotentialFamily("power", 0.2, s=2.0), M=5.0)
    n = 40000
    ens = simulate_jump(spec, isotropic_start(n, 5), times=[0.0, 1.0 / spec.rate], seed=5, n_paths=n)
    u = ens.velocities / np.linalg.norm(ens.velocities, axis=2, keepdims=True)
    edges = np.linspace(-1, 1, 7)
    N = np.histogram2d(u[:, 0, 2], u[:, 1, 2], bins=[edges, edges])[0]
    iu = np.triu_indices(6, 1)
    a, b = N[iu], N.T[iu]
    chi2 = np.sum((a - b) ** 2 / np.maximum(a + b, 1))
    assert stats.chi2.sf(chi2, len(a)) > 1e-3


def test_negative_rate_rejected():
    with pytest.raises(ValueError):
        JumpProcessSpec.isotropic(-1.0)


# --- sphere diffusion


def test_zero_kappa_keeps_velocity():
    ens = simulate_sphere_diffusion(SphereDiffusionSpec(0.0), EX, t_end=5.0, seed=1, n_paths=10)
    np.testing.assert_array_equal(ens.velocities[:, -1], np.tile(EX, (10, 1)))


def test_time_step_limit():
    with pytest.raises(ValueError):
        simulate_sphere_diffusion(SphereDiffusionSpec(1.0), EX, t_end=1.0, dt=2e-3, seed=1)
    with pytest.raises(ValueError):
        SphereDiffusionSpec(-0.1)


def test_sphere_diffusion_preserves_speed():
    ens = simulate_sphere_diffusion(SphereDiffusionSpec(0.5, speed=2.0), 2.0 * EX, t_end=1.0, seed=2, n_paths=50)
    np.testing.assert_allclose(np.linalg.norm(ens.velocities, axis=2), 2.0, rtol=1e-12)


@pytest.fixture(scope="module")
def diffusion_paths():
    kappa = 0.5
    times = np.linspace(0.0, 2.0 / kappa, 9)
    spec = SphereDiffusionSpec(kappa)
    return kappa, simulate_sphere_diffusion(spec, EX, times=times, seed=6, n_paths=10000)


def test_first_harmonic_decays_at_twice_kappa(diffusion_paths):
    kappa, ens = diffusion_paths
    c = ens.cosines().mean(0)
    slope = np.polyfit(ens.times, np.log(c), 1)[0]
    assert -slope == pytest.approx(2.0 * kappa, rel=0.05)


def test_second_harmonic_decays_three_times_faster(diffusion_paths):
    kappa, ens = diffusion_paths
    c = ens.cosines()
    keep = ens.times <= 0.5 / kappa  # P2 mean falls to e^-3 there, still well resolved
    r1 = -np.polyfit(ens.times[keep], np.log(c.mean(0)[keep]), 1)[0]
    r2 = -np.polyfit(ens.times[keep], np.log((1.5 * c**2 - 0.5).mean(0)[keep]), 1)[0]
    assert r2 / r1 == pytest.approx(3.0, rel=0.1)


def test_long_time_uniformization():
    kappa = 1.0
    ens = simulate_sphere_diffusion(SphereDiffusionSpec(kappa), EX, t_end=20.0 / kappa, seed=7, n_paths=4000)
    u = ens.velocities[:, -1]
    for k in range(3):
        assert stats.kstest(u[:, k], stats.uniform(-1, 2).cdf).pvalue > 1e-3


def test_kappa_from_sigma():
    ev = SigmaEvaluator(PotentialFamily("weak_wide", 0.1, L0=1.0))
    spec = SphereDiffusionSpec.from_sigma(ev, 50.0)
    assert spec.kappa == pytest.approx(ev.components(50.0)[0] / 100.0)


# --- particles and comparison


def test_identical_ensembles_have_zero_distance():
    ens = simulate_sphere_diffusion(SphereDiffusionSpec(0.3), EX, times=np.linspace(0, 2, 5), seed=8, n_paths=300)
    rep = compare_regimes(ens, ens)
    assert rep.w1_distances == [0.0] * 5
    assert rep.verdict
    assert rep.tolerances["bands_within"]


def test_speed_mismatch_is_rejected():
    times = np.linspace(0, 1, 5)
    a = simulate_sphere_diffusion(SphereDiffusionSpec(0.3), EX, times=times, seed=1, n_paths=10)
    b = simulate_sphere_diffusion(SphereDiffusionSpec(0.3, speed=2.0), 2.0 * EX, times=times, seed=1, n_paths=10)
    with pytest.raises(NormalizationError):
        compare_regimes(a, b)
    c = simulate_sphere_diffusion(SphereDiffusionSpec(0.3), EX, times=times[:3], seed=1, n_paths=10)
    with pytest.raises(ValueError):
        compare_regimes(a, c)


def test_particle_blocks_concatenate():
    fam = PotentialFamily("weak_wide", 0.1, L0=0.5)
    law = ChargeLaw.symmetric()
    times = np.array([0.0, 1.0, 2.0])
    whole = simulate_particles(fam, law, 8.0, times, 3, 4, seed=9)
    parts = [simulate_particles(fam, law, 8.0, times, 1, 4, seed=9, first=c) for c in range(3)]
    np.testing.assert_array_equal(whole.velocities, np.concatenate([p.velocities for p in parts]))
    np.testing.assert_allclose(np.linalg.norm(whole.initial, axis=1), 1.0, rtol=1e-12)


def test_particle_speed_nearly_conserved():
    # Verlet in a smooth field: |v| changes only through the bounded potential
    fam = PotentialFamily("weak_wide", 0.05, L0=0.5)
    ens = simulate_particles(fam, ChargeLaw.symmetric(), 8.0, np.array([0.0, 5.0]), 2, 50, seed=10)
    speed = np.linalg.norm(ens.velocities[:, -1], axis=1)
    assert np.max(np.abs(speed - 1.0)) < 0.1


def test_particle_simulation_needs_short_range():
    with pytest.raises(ValueError):
        interaction_range(PotentialFamily("power", 0.1, s=2.0))
    with pytest.raises(ValueError):
        simulate_particles(PotentialFamily("weak_wide", 0.1, L0=1.0), ChargeLaw.symmetric(), 8.0,
                           np.array([0.0, 1.0]), 1, 1, seed=0)


def test_path_ensemble_cosines():
    v = np.array([[[1.0, 0, 0], [0, 2.0, 0]], [[0, 0, 3.0], [0, 0, -1.0]]])
    ens = PathEnsemble(np.array([0.0, 1.0]), v, None, v[:, 0])
    np.testing.assert_allclose(ens.cosines(), [[1.0, 0.0], [1.0, -1.0]])
