import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from holtsmark.rng import derive_seed, stream_keys, uniform_array
from holtsmark.scatterers import ChargeLaw, SamplingDomain, ScattererConfig, is_neutral, sample_config


def test_ball_mean_count_in_poisson_band():
    dom = SamplingDomain.ball(10.0)
    counts = np.array([len(sample_config(dom, 1.0, None, derive_seed(4, k))) for k in range(10_000)])
    mean = 4.0 * np.pi / 3.0 * 1000.0
    band = 3.0 * np.sqrt(mean / len(counts))
    assert abs(counts.mean() - mean) < band


@pytest.mark.parametrize("dom", [SamplingDomain.ball(2.0), SamplingDomain.box((1.0, 2.0, 0.5)),
                                 SamplingDomain.displaced_ball(3.0, (0.2, 0, 0), 1.5)])
def test_count_variance_matches_mean(dom):
    counts = np.array([len(sample_config(dom, 1.0, None, derive_seed(2, k))) for k in range(10_000)])
    assert abs(counts.var(ddof=1) / counts.mean() - 1.0) < 0.05


def test_neutral_law_mean_charge():
    cfg = sample_config(SamplingDomain.ball(29.0), 1.0, ChargeLaw.symmetric(), seed=5)
    q = cfg.charges[:100_000]
    assert len(q) == 100_000
    assert abs(q.mean()) < 3.0 / np.sqrt(len(q))


@pytest.mark.parametrize("law,expected", [
    (ChargeLaw((1.0, -1.0), (0.5, 0.5)), True),
    (ChargeLaw((1.0,), (1.0,)), False),
    (ChargeLaw((2.0, -1.0), (1 / 3, 2 / 3)), True),
])
def test_is_neutral(law, expected):
    assert is_neutral(law) is expected


@pytest.mark.parametrize("bad", [((1.0, 1.0), (0.5, 0.5)), ((1.0,), (0.5,)), ((1.0, -1.0), (1.2, -0.2)),
                                 ((), ())])
def test_invalid_laws_rejected(bad):
    with pytest.raises(ValueError):
        ChargeLaw(*bad)


def test_points_inside_domain_and_uniform_radius():
    dom = SamplingDomain.ball(5.0, (1.0, -2.0, 0.5))
    cfg = sample_config(dom, 2.0, None, 11)
    assert np.all(dom.contains(cfg.positions))
    r = np.linalg.norm(cfg.positions - np.array(dom.center), axis=1) / 5.0
    # radial CDF of a uniform ball is r^3
    assert stats.kstest(r**3, "uniform").pvalue > 1e-3


def test_box_points_uniform_per_axis():
    dom = SamplingDomain.box((2.0, 1.0, 3.0))
    cfg = sample_config(dom, 1.0, None, 3)
    for k, h in enumerate(dom.half_widths):
        assert stats.kstest((cfg.positions[:, k] + h) / (2 * h), "uniform").pvalue > 1e-3


def test_charge_frequencies():
    law = ChargeLaw((2.0, -1.0, 0.5), (0.2, 0.5, 0.3))
    cfg = sample_config(SamplingDomain.ball(15.0), 1.0, law, 4)
    obs = np.array([np.sum(cfg.charges == q) for q in law.charges])
    assert stats.chisquare(obs, np.array(law.weights) * len(cfg)).pvalue > 1e-3


@given(st.integers(0, 2**64 - 1), st.floats(0.5, 4.0))
def test_same_seed_same_config(seed, R):
    dom = SamplingDomain.ball(R)
    a = sample_config(dom, 1.0, ChargeLaw.symmetric(), seed)
    b = sample_config(dom, 1.0, ChargeLaw.symmetric(), seed)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.charges, b.charges)


def test_different_seeds_differ():
    dom = SamplingDomain.ball(3.0)
    a = sample_config(dom, 1.0, None, 1)
    b = sample_config(dom, 1.0, None, 2)
    assert len(a) != len(b) or not np.array_equal(a.positions, b.positions)


def test_config_json_roundtrip_is_exact():
    cfg = sample_config(SamplingDomain.box((1.0, 2.0, 3.0), (0.5, 0, 0)), 1.5, ChargeLaw.symmetric(), 9)
    back = ScattererConfig.from_json(cfg.to_json())
    assert np.array_equal(back.positions, cfg.positions)
    assert np.array_equal(back.charges, cfg.charges)
    assert back.domain == cfg.domain and back.seed == cfg.seed


def test_config_is_read_only():
    cfg = sample_config(SamplingDomain.ball(2.0), 1.0, None, 0)
    with pytest.raises(ValueError):
        cfg.positions[0, 0] = 1.0


@pytest.mark.parametrize("kw", [dict(intensity=0.0), dict(intensity=-1.0), dict(seed=-1)])
def test_bad_sampling_arguments(kw):
    args = dict(domain=SamplingDomain.ball(1.0), intensity=1.0, law=None, seed=0)
    args.update(kw)
    with pytest.raises(ValueError):
        sample_config(**args)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(7, 3) == derive_seed(7, 3)
    assert len({derive_seed(7, k) for k in range(100)}) == 100


@given(st.integers(0, 2**63), st.integers(0, 10**6))
def test_uniform_counter_addressing(seed, start):
    key = stream_keys(seed)[0]
    full = uniform_array(key, start, 8)
    assert np.all((full >= 0) & (full < 1))
    assert uniform_array(key, start + 3, 1)[0] == full[3]


def test_uniform_stream_is_uniform():
    u = uniform_array(stream_keys(42)[0], 0, 200_000)
    assert stats.kstest(u, "uniform").pvalue > 1e-3
    assert abs(np.corrcoef(u[:-1], u[1:])[0, 1]) < 0.01
