import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from rhythmlab.timesteps import (
    LogitNormalParams,
    box_muller,
    logistic,
    logit_normal_pdf,
    sample_timestep,
    sample_timesteps,
)


def test_pdf_at_midpoint():
    assert logit_normal_pdf(0.5) == pytest.approx(4 / math.sqrt(2 * math.pi), abs=1e-9)
    assert logit_normal_pdf(0.5) == pytest.approx(1.59577, abs=1e-5)


def test_pdf_vanishes_at_edges():
    assert logit_normal_pdf(1e-9) < 1e-20
    assert logit_normal_pdf(1 - 1e-9) < 1e-20


def test_pdf_integrates_to_one():
    total, _ = integrate.quad(logit_normal_pdf, 0, 1, epsabs=1e-12, epsrel=1e-12, limit=200)
    assert total == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_pdf_domain(t):
    with pytest.raises(ValueError):
        logit_normal_pdf(t)


def test_scale_must_be_positive():
    with pytest.raises(ValueError):
        LogitNormalParams(0.0, 0.0)


@given(st.floats(1e-6, 0.5))
def test_pdf_symmetric_when_centered(t):
    assert logit_normal_pdf(t) == pytest.approx(logit_normal_pdf(1 - t), rel=1e-9)


def test_wider_scale_flattens_midpoint():
    assert logit_normal_pdf(0.5, LogitNormalParams(0, 2)) < logit_normal_pdf(0.5, LogitNormalParams(0, 1))


def test_negative_location_biases_toward_data_side_start():
    mass, _ = integrate.quad(lambda t: logit_normal_pdf(t, LogitNormalParams(-1, 1)), 0, 0.5)
    assert mass > 0.5


def test_logistic_inverse_pairs():
    assert logistic(0.0) == 0.5
    assert logistic(math.log(0.9 / 0.1)) == pytest.approx(0.9, abs=1e-9)


def test_box_muller_moments():
    z = box_muller(np.random.default_rng(0), 200_001)
    assert len(z) == 200_001
    assert abs(z.mean()) < 0.01
    assert z.std() == pytest.approx(1.0, abs=0.01)


def test_samples_monte_carlo_against_pdf():
    t = sample_timesteps(np.random.default_rng(7), 1_000_000)
    assert np.all((t > 0) & (t < 1))
    assert t.mean() == pytest.approx(0.5, abs=0.002)
    edges = np.linspace(0, 1, 51)
    observed, _ = np.histogram(t, bins=edges)
    probs = np.array([integrate.quad(logit_normal_pdf, lo, hi)[0] for lo, hi in zip(edges[:-1], edges[1:])])
    expected = probs / probs.sum() * len(t)
    assert stats.chisquare(observed, expected).pvalue > 0.01


def test_sampling_reproducible():
    a = sample_timesteps(np.random.default_rng(3), 100)
    b = sample_timesteps(np.random.default_rng(3), 100)
    np.testing.assert_array_equal(a, b)
    assert sample_timestep(np.random.default_rng(3)) == sample_timesteps(np.random.default_rng(3), 1)[0]


def test_uniform_baseline_flag():
    t = sample_timesteps(np.random.default_rng(0), 100_000, uniform=True)
    assert t.mean() == pytest.approx(0.5, abs=0.005)
    assert stats.kstest(t, "uniform").pvalue > 0.01
