"""Tests for analytic Gaussian mixture targets."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from nckstein.distributions import (
    GaussianMixture,
    four_mode_mixture,
    imbalanced_mixture,
    log_density,
    perturb,
    sample,
    score,
    tempered_density_grid,
)
from nckstein.errors import DegenerateInputError, DimensionError

coords = st.floats(min_value=-8.0, max_value=8.0, allow_nan=False)


def two_mode(d=2):
    return imbalanced_mixture(d)


def test_single_component_matches_scipy():
    """A one-component mixture is a plain Gaussian."""
    gm = GaussianMixture.from_components([(1.0, (1.0, -2.0), 2.5)])
    x = np.array([[0.3, 0.1], [4.0, -1.0]])
    expected = multivariate_normal(mean=[1.0, -2.0], cov=2.5 * np.eye(2)).logpdf(x)
    np.testing.assert_allclose(log_density(gm, x), expected, rtol=1e-12)
    np.testing.assert_allclose(score(gm, x), -(x - [1.0, -2.0]) / 2.5, rtol=1e-12)


def test_weights_are_normalized_but_kept_raw():
    """Raw weights survive; evaluation uses their normalized form."""
    gm = GaussianMixture.from_components([(2.0, (0.0,), 1.0), (6.0, (3.0,), 1.0)])
    np.testing.assert_allclose(gm.weights, [2.0, 6.0])
    np.testing.assert_allclose(gm.normalized_weights, [0.25, 0.75])
    scaled = GaussianMixture.from_components([(0.25, (0.0,), 1.0), (0.75, (3.0,), 1.0)])
    assert log_density(gm, np.array([1.2])) == pytest.approx(
        log_density(scaled, np.array([1.2])), rel=1e-14
    )


def test_scalar_point_returns_float():
    assert isinstance(log_density(two_mode(), np.zeros(2)), float)
    assert score(two_mode(), np.zeros(2)).shape == (2,)


def test_far_tail_log_density_is_finite():
    """Log-sum-exp keeps points far from every mode finite."""
    value = log_density(two_mode(), np.array([400.0, -400.0]))
    assert np.isfinite(value)
    assert np.all(np.isfinite(score(two_mode(), np.array([[400.0, -400.0]]))))


@settings(max_examples=30, deadline=None)
@given(st.tuples(coords, coords))
def test_score_is_gradient_of_log_density(point):
    """The analytic score agrees with central differences of the log density."""
    gm = four_mode_mixture()
    x = np.array(point)
    numeric = np.array(
        [
            (log_density(gm, x + h) - log_density(gm, x - h)) / 2e-5
            for h in 1e-5 * np.eye(2)
        ]
    )
    np.testing.assert_allclose(score(gm, x), numeric, atol=1e-6, rtol=1e-5)


def test_perturb_adds_noise_variance():
    gm = perturb(two_mode(), 3.0)
    np.testing.assert_allclose(gm.variances, [10.0, 10.0])
    np.testing.assert_allclose(gm.means, two_mode().means)


def test_perturb_composes_in_quadrature():
    gm = four_mode_mixture()
    twice = perturb(perturb(gm, 0.6), 0.8)
    once = perturb(gm, 1.0)
    points = sample(gm, 50, seed=2)
    np.testing.assert_allclose(log_density(twice, points), log_density(once, points), rtol=1e-10)


@pytest.mark.parametrize("sigma", [0.0, -1.0, float("nan")])
def test_perturb_rejects_bad_sigma(sigma):
    with pytest.raises(DegenerateInputError):
        perturb(two_mode(), sigma)


def test_sample_is_deterministic_and_weighted():
    """Equal seeds give equal draws; mode shares follow the weights."""
    gm = two_mode()
    first, second = sample(gm, 4000, seed=3), sample(gm, 4000, seed=3)
    np.testing.assert_array_equal(first, second)
    assert not np.array_equal(first, sample(gm, 4000, seed=4))
    share_high = np.mean(first[:, 0] > 0)
    assert share_high == pytest.approx(0.8, abs=0.03)


@pytest.mark.parametrize(
    "components",
    [
        [(0.0, (0.0,), 1.0)],
        [(-1.0, (0.0,), 1.0), (2.0, (1.0,), 1.0)],
        [(1.0, (0.0,), 0.0)],
    ],
)
def test_invalid_components_rejected(components):
    with pytest.raises(DegenerateInputError):
        GaussianMixture.from_components(components)


def test_dimension_and_finiteness_checks():
    gm = two_mode()
    with pytest.raises(DimensionError):
        log_density(gm, np.zeros((3, 5)))
    with pytest.raises(DegenerateInputError):
        score(gm, np.array([[np.nan, 0.0]]))


def test_tempered_grid_orientation():
    """``density[i, j]`` is evaluated at ``(xs[j], ys[i])``."""
    gm = GaussianMixture.from_components([(1.0, (3.0, -3.0), 1.0)])
    xs, ys, density = tempered_density_grid(gm, 1.0, -4.0, 4.0, 9)
    i, j = np.unravel_index(np.argmax(density), density.shape)
    assert (xs[j], ys[i]) == (3.0, -3.0)


def test_tempering_flattens_density():
    """Larger beta lifts the low-weight mode relative to the heavy one."""
    gm = four_mode_mixture()
    ratios = []
    for beta in (0.5, 1.0, 4.0):
        _, _, density = tempered_density_grid(gm, beta, -10.0, 10.0, 41, normalize=True)
        assert density.sum() == pytest.approx(1.0)
        ratios.append(density.min() / density.max())
    assert ratios[0] < ratios[1] < ratios[2]


def test_scaled_placement_keeps_planar_separation():
    for d in (2, 8, 32):
        gm = imbalanced_mixture(d, placement="scaled")
        separation = np.linalg.norm(gm.means[0] - gm.means[1])
        assert separation == pytest.approx(np.linalg.norm([10.0, 10.0]))
    literal = imbalanced_mixture(8)
    np.testing.assert_allclose(literal.means[1], np.full(8, 5.0))


def test_unit_temperature_grid_is_the_density():
    gm = four_mode_mixture()
    xs, ys, density = tempered_density_grid(gm, 1.0, -6.0, 6.0, 7, normalize=True)
    gx, gy = np.meshgrid(xs, ys)
    direct = np.exp(log_density(gm, np.column_stack([gx.ravel(), gy.ravel()]))).reshape(gx.shape)
    np.testing.assert_array_equal(density, direct / direct.sum())


def test_vanishing_perturbation_recovers_mixture():
    gm = two_mode()
    x = np.array([[0.5, -1.0], [4.0, 5.5]])
    np.testing.assert_allclose(
        np.exp(log_density(perturb(gm, 1e-8), x)), np.exp(log_density(gm, x)), atol=1e-6
    )
