# Copyright 2021 - 2023 Universität Tübingen, DKFZ, EMBL, and Universität zu Köln
# for the German Human Genome-Phenome Archive (GHGA)
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Tests for the density, factorization and random stream primitives."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from seqfa.core.distributions import (
    CholeskyFactor,
    ContractViolationError,
    DegenerateWeightsError,
    RngStream,
    inv_gamma_logpdf,
    inv_wishart_logpdf,
    lkj_logpdf,
    log_mean_exp,
    log_weighted_mean_exp,
    multinomial_resample,
    mvn_logpdf,
    normalized_weights,
    sample_mvn,
)
from seqfa.core.smc import ess

COV = np.array([[2.0, 0.6, 0.1], [0.6, 1.0, -0.3], [0.1, -0.3, 0.8]])
MEAN = np.array([0.5, -1.0, 0.2])


def test_cholesky_reconstructs_and_solves():
    """The factor reproduces the matrix and its log determinant."""
    chol = CholeskyFactor.decompose(COV)

    assert_allclose(chol.reconstruct(), COV, atol=1e-12)
    assert chol.log_det == pytest.approx(np.log(np.linalg.det(COV)))
    rhs = np.array([1.0, 2.0, 3.0])
    assert_allclose(COV @ chol.solve(rhs), rhs, atol=1e-10)
    assert_allclose(chol.inverse() @ COV, np.eye(3), atol=1e-10)


@pytest.mark.parametrize(
    "matrix",
    [
        np.array([[1.0, 0.5], [0.0, 1.0]]),
        np.array([[1.0, 2.0], [2.0, 1.0]]),
        np.ones((2, 3)),
    ],
    ids=["asymmetric", "indefinite", "not-square"],
)
def test_cholesky_rejects_bad_matrices(matrix: np.ndarray):
    """Matrices that are not SPD cannot be factored."""
    with pytest.raises(ContractViolationError):
        CholeskyFactor.decompose(matrix)


def test_cholesky_from_lower_requires_positive_diagonal():
    """A factor with a non-positive diagonal entry is rejected."""
    with pytest.raises(ContractViolationError):
        CholeskyFactor.from_lower(np.array([[1.0, 0.0], [0.3, -0.2]]))


def test_mvn_logpdf_matches_scipy():
    """Single points and stacks of points agree with scipy."""
    chol = CholeskyFactor.decompose(COV)
    points = np.array([[0.0, 0.0, 0.0], [1.0, -2.0, 0.5], [3.0, 1.0, -1.0]])

    expected = stats.multivariate_normal.logpdf(points, mean=MEAN, cov=COV)
    assert_allclose(mvn_logpdf(points, MEAN, chol), expected, rtol=1e-12)
    assert mvn_logpdf(points[1], MEAN, chol) == pytest.approx(expected[1])


def test_mvn_logpdf_dimension_mismatch():
    """Points of the wrong dimension violate the contract."""
    chol = CholeskyFactor.decompose(COV)
    with pytest.raises(ContractViolationError):
        mvn_logpdf(np.zeros(2), MEAN, chol)


def test_lkj_uniform_in_two_dimensions():
    """LKJ(1) on 2x2 correlations is uniform on (-1, 1), density 1/2."""
    for r in (0.0, 0.4, -0.9):
        chol = CholeskyFactor.decompose(np.array([[1.0, r], [r, 1.0]]))
        assert lkj_logpdf(chol, 1.0) == pytest.approx(-np.log(2.0))


def test_lkj_rejects_non_correlation_factor():
    """A factor of a covariance with non-unit diagonal is not a correlation factor."""
    with pytest.raises(ContractViolationError):
        lkj_logpdf(CholeskyFactor.decompose(COV), 2.0)


def test_lkj_density_integrates_to_one():
    """LKJ(eta) in two dimensions integrates to one over r."""
    from scipy import integrate

    def density(r: float) -> float:
        chol = CholeskyFactor.decompose(np.array([[1.0, r], [r, 1.0]]))
        return float(np.exp(lkj_logpdf(chol, 3.0)))

    total, _ = integrate.quad(density, -0.999999, 0.999999)
    assert total == pytest.approx(1.0, abs=1e-4)


def test_inv_wishart_matches_scipy():
    """The exact inverse Wishart density agrees with scipy."""
    scale = np.eye(3)
    expected = stats.invwishart.logpdf(COV, df=7, scale=scale)
    assert inv_wishart_logpdf(COV, scale, 7) == pytest.approx(expected)


def test_inv_wishart_contract():
    """Too few degrees of freedom or mismatched shapes violate the contract."""
    with pytest.raises(ContractViolationError):
        inv_wishart_logpdf(COV, np.eye(3), 1.5)
    with pytest.raises(ContractViolationError):
        inv_wishart_logpdf(COV, np.eye(2), 7)


def test_inv_gamma_support():
    """Non-positive arguments have log density -inf."""
    values = inv_gamma_logpdf(np.array([-1.0, 0.0, 0.5]), 2.5, 1.5)

    assert values[0] == -np.inf
    assert values[1] == -np.inf
    assert values[2] == pytest.approx(stats.invgamma.logpdf(0.5, a=2.5, scale=1.5))


def test_sample_mvn_moments():
    """Draws have the requested mean and covariance."""
    rng = np.random.default_rng(3)
    draws = sample_mvn(MEAN, CholeskyFactor.decompose(COV), rng, size=200_000)

    assert_allclose(draws.mean(axis=0), MEAN, atol=0.02)
    assert_allclose(np.cov(draws, rowvar=False), COV, atol=0.03)


def test_log_mean_exp_stable():
    """Huge log values do not overflow."""
    assert log_mean_exp(np.array([1000.0, 1000.0])) == pytest.approx(1000.0)
    assert log_weighted_mean_exp(
        np.array([0.0, -np.inf]), np.array([5.0, 1e6])
    ) == pytest.approx(5.0)


def test_ess_examples():
    """Equal weights give ESS N, weights (2, 1, 1) give 16 / 6."""
    assert ess(np.zeros(7)) == pytest.approx(7.0)
    assert ess(np.log(np.array([2.0, 1.0, 1.0]))) == pytest.approx(16.0 / 6.0)
    assert ess(np.array([0.0, -np.inf, -np.inf])) == pytest.approx(1.0)


def test_degenerate_weights():
    """Normalizing all -inf log-weights is an error."""
    with pytest.raises(DegenerateWeightsError):
        normalized_weights(np.full(4, -np.inf), operation="test")


def test_multinomial_resample_ignores_dead_particles():
    """Particles without weight are never chosen as ancestors."""
    logw = np.array([0.0, -np.inf, np.log(3.0), -np.inf])
    ancestors = multinomial_resample(logw, np.random.default_rng(0))

    assert ancestors.shape == (4,)
    assert set(ancestors.tolist()) <= {0, 2}


def test_rng_stream_replay():
    """A stream restarted from the same triple reproduces its draws."""
    stream = RngStream(seed=42)
    first = stream.generator().standard_normal(5)
    second = stream.generator().standard_normal(5)
    assert stream.counter == 2
    assert not np.allclose(first, second)

    replay = RngStream(seed=42)
    assert_allclose(replay.generator().standard_normal(5), first)
    resumed = RngStream(seed=42, stream_id=0, counter=1)
    assert_allclose(resumed.generator().standard_normal(5), second)


def test_rng_stream_derive():
    """Derived streams are deterministic in their keys and distinct from each other."""
    parent = RngStream(seed=5)
    child_a = parent.derive(1, 0)
    child_b = parent.derive(1, 1)

    assert child_a == parent.derive(1, 0)
    assert child_a.stream_id != child_b.stream_id
    assert not np.allclose(
        child_a.generator().standard_normal(3), child_b.generator().standard_normal(3)
    )
    # deriving does not consume the parent:
    assert parent.counter == 0
