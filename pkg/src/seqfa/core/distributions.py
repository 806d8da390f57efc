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

"""Probability primitives shared by all other modules.

Every density is evaluated on the log scale. Nothing in here holds state except for
the RngStream, which is owned by exactly one worker at a time.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy import linalg, special, stats

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# added once to the diagonal when a factorization fails, then we give up:
CHOLESKY_JITTER = 1e-9
CORRELATION_TOLERANCE = 1e-8


class ContractViolationError(ValueError):
    """Thrown when the inputs of a numerical routine violate its preconditions."""

    def __init__(self, *, operation: str, problem: str):
        self.operation = operation
        self.problem = problem
        message = f"Precondition of '{operation}' violated: {problem}"
        super().__init__(message)


class DegenerateWeightsError(ContractViolationError):
    """Thrown when no particle carries any weight, i.e. all log-weights are -inf."""

    def __init__(self, *, operation: str, n_particles: int):
        self.n_particles = n_particles
        super().__init__(
            operation=operation,
            problem=f"all {n_particles} log-weights are -inf or undefined",
        )


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor of a symmetric positive definite matrix."""

    lower: np.ndarray
    log_det: float

    @classmethod
    def from_lower(cls, lower: np.ndarray) -> "CholeskyFactor":
        """Wrap an existing lower-triangular factor with positive diagonal."""
        lower = np.asarray(lower, dtype=float)
        diagonal = np.diag(lower)
        if np.any(diagonal <= 0):
            raise ContractViolationError(
                operation="CholeskyFactor",
                problem="the diagonal of a Cholesky factor must be strictly positive",
            )
        return cls(lower=lower, log_det=float(2.0 * np.sum(np.log(diagonal))))

    @classmethod
    def decompose(cls, matrix: np.ndarray) -> "CholeskyFactor":
        """Factor an SPD matrix.

        A matrix that is SPD in exact arithmetic may fail to factor in floating point.
        In that case a jitter of CHOLESKY_JITTER is added to the diagonal once before
        giving up with a ContractViolationError.
        """
        matrix = np.asarray(matrix, dtype=float)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ContractViolationError(
                operation="cholesky", problem=f"matrix of shape {matrix.shape}"
            )
        scale = max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0
        if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-10 * scale):
            raise ContractViolationError(
                operation="cholesky", problem="matrix is not symmetric"
            )
        try:
            lower = np.linalg.cholesky(matrix)
        except np.linalg.LinAlgError:
            log.warning(
                "Cholesky factorization failed, retrying once with jitter %s.",
                CHOLESKY_JITTER,
                extra={"dim": matrix.shape[0]},
            )
            try:
                lower = np.linalg.cholesky(
                    matrix + CHOLESKY_JITTER * np.eye(matrix.shape[0])
                )
            except np.linalg.LinAlgError as error:
                raise ContractViolationError(
                    operation="cholesky",
                    problem="matrix is not positive definite",
                ) from error
        return cls.from_lower(lower)

    @property
    def dim(self) -> int:
        """Dimension of the factored matrix."""
        return self.lower.shape[0]

    def reconstruct(self) -> np.ndarray:
        """The factored matrix lower @ lower.T."""
        return self.lower @ self.lower.T

    def whiten(self, vector: np.ndarray) -> np.ndarray:
        """Solve lower @ x = vector for x (vector may hold one column per draw)."""
        return linalg.solve_triangular(self.lower, vector, lower=True)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (lower @ lower.T) x = rhs."""
        return linalg.cho_solve((self.lower, True), rhs)

    def inverse(self) -> np.ndarray:
        """Inverse of the factored matrix."""
        return self.solve(np.eye(self.dim))


@dataclass
class RngStream:
    """A reproducible random stream identified by (seed, stream_id, counter).

    Every call to `generator` hands out a fresh numpy Generator seeded from the
    current triple and then advances the counter. Replaying a stream from the same
    triple therefore reproduces its output exactly, and streams with distinct
    (seed, stream_id) are independent.
    """

    seed: int
    stream_id: int = 0
    counter: int = 0

    def generator(self) -> np.random.Generator:
        """Return the generator for the current counter and advance the counter."""
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, self.counter)
        )
        self.counter += 1
        return np.random.Generator(np.random.PCG64(sequence))

    def derive(self, *keys: int) -> "RngStream":
        """Derive an independent child stream labelled by the given keys."""
        sequence = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(self.stream_id, *keys)
        )
        child_id = int(sequence.generate_state(1, dtype=np.uint64)[0])
        return RngStream(seed=self.seed, stream_id=child_id)


def _check_vector(operation: str, vector: np.ndarray, dim: int) -> None:
    if vector.shape[-1] != dim:
        raise ContractViolationError(
            operation=operation,
            problem=f"expected trailing dimension {dim}, got shape {vector.shape}",
        )


def mvn_logpdf(
    x: np.ndarray, mean: np.ndarray, cov_chol: CholeskyFactor
) -> Union[float, np.ndarray]:
    """Log density of N(mean, L L^T) at x, computed with a triangular solve.

    x may be a single point (d,) or a stack of points (n, d); in the latter case an
    array of n log densities is returned.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    dim = cov_chol.dim
    _check_vector("mvn_logpdf", x, dim)
    _check_vector("mvn_logpdf", mean, dim)
    residual = np.atleast_2d(x - mean)
    whitened = cov_chol.whiten(residual.T)
    values = -0.5 * (
        dim * LOG_2PI + cov_chol.log_det + np.sum(whitened**2, axis=0)
    )
    return float(values[0]) if x.ndim == 1 else values


def lkj_log_normalizer(dim: int, eta: float) -> float:
    """Log of the normalizing constant of the LKJ(eta) density in the given dimension."""
    log_c = 0.0
    for k in range(1, dim):
        log_c += (2.0 * eta - 2.0 + dim - k) * (dim - k) * np.log(2.0)
        beta_arg = eta + 0.5 * (dim - k - 1)
        log_c += (dim - k) * special.betaln(beta_arg, beta_arg)
    return float(-log_c)


def lkj_logpdf(corr_chol: CholeskyFactor, eta: float) -> float:
    """Log density of LKJ(eta) at the correlation matrix factored by corr_chol."""
    if eta <= 0:
        raise ContractViolationError(operation="lkj_logpdf", problem="eta must be > 0")
    diagonal = np.sum(corr_chol.lower**2, axis=1)
    if not np.allclose(diagonal, 1.0, rtol=0.0, atol=CORRELATION_TOLERANCE):
        raise ContractViolationError(
            operation="lkj_logpdf",
            problem="factor does not reconstruct a unit-diagonal correlation matrix",
        )
    return lkj_log_normalizer(corr_chol.dim, eta) + (eta - 1.0) * corr_chol.log_det


def inv_wishart_logpdf(cov: np.ndarray, scale: np.ndarray, df: float) -> float:
    """Exact log density of the inverse Wishart distribution.

    The parameterization is the one where the mean equals scale / (df - d - 1).
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    dim = scale.shape[0]
    if cov.shape != scale.shape:
        raise ContractViolationError(
            operation="inv_wishart_logpdf",
            problem=f"shapes {cov.shape} and {scale.shape} differ",
        )
    if df <= dim - 1:
        raise ContractViolationError(
            operation="inv_wishart_logpdf", problem=f"df={df} must exceed {dim - 1}"
        )
    # raises for matrices that are not SPD:
    CholeskyFactor.decompose(cov)
    return float(stats.invwishart.logpdf(cov, df=df, scale=scale))


def inv_gamma_logpdf(
    x: Union[float, np.ndarray], shape: float, rate: Union[float, np.ndarray]
) -> Union[float, np.ndarray]:
    """Log density of InvGamma(shape, rate); -inf for x <= 0 by convention."""
    x_arr = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(
            x_arr > 0,
            stats.invgamma.logpdf(np.where(x_arr > 0, x_arr, 1.0), a=shape, scale=rate),
            -np.inf,
        )
    return float(values) if values.ndim == 0 else values


def sample_mvn(
    mean: np.ndarray,
    cov_chol: CholeskyFactor,
    rng: np.random.Generator,
    size: Optional[int] = None,
) -> np.ndarray:
    """Draw mean + L xi with xi standard normal (size draws stacked row-wise)."""
    mean = np.asarray(mean, dtype=float)
    _check_vector("sample_mvn", mean, cov_chol.dim)
    if size is None:
        return mean + cov_chol.lower @ rng.standard_normal(cov_chol.dim)
    noise = rng.standard_normal((size, cov_chol.dim))
    return mean + noise @ cov_chol.lower.T


def log_sum_exp(values: np.ndarray) -> float:
    """Numerically stable log(sum(exp(values)))."""
    return float(special.logsumexp(np.asarray(values, dtype=float)))


def log_mean_exp(values: np.ndarray) -> float:
    """Numerically stable log(mean(exp(values)))."""
    values = np.asarray(values, dtype=float)
    return log_sum_exp(values) - float(np.log(values.size))


def log_weighted_mean_exp(logw: np.ndarray, values: np.ndarray) -> float:
    """log( sum_m w_m exp(values_m) / sum_m w_m ) with w given on the log scale."""
    logw = np.asarray(logw, dtype=float)
    values = np.asarray(values, dtype=float)
    with np.errstate(invalid="ignore"):
        return log_sum_exp(logw + values) - log_sum_exp(logw)


def normalized_weights(logw: np.ndarray, *, operation: str) -> np.ndarray:
    """Turn log-weights into probabilities summing to one."""
    logw = np.asarray(logw, dtype=float)
    finite = np.isfinite(logw)
    if not np.any(finite):
        raise DegenerateWeightsError(operation=operation, n_particles=logw.size)
    shifted = np.where(finite, logw - np.max(logw[finite]), -np.inf)
    weights = np.exp(shifted)
    return weights / np.sum(weights)


def multinomial_resample(logw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw len(logw) ancestor indices i.i.d. with probability proportional to exp(logw)."""
    weights = normalized_weights(logw, operation="multinomial_resample")
    return rng.choice(weights.size, size=weights.size, replace=True, p=weights)
