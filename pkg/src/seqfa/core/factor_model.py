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

"""Factor model densities, parameter transforms and posterior targets.

The model is y_i = alpha + Lambda z_i + eps_i with z_i ~ N(0, Phi). Continuous items
have diagonal Gaussian residuals and are handled through the marginal likelihood
y_i ~ N(alpha, Lambda Phi Lambda^T + Psi). Binary items go through a logit or probit
link and are handled on the space augmented with the latent rows.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import special, stats

from seqfa.core.distributions import (
    LOG_2PI,
    CholeskyFactor,
    ContractViolationError,
    inv_gamma_logpdf,
    inv_wishart_logpdf,
    lkj_log_normalizer,
    lkj_logpdf,
    mvn_logpdf,
)
from seqfa.core.models import (
    CellKind,
    Dataset,
    FactorCovMode,
    Link,
    ModelSpec,
    ModelStructure,
    ParameterLayout,
    Theta,
    UnconstrainedTheta,
)

log = logging.getLogger(__name__)

LOG_2 = float(np.log(2.0))


class UnsupportedLinkError(ContractViolationError):
    """Thrown when an operation is requested for a link it does not cover."""

    def __init__(self, *, link: Link, operation: str):
        self.link = link
        super().__init__(
            operation=operation,
            problem=f"the '{link.value}' link is not supported",
        )


@lru_cache(maxsize=128)
def parameter_layout(spec: ModelSpec) -> ParameterLayout:
    """Slices of the unconstrained vector of the given model.

    The order is: intercepts, free and approximate-zero loadings (row-major), factor
    covariance parameters, log residual variances, item correlation parameters.
    """
    cells = tuple(spec.cells_of_kind(CellKind.FREE, CellKind.APPROX_ZERO))
    k = spec.k
    phi_dim = {
        FactorCovMode.IDENTITY: 0,
        FactorCovMode.LKJ: k * (k - 1) // 2,
        FactorCovMode.INV_WISHART: k * (k + 1) // 2,
    }[spec.factor_cov.mode]
    psi_dim = spec.p if spec.has_residuals else 0
    corr_dim = (
        spec.p * (spec.p - 1) // 2 if spec.structure == ModelStructure.SATURATED else 0
    )

    stops = np.cumsum([spec.p, len(cells), phi_dim, psi_dim, corr_dim])
    return ParameterLayout(
        alpha=slice(0, int(stops[0])),
        loadings=slice(int(stops[0]), int(stops[1])),
        phi=slice(int(stops[1]), int(stops[2])),
        psi=slice(int(stops[2]), int(stops[3])),
        residual_corr=slice(int(stops[3]), int(stops[4])),
        loading_cells=cells,
    )


def _log1m_tanh_sq(values: np.ndarray) -> np.ndarray:
    """log(1 - tanh(values)^2) without cancellation for large |values|."""
    magnitude = np.abs(values)
    return 2.0 * (LOG_2 - magnitude - np.log1p(np.exp(-2.0 * magnitude)))


def _cpc_cholesky(
    partials: np.ndarray, log1m_sq: np.ndarray, dim: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Cholesky factor of a correlation matrix from canonical partial correlations.

    Partials are ordered row-major over the strictly lower triangle. Also returns,
    per row, the logs of the remaining squared lengths before each column.
    """
    lower = np.zeros((dim, dim))
    log_remaining: list[np.ndarray] = [np.zeros(1)]
    if dim == 0:
        return lower, []
    lower[0, 0] = 1.0
    pos = 0
    for row in range(1, dim):
        partial = partials[pos : pos + row]
        remaining = np.concatenate(([0.0], np.cumsum(log1m_sq[pos : pos + row])))
        lower[row, :row] = partial * np.exp(0.5 * remaining[:row])
        lower[row, row] = np.exp(0.5 * remaining[row])
        log_remaining.append(remaining)
        pos += row
    return lower, log_remaining


def _cpc_log_jacobian(log1m_sq: np.ndarray, log_remaining: list, dim: int) -> float:
    """Log Jacobian of the map from unconstrained values to the correlation matrix."""
    value = float(np.sum(log1m_sq))
    for row in range(1, dim):
        remaining = log_remaining[row]
        value += 0.5 * float(np.sum(remaining[1:row]))
        value += 0.5 * (dim - row - 1) * float(remaining[row])
    return value


def corr_from_unconstrained(values: np.ndarray, dim: int) -> tuple[np.ndarray, float]:
    """Correlation Cholesky factor (via tanh of partial correlations) and log Jacobian."""
    values = np.asarray(values, dtype=float)
    log1m_sq = _log1m_tanh_sq(values)
    lower, log_remaining = _cpc_cholesky(np.tanh(values), log1m_sq, dim)
    return lower, _cpc_log_jacobian(log1m_sq, log_remaining, dim)


def corr_to_unconstrained(lower: np.ndarray) -> np.ndarray:
    """Inverse of `corr_from_unconstrained` given the correlation Cholesky factor."""
    dim = lower.shape[0]
    values = []
    for row in range(1, dim):
        remaining = 1.0 - np.concatenate(([0.0], np.cumsum(lower[row, :row] ** 2)))
        values.extend(np.arctanh(lower[row, :row] / np.sqrt(remaining[:row])))
    return np.asarray(values, dtype=float)


def _corr_backward(values: np.ndarray, dim: int, grad_lower: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the unconstrained values, log Jacobian included."""
    values = np.asarray(values, dtype=float)
    partials = np.tanh(values)
    log1m_sq = _log1m_tanh_sq(values)
    lower, log_remaining = _cpc_cholesky(partials, log1m_sq, dim)
    grad = np.zeros_like(values)
    pos = 0
    for row in range(1, dim):
        partial = partials[pos : pos + row]
        remaining = log_remaining[row]
        weighted = grad_lower[row, : row + 1] * lower[row, : row + 1]
        # suffix[q] = sum over columns q+1..row of the weighted entries
        suffix = np.cumsum(weighted[::-1])[::-1][1:]
        direct = (
            grad_lower[row, :row]
            * np.exp(log1m_sq[pos : pos + row])
            * np.exp(0.5 * remaining[:row])
        )
        columns = np.arange(row)
        grad[pos : pos + row] = direct - partial * suffix - partial * (dim - columns)
        pos += row
    return grad


def cov_from_unconstrained(values: np.ndarray, dim: int) -> tuple[np.ndarray, float]:
    """Covariance Cholesky factor (log-Cholesky parameterization) and log Jacobian."""
    lower = np.zeros((dim, dim))
    lower[np.tril_indices(dim)] = values
    log_diag = np.diag(lower).copy()
    lower[np.diag_indices(dim)] = np.exp(log_diag)
    powers = dim - np.arange(dim) + 1
    return lower, dim * LOG_2 + float(np.sum(powers * log_diag))


def cov_to_unconstrained(lower: np.ndarray) -> np.ndarray:
    """Inverse of `cov_from_unconstrained` given the covariance Cholesky factor."""
    dim = lower.shape[0]
    params = lower.copy()
    params[np.diag_indices(dim)] = np.log(np.diag(lower))
    return params[np.tril_indices(dim)]


def _cov_backward(lower: np.ndarray, grad_lower: np.ndarray) -> np.ndarray:
    dim = lower.shape[0]
    grad = grad_lower.copy()
    diag = np.diag_indices(dim)
    grad[diag] = grad_lower[diag] * lower[diag] + (dim - np.arange(dim) + 1)
    return grad[np.tril_indices(dim)]


@dataclass(frozen=True)
class _Decoded:
    theta: Theta
    phi_lower: Optional[np.ndarray]
    corr_lower: Optional[np.ndarray]
    log_jacobian: float


def _decode(spec: ModelSpec, values: np.ndarray) -> _Decoded:
    layout = parameter_layout(spec)
    values = np.asarray(values, dtype=float)
    if values.shape != (layout.dim,):
        raise ContractViolationError(
            operation="to_constrained",
            problem=f"expected a vector of length {layout.dim}, got {values.shape}",
        )
    log_jacobian = 0.0

    loadings = spec.fixed_loadings()
    if layout.loading_cells:
        rows, cols = zip(*layout.loading_cells)
        loadings[list(rows), list(cols)] = values[layout.loadings]

    phi_lower = None
    mode = spec.factor_cov.mode
    if mode == FactorCovMode.IDENTITY:
        phi = np.eye(spec.k)
    else:
        if mode == FactorCovMode.LKJ:
            phi_lower, jacobian = corr_from_unconstrained(values[layout.phi], spec.k)
            phi = phi_lower @ phi_lower.T
            np.fill_diagonal(phi, 1.0)
        else:
            phi_lower, jacobian = cov_from_unconstrained(values[layout.phi], spec.k)
            phi = phi_lower @ phi_lower.T
        log_jacobian += jacobian

    psi = None
    if spec.has_residuals:
        psi = np.exp(values[layout.psi])
        log_jacobian += float(np.sum(values[layout.psi]))

    corr_lower = None
    residual_corr = None
    if spec.structure == ModelStructure.SATURATED:
        corr_lower, jacobian = corr_from_unconstrained(values[layout.residual_corr], spec.p)
        residual_corr = corr_lower @ corr_lower.T
        np.fill_diagonal(residual_corr, 1.0)
        log_jacobian += jacobian

    theta = Theta(
        alpha=values[layout.alpha].copy(),
        loadings=loadings,
        phi=phi,
        psi=psi,
        residual_corr=residual_corr,
    )
    return _Decoded(
        theta=theta,
        phi_lower=phi_lower,
        corr_lower=corr_lower,
        log_jacobian=log_jacobian,
    )


def to_constrained(spec: ModelSpec, values: np.ndarray) -> Theta:
    """Map an unconstrained vector to a parameter point."""
    return _decode(spec, values).theta


def log_jacobian(spec: ModelSpec, values: np.ndarray) -> float:
    """Log absolute determinant of d(constrained)/d(unconstrained) at the given vector."""
    return _decode(spec, values).log_jacobian


def to_unconstrained(spec: ModelSpec, theta: Theta) -> UnconstrainedTheta:
    """Map a parameter point to the unconstrained scale."""
    layout = parameter_layout(spec)
    values = np.zeros(layout.dim)
    values[layout.alpha] = theta.alpha
    if layout.loading_cells:
        rows, cols = zip(*layout.loading_cells)
        values[layout.loadings] = theta.loadings[list(rows), list(cols)]
    if spec.factor_cov.mode == FactorCovMode.LKJ:
        values[layout.phi] = corr_to_unconstrained(np.linalg.cholesky(theta.phi))
    elif spec.factor_cov.mode == FactorCovMode.INV_WISHART:
        values[layout.phi] = cov_to_unconstrained(np.linalg.cholesky(theta.phi))
    if spec.has_residuals:
        values[layout.psi] = np.log(theta.psi)
    if spec.structure == ModelStructure.SATURATED:
        values[layout.residual_corr] = corr_to_unconstrained(
            np.linalg.cholesky(theta.residual_corr)
        )
    return UnconstrainedTheta(values=values, layout=layout)


def residual_prior_rate(spec: ModelSpec, empirical_cov: Optional[np.ndarray]) -> np.ndarray:
    """Rates (c0 - 1) / (S^-1)_jj of the inverse-gamma priors on residual variances."""
    if empirical_cov is None:
        raise ContractViolationError(
            operation="prior",
            problem="an empirical covariance is needed for inverse-gamma residuals",
        )
    precision = CholeskyFactor.decompose(np.atleast_2d(empirical_cov)).inverse()
    return (spec.c0 - 1.0) / np.diag(precision)


def _loading_prior_sds(spec: ModelSpec) -> np.ndarray:
    layout = parameter_layout(spec)
    return np.array(
        [
            spec.approx_zero_sd
            if spec.loading_pattern[row][col].kind == CellKind.APPROX_ZERO
            else spec.effective_loading_prior_sd
            for row, col in layout.loading_cells
        ]
    )


def prior_logpdf(
    spec: ModelSpec, theta: Theta, empirical_cov: Optional[np.ndarray] = None
) -> float:
    """Log prior density of a parameter point on the constrained scale."""
    layout = parameter_layout(spec)
    value = float(np.sum(stats.norm.logpdf(theta.alpha, scale=spec.intercept_prior_sd)))
    if layout.loading_cells:
        rows, cols = zip(*layout.loading_cells)
        value += float(
            np.sum(
                stats.norm.logpdf(
                    theta.loadings[list(rows), list(cols)], scale=_loading_prior_sds(spec)
                )
            )
        )
    if spec.factor_cov.mode == FactorCovMode.LKJ:
        value += lkj_logpdf(CholeskyFactor.decompose(theta.phi), spec.factor_cov.eta)
    elif spec.factor_cov.mode == FactorCovMode.INV_WISHART:
        value += inv_wishart_logpdf(
            theta.phi,
            spec.factor_cov.resolved_scale(spec.k),
            spec.factor_cov.resolved_df(spec.k),
        )
    if spec.has_residuals:
        rate = residual_prior_rate(spec, empirical_cov)
        value += float(np.sum(inv_gamma_logpdf(theta.psi, spec.c0, rate)))
    if spec.structure == ModelStructure.SATURATED:
        value += lkj_logpdf(
            CholeskyFactor.decompose(theta.residual_corr), spec.saturated_eta
        )
    return value


def sample_lkj_cholesky(dim: int, eta: float, rng: np.random.Generator) -> np.ndarray:
    """Draw the Cholesky factor of an LKJ(eta) correlation matrix."""
    rows, cols = np.tril_indices(dim, -1)
    shape = eta + 0.5 * (dim - 2 - cols)
    partials = 2.0 * rng.beta(shape, shape) - 1.0
    lower, _ = _cpc_cholesky(partials, np.log1p(-(partials**2)), dim)
    return lower


def prior_sample(
    spec: ModelSpec, empirical_cov: Optional[np.ndarray], rng: np.random.Generator
) -> Theta:
    """Draw a parameter point from the prior of `prior_logpdf`."""
    layout = parameter_layout(spec)
    alpha = rng.normal(0.0, spec.intercept_prior_sd, size=spec.p)
    loadings = spec.fixed_loadings()
    if layout.loading_cells:
        rows, cols = zip(*layout.loading_cells)
        loadings[list(rows), list(cols)] = rng.normal(0.0, _loading_prior_sds(spec))

    mode = spec.factor_cov.mode
    if mode == FactorCovMode.IDENTITY:
        phi = np.eye(spec.k)
    elif mode == FactorCovMode.LKJ:
        lower = sample_lkj_cholesky(spec.k, spec.factor_cov.eta, rng)
        phi = lower @ lower.T
        np.fill_diagonal(phi, 1.0)
    else:
        phi = np.atleast_2d(
            stats.invwishart.rvs(
                df=spec.factor_cov.resolved_df(spec.k),
                scale=spec.factor_cov.resolved_scale(spec.k),
                random_state=rng,
            )
        )

    psi = None
    if spec.has_residuals:
        rate = residual_prior_rate(spec, empirical_cov)
        psi = np.atleast_1d(stats.invgamma.rvs(a=spec.c0, scale=rate, random_state=rng))

    residual_corr = None
    if spec.structure == ModelStructure.SATURATED:
        lower = sample_lkj_cholesky(spec.p, spec.saturated_eta, rng)
        residual_corr = lower @ lower.T
        np.fill_diagonal(residual_corr, 1.0)

    return Theta(
        alpha=alpha, loadings=loadings, phi=phi, psi=psi, residual_corr=residual_corr
    )


def marginal_loglik_point(spec: ModelSpec, theta: Theta, y: np.ndarray) -> float:
    """Log density of one continuous observation with the factors integrated out."""
    if spec.link != Link.IDENTITY:
        raise UnsupportedLinkError(link=spec.link, operation="marginal_loglik_point")
    return mvn_logpdf(
        np.asarray(y, dtype=float),
        theta.alpha,
        CholeskyFactor.decompose(theta.implied_cov()),
    )


def binary_loglik_terms(
    eta: np.ndarray, y: np.ndarray, link: Link
) -> tuple[np.ndarray, np.ndarray]:
    """Elementwise Bernoulli log likelihood and its derivative w.r.t. eta."""
    if link == Link.LOGIT:
        values = y * special.log_expit(eta) + (1.0 - y) * special.log_expit(-eta)
        return values, y - special.expit(eta)
    if link == Link.PROBIT:
        upper = special.log_ndtr(eta)
        lower = special.log_ndtr(-eta)
        log_density = -0.5 * eta**2 - 0.5 * LOG_2PI
        values = y * upper + (1.0 - y) * lower
        slopes = y * np.exp(log_density - upper) - (1.0 - y) * np.exp(log_density - lower)
        return values, slopes
    raise UnsupportedLinkError(link=link, operation="binary_loglik_terms")


def _check_binary(y: np.ndarray, operation: str) -> None:
    if not np.all(np.isin(y, (0.0, 1.0))):
        raise ContractViolationError(operation=operation, problem="data is not binary")


def augmented_loglik_point(
    spec: ModelSpec, theta: Theta, z: np.ndarray, y: np.ndarray
) -> float:
    """Log density of one binary observation given its latent row."""
    if spec.link == Link.IDENTITY:
        raise UnsupportedLinkError(link=spec.link, operation="augmented_loglik_point")
    y = np.asarray(y, dtype=float)
    _check_binary(y, "augmented_loglik_point")
    eta = theta.alpha + theta.loadings @ np.asarray(z, dtype=float)
    values, _ = binary_loglik_terms(eta, y, spec.link)
    return float(np.sum(values))


def latent_conditional_posterior(
    spec: ModelSpec, theta: Theta, y: np.ndarray
) -> tuple[np.ndarray, CholeskyFactor]:
    """Gaussian full conditional of the factors of one continuous observation.

    Precision Phi^-1 + Lambda^T Psi^-1 Lambda, mean given by the precision-weighted
    regression of y - alpha on the loadings.
    """
    if spec.link != Link.IDENTITY:
        raise UnsupportedLinkError(
            link=spec.link, operation="latent_conditional_posterior"
        )
    if spec.k == 0:
        raise ContractViolationError(
            operation="latent_conditional_posterior",
            problem="saturated models have no latent factors",
        )
    weighted = theta.loadings.T / theta.psi
    precision = CholeskyFactor.decompose(theta.phi).inverse() + weighted @ theta.loadings
    precision = 0.5 * (precision + precision.T)
    cov = CholeskyFactor.decompose(precision).inverse()
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (weighted @ (np.asarray(y, dtype=float) - theta.alpha))
    return mean, CholeskyFactor.decompose(cov)


class PosteriorTarget:
    """Unnormalized log posterior on the unconstrained scale for a data prefix.

    Continuous models use the marginal likelihood through sufficient statistics.
    Binary models are augmented: the latent rows of the prefix are appended to the
    unconstrained vector, row by row.
    """

    def __init__(
        self,
        *,
        spec: ModelSpec,
        data: np.ndarray,
        empirical_cov: Optional[np.ndarray] = None,
    ):
        self.spec = spec
        self.layout = parameter_layout(spec)
        self.data = np.asarray(data, dtype=float).reshape(-1, spec.p)
        self.n = self.data.shape[0]
        self.augmented = spec.link != Link.IDENTITY
        self.latent_dim = self.n * spec.k if self.augmented else 0

        self._residual_rate = (
            residual_prior_rate(spec, empirical_cov) if spec.has_residuals else None
        )
        self._loading_sds = _loading_prior_sds(spec)
        if self.augmented:
            _check_binary(self.data, "PosteriorTarget")
        else:
            self._sum_y = self.data.sum(axis=0)
            self._sum_yy = self.data.T @ self.data

        if spec.factor_cov.mode == FactorCovMode.INV_WISHART:
            self._iw_scale = spec.factor_cov.resolved_scale(spec.k)
            self._iw_df = spec.factor_cov.resolved_df(spec.k)

    @property
    def dim(self) -> int:
        """Dimension of the unconstrained target."""
        return self.layout.dim + self.latent_dim

    def pack(self, theta: Theta, latent: Optional[np.ndarray] = None) -> np.ndarray:
        """Unconstrained vector of a parameter point and (augmented only) its latents."""
        values = to_unconstrained(self.spec, theta).values
        if not self.augmented:
            return values
        latent = np.asarray(latent, dtype=float).reshape(self.n, self.spec.k)
        return np.concatenate([values, latent.ravel()])

    def unpack(self, values: np.ndarray) -> tuple[Theta, Optional[np.ndarray]]:
        """Inverse of `pack`."""
        theta = to_constrained(self.spec, values[: self.layout.dim])
        if not self.augmented:
            return theta, None
        return theta, values[self.layout.dim :].reshape(self.n, self.spec.k).copy()

    def logpdf(self, values: np.ndarray) -> float:
        """Log target at an unconstrained vector."""
        return self._evaluate(values, with_grad=False)[0]

    def logpdf_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]:
        """Log target and its gradient at an unconstrained vector."""
        return self._evaluate(values, with_grad=True)

    def _evaluate(self, values: np.ndarray, *, with_grad: bool):  # noqa: C901, PLR0915
        spec = self.spec
        layout = self.layout
        values = np.asarray(values, dtype=float)
        decoded = _decode(spec, values[: layout.dim])
        theta = decoded.theta
        alpha, loadings, phi = theta.alpha, theta.loadings, theta.phi

        grad = np.zeros(self.dim)
        grad_loadings = np.zeros((spec.p, spec.k))
        grad_phi = np.zeros((spec.k, spec.k))
        grad_corr = np.zeros((spec.p, spec.p))
        value = decoded.log_jacobian

        # intercepts and loadings
        value += float(np.sum(stats.norm.logpdf(alpha, scale=spec.intercept_prior_sd)))
        grad[layout.alpha] = -alpha / spec.intercept_prior_sd**2
        if layout.loading_cells:
            rows, cols = map(list, zip(*layout.loading_cells))
            free = loadings[rows, cols]
            value += float(np.sum(stats.norm.logpdf(free, scale=self._loading_sds)))
            grad_loadings[rows, cols] -= free / self._loading_sds**2

        phi_inv = None
        if spec.factor_cov.mode != FactorCovMode.IDENTITY:
            phi_chol = CholeskyFactor.from_lower(decoded.phi_lower)
            phi_inv = phi_chol.inverse()
            if spec.factor_cov.mode == FactorCovMode.LKJ:
                eta = spec.factor_cov.eta
                value += lkj_log_normalizer(spec.k, eta) + (eta - 1.0) * phi_chol.log_det
                grad_phi += (eta - 1.0) * phi_inv
            else:
                value += inv_wishart_logpdf(phi, self._iw_scale, self._iw_df)
                grad_phi += -0.5 * (self._iw_df + spec.k + 1) * phi_inv
                grad_phi += 0.5 * phi_inv @ self._iw_scale @ phi_inv

        grad_log_psi = np.zeros(spec.p)
        if spec.has_residuals:
            psi = theta.psi
            value += float(np.sum(inv_gamma_logpdf(psi, spec.c0, self._residual_rate)))
            # prior on the log scale plus the log-Jacobian term
            grad_log_psi += -(spec.c0 + 1.0) + self._residual_rate / psi + 1.0

        corr = theta.residual_corr
        if corr is not None:
            corr_chol = CholeskyFactor.from_lower(decoded.corr_lower)
            eta = spec.saturated_eta
            value += lkj_log_normalizer(spec.p, eta) + (eta - 1.0) * corr_chol.log_det
            grad_corr += (eta - 1.0) * corr_chol.inverse()

        if self.augmented:
            latent = values[layout.dim :].reshape(self.n, spec.k)
            eta_lin = alpha + latent @ loadings.T
            terms, slopes = binary_loglik_terms(eta_lin, self.data, spec.link)
            value += float(np.sum(terms))
            grad[layout.alpha] += slopes.sum(axis=0)
            grad_loadings += slopes.T @ latent
            grad_latent = slopes @ loadings

            if phi_inv is None:
                value += -0.5 * (latent.size * LOG_2PI + float(np.sum(latent**2)))
                grad_latent -= latent
            else:
                scatter = latent.T @ latent
                value += -0.5 * (
                    latent.size * LOG_2PI
                    + self.n * phi_chol.log_det
                    + float(np.sum(phi_inv * scatter))
                )
                grad_latent -= latent @ phi_inv
                grad_phi += -0.5 * (self.n * phi_inv - phi_inv @ scatter @ phi_inv)
            grad[layout.dim :] = grad_latent.ravel()
        elif self.n > 0:
            cov = theta.implied_cov()
            cov_chol = CholeskyFactor.decompose(cov)
            cov_inv = cov_chol.inverse()
            outer = np.outer(alpha, self._sum_y)
            scatter = self._sum_yy - outer - outer.T + self.n * np.outer(alpha, alpha)
            value += -0.5 * (
                self.n * (spec.p * LOG_2PI + cov_chol.log_det)
                + float(np.sum(cov_inv * scatter))
            )
            grad[layout.alpha] += cov_inv @ (self._sum_y - self.n * alpha)
            grad_cov = -0.5 * (self.n * cov_inv - cov_inv @ scatter @ cov_inv)
            if corr is not None:
                scale = np.sqrt(theta.psi)
                grad_corr += scale[:, None] * grad_cov * scale[None, :]
                grad_log_psi += ((grad_cov * corr) @ scale) * scale
            else:
                grad_loadings += 2.0 * grad_cov @ loadings @ phi
                grad_phi += loadings.T @ grad_cov @ loadings
                grad_log_psi += np.diag(grad_cov) * theta.psi

        if not with_grad:
            return value, None

        if layout.loading_cells:
            grad[layout.loadings] = grad_loadings[rows, cols]
        if spec.factor_cov.mode == FactorCovMode.LKJ:
            grad[layout.phi] = _corr_backward(
                values[layout.phi], spec.k, 2.0 * grad_phi @ decoded.phi_lower
            )
        elif spec.factor_cov.mode == FactorCovMode.INV_WISHART:
            grad[layout.phi] = _cov_backward(
                decoded.phi_lower, 2.0 * grad_phi @ decoded.phi_lower
            )
        if spec.has_residuals:
            grad[layout.psi] = grad_log_psi
        if corr is not None:
            grad[layout.residual_corr] = _corr_backward(
                values[layout.residual_corr], spec.p, 2.0 * grad_corr @ decoded.corr_lower
            )
        return value, grad


def posterior_logpdf_unconstrained(
    spec: ModelSpec,
    values: np.ndarray,
    data_prefix: np.ndarray,
    empirical_cov: Optional[np.ndarray] = None,
    latent: Optional[np.ndarray] = None,
) -> float:
    """Log prior plus log likelihood of the prefix plus log Jacobian.

    Binary models need the latent rows of the prefix, continuous models must not
    receive any.
    """
    if latent is not None and spec.link == Link.IDENTITY:
        raise ContractViolationError(
            operation="posterior_logpdf_unconstrained",
            problem="latent rows given for a continuous model",
        )
    if latent is None and spec.link != Link.IDENTITY:
        raise UnsupportedLinkError(
            link=spec.link, operation="posterior_logpdf_unconstrained"
        )
    target = PosteriorTarget(spec=spec, data=data_prefix, empirical_cov=empirical_cov)
    if latent is not None:
        values = np.concatenate([values, np.asarray(latent, dtype=float).ravel()])
    return target.logpdf(values)


def fix_loading_signs(draws: Sequence[Theta], spec: ModelSpec) -> list[Theta]:
    """Flip every factor whose leading loading is negative.

    Phi rows and columns are flipped along with the loading column, so the implied
    covariance is unchanged.
    """
    leading = spec.leading_rows()
    fixed = []
    for theta in draws:
        signs = np.ones(spec.k)
        for col, row in enumerate(leading):
            if theta.loadings[row, col] < 0:
                signs[col] = -1.0
        if np.all(signs > 0):
            fixed.append(theta)
            continue
        fixed.append(
            replace(
                theta,
                loadings=theta.loadings * signs[None, :],
                phi=theta.phi * np.outer(signs, signs),
            )
        )
    return fixed


def parameter_names(spec: ModelSpec) -> list[str]:
    """Stable names of the scalar parameters reported for a model."""
    layout = parameter_layout(spec)
    names = [f"alpha[{j + 1}]" for j in range(spec.p)]
    names += [f"lambda[{row + 1},{col + 1}]" for row, col in layout.loading_cells]
    if spec.factor_cov.mode == FactorCovMode.LKJ:
        rows, cols = np.tril_indices(spec.k, -1)
        names += [f"phi[{r + 1},{c + 1}]" for r, c in zip(rows, cols)]
    elif spec.factor_cov.mode == FactorCovMode.INV_WISHART:
        rows, cols = np.tril_indices(spec.k)
        names += [f"phi[{r + 1},{c + 1}]" for r, c in zip(rows, cols)]
    if spec.has_residuals:
        names += [f"psi[{j + 1}]" for j in range(spec.p)]
    if spec.structure == ModelStructure.SATURATED:
        rows, cols = np.tril_indices(spec.p, -1)
        names += [f"corr[{r + 1},{c + 1}]" for r, c in zip(rows, cols)]
    return names


def flatten_theta(spec: ModelSpec, theta: Theta) -> np.ndarray:
    """Scalar parameter values in the order of `parameter_names`."""
    layout = parameter_layout(spec)
    parts = [theta.alpha]
    if layout.loading_cells:
        rows, cols = map(list, zip(*layout.loading_cells))
        parts.append(theta.loadings[rows, cols])
    if spec.factor_cov.mode == FactorCovMode.LKJ:
        parts.append(theta.phi[np.tril_indices(spec.k, -1)])
    elif spec.factor_cov.mode == FactorCovMode.INV_WISHART:
        parts.append(theta.phi[np.tril_indices(spec.k)])
    if spec.has_residuals:
        parts.append(theta.psi)
    if spec.structure == ModelStructure.SATURATED:
        parts.append(theta.residual_corr[np.tril_indices(spec.p, -1)])
    return np.concatenate(parts)


@dataclass(frozen=True)
class ThetaStack:
    """Parameter points of a whole population stacked along a leading axis."""

    alpha: np.ndarray
    loadings: np.ndarray
    phi: np.ndarray
    psi: Optional[np.ndarray]
    residual_corr: Optional[np.ndarray]

    @classmethod
    def from_thetas(cls, thetas: Sequence[Theta]) -> "ThetaStack":
        """Stack a sequence of parameter points."""
        first = thetas[0]
        return cls(
            alpha=np.stack([theta.alpha for theta in thetas]),
            loadings=np.stack([theta.loadings for theta in thetas]),
            phi=np.stack([theta.phi for theta in thetas]),
            psi=None if first.psi is None else np.stack([t.psi for t in thetas]),
            residual_corr=None
            if first.residual_corr is None
            else np.stack([t.residual_corr for t in thetas]),
        )

    def implied_cov(self) -> np.ndarray:
        """Marginal item covariances, one per particle."""
        if self.residual_corr is not None:
            scale = np.sqrt(self.psi)
            return scale[:, :, None] * self.residual_corr * scale[:, None, :]
        cov = np.einsum("npk,nkl,nql->npq", self.loadings, self.phi, self.loadings)
        if self.psi is not None:
            cov = cov + self.psi[:, :, None] * np.eye(self.psi.shape[1])[None]
        return cov

    def linear_predictor(self, latent: np.ndarray) -> np.ndarray:
        """alpha + Lambda z for one latent row per particle."""
        return self.alpha + np.einsum("npk,nk->np", self.loadings, latent)


def _batched_cholesky(matrices: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrices)
    except np.linalg.LinAlgError:
        return np.stack([CholeskyFactor.decompose(m).lower for m in matrices])


def batched_gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """Log densities of N(mean_m, cov_m) at x_m for a stack of Gaussians."""
    lower = _batched_cholesky(cov)
    residual = np.broadcast_to(x, mean.shape) - mean
    whitened = np.linalg.solve(lower, residual[..., None])[..., 0]
    log_det = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=1, axis2=2)), axis=1)
    return -0.5 * (mean.shape[1] * LOG_2PI + log_det + np.sum(whitened**2, axis=1))


class FactorModel:
    """A factor model bound to a dataset, as seen by the sequential engines."""

    def __init__(
        self,
        *,
        spec: ModelSpec,
        dataset: Dataset,
        empirical_cov: Optional[np.ndarray] = None,
    ):
        if dataset.p != spec.p:
            raise ContractViolationError(
                operation="FactorModel",
                problem=f"the model has {spec.p} items, the dataset {dataset.p}",
            )
        if dataset.kind != spec.data_kind:
            raise ContractViolationError(
                operation="FactorModel",
                problem=f"a {spec.data_kind.value} model cannot fit"
                + f" {dataset.kind.value} data",
            )
        if spec.has_residuals and empirical_cov is None:
            empirical_cov = dataset.empirical_cov()
        self.spec = spec
        self.dataset = dataset
        self.empirical_cov = empirical_cov if spec.has_residuals else None

    @property
    def key(self) -> str:
        """Identifies the model a checkpoint belongs to."""
        return self.spec.model_dump_json()

    @property
    def n_observations(self) -> int:
        """Number of observations available for streaming."""
        return self.dataset.n

    @property
    def latent_dim(self) -> int:
        """Latent coordinates added per observation (zero for marginal models)."""
        return self.spec.k if self.spec.link != Link.IDENTITY else 0

    def prior_sample(self, rng: np.random.Generator, size: int) -> list[Theta]:
        """Draw `size` parameter points from the prior."""
        return [prior_sample(self.spec, self.empirical_cov, rng) for _ in range(size)]

    def loglik_point(self, thetas: Sequence[Theta], index: int) -> np.ndarray:
        """Marginal log likelihood of observation `index` under every parameter point."""
        if self.spec.link != Link.IDENTITY:
            raise UnsupportedLinkError(link=self.spec.link, operation="loglik_point")
        stack = ThetaStack.from_thetas(thetas)
        return batched_gaussian_logpdf(
            self.dataset.values[index], stack.alpha, stack.implied_cov()
        )

    def augmented_loglik_point(
        self, thetas: Sequence[Theta], latent: np.ndarray, index: int
    ) -> np.ndarray:
        """Log likelihood of observation `index` given one latent row per particle."""
        if self.spec.link == Link.IDENTITY:
            raise UnsupportedLinkError(
                link=self.spec.link, operation="augmented_loglik_point"
            )
        stack = ThetaStack.from_thetas(thetas)
        terms, _ = binary_loglik_terms(
            stack.linear_predictor(latent), self.dataset.values[index], self.spec.link
        )
        return terms.sum(axis=1)

    def latent_prior_logpdf(self, thetas: Sequence[Theta], latent: np.ndarray) -> np.ndarray:
        """log N(z_m; 0, Phi_m) for one latent row per particle."""
        stack = ThetaStack.from_thetas(thetas)
        return batched_gaussian_logpdf(latent, np.zeros_like(latent), stack.phi)

    def posterior_target(self, n_data: int) -> PosteriorTarget:
        """Posterior target given the first `n_data` observations."""
        return PosteriorTarget(
            spec=self.spec,
            data=self.dataset.values[:n_data],
            empirical_cov=self.empirical_cov,
        )

    def predictive_draw(
        self, thetas: Sequence[Theta], rng: np.random.Generator
    ) -> np.ndarray:
        """One draw of the next observation per parameter point."""
        stack = ThetaStack.from_thetas(thetas)
        n_particles = len(thetas)
        if self.spec.link == Link.IDENTITY:
            lower = _batched_cholesky(stack.implied_cov())
            noise = rng.standard_normal((n_particles, self.spec.p))
            return stack.alpha + np.einsum("npq,nq->np", lower, noise)
        lower = _batched_cholesky(stack.phi)
        latent = np.einsum(
            "nkl,nl->nk", lower, rng.standard_normal((n_particles, self.spec.k))
        )
        eta = stack.linear_predictor(latent)
        success = special.expit(eta) if self.spec.link == Link.LOGIT else special.ndtr(eta)
        return (rng.uniform(size=eta.shape) < success).astype(float)

    def latent_readout(
        self, thetas: Sequence[Theta], index: int, rng: np.random.Generator
    ) -> np.ndarray:
        """One draw from the factor full conditional of observation `index` per point."""
        y = self.dataset.values[index]
        draws = []
        for theta in thetas:
            mean, chol = latent_conditional_posterior(self.spec, theta, y)
            draws.append(mean + chol.lower @ rng.standard_normal(self.spec.k))
        return np.stack(draws)

    def parameter_names(self) -> list[str]:
        """Names of the reported scalar parameters."""
        return parameter_names(self.spec)

    def readout(self, thetas: Sequence[Theta]) -> np.ndarray:
        """Sign-fixed scalar parameters, one row per parameter point."""
        return np.stack(
            [flatten_theta(self.spec, theta) for theta in fix_loading_signs(thetas, self.spec)]
        )

    def encode(self, theta: Theta) -> dict:
        """JSON-friendly record of a parameter point."""
        record = {
            "alpha": theta.alpha.tolist(),
            "loadings": theta.loadings.tolist(),
            "phi": theta.phi.tolist(),
        }
        if theta.psi is not None:
            record["psi"] = theta.psi.tolist()
        if theta.residual_corr is not None:
            record["residual_corr"] = theta.residual_corr.tolist()
        return record

    def decode(self, record: dict) -> Theta:
        """Inverse of `encode`."""
        return Theta(
            alpha=np.asarray(record["alpha"], dtype=float),
            loadings=np.asarray(record["loadings"], dtype=float).reshape(
                self.spec.p, self.spec.k
            ),
            phi=np.asarray(record["phi"], dtype=float).reshape(self.spec.k, self.spec.k),
            psi=None if "psi" not in record else np.asarray(record["psi"], dtype=float),
            residual_corr=None
            if "residual_corr" not in record
            else np.asarray(record["residual_corr"], dtype=float),
        )
