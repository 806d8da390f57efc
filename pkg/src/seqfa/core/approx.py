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

"""Proposals for the latent row of a new binary observation.

The target is l(z) = log f(y | z, theta) + log N(z; 0, Phi). The proposals are the
prior, a Laplace approximation found by Fisher scoring (logit link) and a diagonal
Gaussian fitted by stochastic variational inference (any binary link).

All heavy lifting is done on batches of B particles at once; the single-point
functions wrap the batched ones with B = 1.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy import special

from seqfa.core.distributions import LOG_2PI, CholeskyFactor, mvn_logpdf
from seqfa.core.factor_model import (
    FactorModel,
    ThetaStack,
    UnsupportedLinkError,
    binary_loglik_terms,
)
from seqfa.core.models import Link, ModelSpec, ProposalKind, Theta

log = logging.getLogger(__name__)


class InformationKind(str, Enum):
    """Which information matrix sets the Laplace covariance."""

    EXPECTED = "expected"
    OBSERVED = "observed"


class ProposalOptions(BaseModel):
    """Numerical settings of the latent proposals."""

    information: InformationKind = InformationKind.EXPECTED
    scoring_tol: float = Field(1e-8, gt=0)
    scoring_max_iter: int = Field(100, ge=1)
    vb_iters: int = Field(200, ge=1)
    vb_mc_samples: int = Field(4, ge=1)
    vb_step: float = Field(0.1, gt=0)


class ScoringConvergenceError(RuntimeError):
    """Thrown when Fisher scoring does not reach the requested tolerance."""

    def __init__(self, *, last_iterate: np.ndarray, grad_norm: float, n_iter: int):
        self.last_iterate = last_iterate
        self.grad_norm = grad_norm
        self.n_iter = n_iter
        message = (
            f"Fisher scoring did not converge within {n_iter} iterations,"
            + f" the score still has a sup norm of {grad_norm:.3g}."
        )
        super().__init__(message)


class ElboNotFiniteError(RuntimeError):
    """Thrown when the variational objective evaluates to a non-finite value."""

    def __init__(self, *, iteration: int):
        self.iteration = iteration
        message = f"The ELBO estimate became non-finite at iteration {iteration}."
        super().__init__(message)


@dataclass(frozen=True)
class GaussianProposal:
    """A Gaussian proposal N(mean, L L^T) for a latent row."""

    mean: np.ndarray
    cov_chol: CholeskyFactor

    def logpdf_at(self, z: np.ndarray) -> float:
        """Proposal log density at z."""
        return mvn_logpdf(z, self.mean, self.cov_chol)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """One draw from the proposal."""
        return self.mean + self.cov_chol.lower @ rng.standard_normal(self.mean.size)


@dataclass(frozen=True)
class VariationalFit:
    """Outcome of a variational fit."""

    proposal: GaussianProposal
    elbo_trace: np.ndarray


@dataclass(frozen=True)
class _LatentBatch:
    """What the latent target needs to know about B particles."""

    alpha: np.ndarray
    loadings: np.ndarray
    prior_precision: np.ndarray
    prior_log_det: np.ndarray

    @classmethod
    def from_stack(cls, stack: ThetaStack) -> "_LatentBatch":
        lower = np.linalg.cholesky(stack.phi)
        eye = np.broadcast_to(np.eye(stack.phi.shape[1]), stack.phi.shape)
        inv_lower = np.linalg.solve(lower, eye)
        return cls(
            alpha=stack.alpha,
            loadings=stack.loadings,
            prior_precision=np.einsum("bji,bjk->bik", inv_lower, inv_lower),
            prior_log_det=2.0 * np.sum(np.log(np.diagonal(lower, axis1=1, axis2=2)), axis=1),
        )

    @classmethod
    def from_theta(cls, theta: Theta) -> "_LatentBatch":
        return cls.from_stack(ThetaStack.from_thetas([theta]))


def _log_target_and_score(
    z: np.ndarray, y: np.ndarray, batch: _LatentBatch, link: Link
) -> tuple[np.ndarray, np.ndarray]:
    """l(z) and its gradient for z of shape (B, S, k)."""
    eta = batch.alpha[:, None, :] + np.einsum("bpk,bsk->bsp", batch.loadings, z)
    terms, slopes = binary_loglik_terms(eta, y, link)
    precision_z = np.einsum("bkl,bsl->bsk", batch.prior_precision, z)
    k = z.shape[-1]
    log_prior = -0.5 * (
        k * LOG_2PI + batch.prior_log_det[:, None] + np.sum(z * precision_z, axis=-1)
    )
    grad = np.einsum("bpk,bsp->bsk", batch.loadings, slopes) - precision_z
    return terms.sum(axis=-1) + log_prior, grad


def _batched_score(z: np.ndarray, y: np.ndarray, batch: _LatentBatch) -> np.ndarray:
    _, grad = _log_target_and_score(z[:, None, :], y, batch, Link.LOGIT)
    return grad[:, 0, :]


def _batched_fisher(z: np.ndarray, batch: _LatentBatch) -> np.ndarray:
    eta = batch.alpha + np.einsum("bpk,bk->bp", batch.loadings, z)
    success = special.expit(eta)
    weights = success * (1.0 - success)
    return batch.prior_precision + np.einsum(
        "bpk,bp,bpl->bkl", batch.loadings, weights, batch.loadings
    )


def _batched_observed(z: np.ndarray, y: np.ndarray, batch: _LatentBatch) -> np.ndarray:
    eta = batch.alpha + np.einsum("bpk,bk->bp", batch.loadings, z)
    success = special.expit(eta)
    first = success * (1.0 - success)
    second = first * (1.0 - 2.0 * success)
    ratio = y / success - (1.0 - y) / (1.0 - success)
    ratio_sq = y / success**2 + (1.0 - y) / (1.0 - success) ** 2
    curvature = second * ratio - first**2 * ratio_sq
    return batch.prior_precision - np.einsum(
        "bpk,bp,bpl->bkl", batch.loadings, curvature, batch.loadings
    )


def _batched_information(
    z: np.ndarray, y: np.ndarray, batch: _LatentBatch, information: InformationKind
) -> np.ndarray:
    if information == InformationKind.OBSERVED:
        return _batched_observed(z, y, batch)
    return _batched_fisher(z, batch)


def _batched_scoring(
    y: np.ndarray, batch: _LatentBatch, options: ProposalOptions, z0: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fisher scoring for B particles at once.

    Returns the final iterates, a converged mask and the sup norms of the score.
    """
    n_batch, k = batch.alpha.shape[0], batch.loadings.shape[2]
    z = np.zeros((n_batch, k)) if z0 is None else np.array(z0, dtype=float)
    n_iter = 0
    while True:
        with np.errstate(invalid="ignore", over="ignore"):
            score_value = _batched_score(z, y, batch)
        grad_norm = np.max(np.abs(score_value), axis=1)
        converged = grad_norm < options.scoring_tol
        if np.all(converged | ~np.isfinite(grad_norm)) or n_iter == options.scoring_max_iter:
            break
        active = ~converged & np.isfinite(grad_norm)
        info = _batched_information(
            np.where(active[:, None], z, 0.0), y, batch, options.information
        )
        step = np.linalg.solve(info, np.where(active[:, None], score_value, 0.0)[..., None])
        z = np.where(active[:, None], z + step[..., 0], z)
        n_iter += 1
    return z, converged, grad_norm


def score(z: np.ndarray, y: np.ndarray, theta: Theta) -> np.ndarray:
    """Gradient of l(z) for the logit link."""
    batch = _LatentBatch.from_theta(theta)
    z = np.asarray(z, dtype=float)
    return _batched_score(z[None, :], np.asarray(y, dtype=float), batch)[0]


def fisher_information(z: np.ndarray, theta: Theta) -> np.ndarray:
    """Expected information of l(z) for the logit link; independent of y."""
    batch = _LatentBatch.from_theta(theta)
    return _batched_fisher(np.asarray(z, dtype=float)[None, :], batch)[0]


def observed_information(z: np.ndarray, y: np.ndarray, theta: Theta) -> np.ndarray:
    """Negative Hessian of l(z) for the logit link.

    Uses the second derivative pi (1 - pi) (1 - 2 pi) Lambda^2 of the success
    probabilities.
    """
    batch = _LatentBatch.from_theta(theta)
    return _batched_observed(
        np.asarray(z, dtype=float)[None, :], np.asarray(y, dtype=float), batch
    )[0]


def fisher_scoring_mode(
    y: np.ndarray,
    theta: Theta,
    z0: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    information: InformationKind = InformationKind.EXPECTED,
) -> np.ndarray:
    """Mode of l(z) by iterating z <- z + I(z)^-1 score(z), starting at z0 (default 0)."""
    options = ProposalOptions(
        scoring_tol=tol, scoring_max_iter=max_iter, information=information
    )
    batch = _LatentBatch.from_theta(theta)
    start = None if z0 is None else np.asarray(z0, dtype=float)[None, :]
    z, converged, grad_norm = _batched_scoring(
        np.asarray(y, dtype=float), batch, options, z0=start
    )
    if not converged[0]:
        error = ScoringConvergenceError(
            last_iterate=z[0], grad_norm=float(grad_norm[0]), n_iter=max_iter
        )
        log.error(error, extra={"grad_norm": float(grad_norm[0])})
        raise error
    return z[0]


def laplace_proposal(
    y: np.ndarray,
    theta: Theta,
    information: InformationKind = InformationKind.EXPECTED,
) -> GaussianProposal:
    """N(mode, I(mode)^-1) with the mode found by Fisher scoring."""
    mode = fisher_scoring_mode(y, theta, information=information)
    batch = _LatentBatch.from_theta(theta)
    info = _batched_information(
        mode[None, :], np.asarray(y, dtype=float), batch, information
    )[0]
    cov = CholeskyFactor.decompose(info).inverse()
    return GaussianProposal(
        mean=mode, cov_chol=CholeskyFactor.decompose(0.5 * (cov + cov.T))
    )


def prior_proposal(spec: ModelSpec, phi: Optional[np.ndarray] = None) -> GaussianProposal:
    """The latent prior N(0, Phi) (N(0, I_k) when no Phi is given)."""
    phi = np.eye(spec.k) if phi is None else np.asarray(phi, dtype=float)
    return GaussianProposal(mean=np.zeros(spec.k), cov_chol=CholeskyFactor.decompose(phi))


def _batched_variational(
    y: np.ndarray,
    batch: _LatentBatch,
    link: Link,
    noise: np.ndarray,
    options: ProposalOptions,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reparameterized stochastic gradient ascent on the ELBO of a diagonal Gaussian.

    `noise` has shape (B, n_iters, S, k). Returns Polyak averages over the second half
    of the iterations of the means and log standard deviations, plus the ELBO trace.
    """
    n_batch, n_iters, _, k = noise.shape
    mean = np.zeros((n_batch, k))
    log_sd = np.zeros((n_batch, k))
    mean_sum = np.zeros_like(mean)
    log_sd_sum = np.zeros_like(log_sd)
    n_averaged = 0
    trace = np.empty((n_batch, n_iters))
    entropy_const = 0.5 * k * (1.0 + LOG_2PI)

    for it in range(n_iters):
        eps = noise[:, it]
        sd = np.exp(log_sd)
        z = mean[:, None, :] + sd[:, None, :] * eps
        values, grad = _log_target_and_score(z, y, batch, link)
        elbo = values.mean(axis=1) + np.sum(log_sd, axis=1) + entropy_const
        if not np.all(np.isfinite(elbo)):
            error = ElboNotFiniteError(iteration=it)
            log.error(error, extra={"iteration": it})
            raise error
        trace[:, it] = elbo

        step = options.vb_step / np.sqrt(it + 1.0)
        mean = mean + step * grad.mean(axis=1)
        log_sd = log_sd + step * ((grad * eps).mean(axis=1) * sd + 1.0)
        if it >= n_iters // 2:
            mean_sum += mean
            log_sd_sum += log_sd
            n_averaged += 1

    return mean_sum / n_averaged, log_sd_sum / n_averaged, trace


def fit_variational(
    y: np.ndarray,
    theta: Theta,
    rng: np.random.Generator,
    n_iters: int = 200,
    mc_samples: int = 4,
    link: Link = Link.LOGIT,
) -> VariationalFit:
    """Fit a diagonal Gaussian to the latent posterior of one observation."""
    options = ProposalOptions(vb_iters=n_iters, vb_mc_samples=mc_samples)
    batch = _LatentBatch.from_theta(theta)
    k = theta.loadings.shape[1]
    noise = rng.standard_normal((1, n_iters, mc_samples, k))
    mean, log_sd, trace = _batched_variational(
        np.asarray(y, dtype=float), batch, link, noise, options
    )
    proposal = GaussianProposal(
        mean=mean[0], cov_chol=CholeskyFactor.from_lower(np.diag(np.exp(log_sd[0])))
    )
    return VariationalFit(proposal=proposal, elbo_trace=trace[0])


def vb_proposal(
    y: np.ndarray,
    theta: Theta,
    rng: np.random.Generator,
    n_iters: int = 200,
    mc_samples: int = 4,
    link: Link = Link.LOGIT,
) -> GaussianProposal:
    """Diagonal Gaussian maximizing the evidence lower bound of the latent posterior."""
    return fit_variational(
        y, theta, rng, n_iters=n_iters, mc_samples=mc_samples, link=link
    ).proposal


def _gaussian_draws(
    mean: np.ndarray, lower: np.ndarray, generators: Sequence[np.random.Generator]
) -> tuple[np.ndarray, np.ndarray]:
    """Draws mean + L xi per particle and their log densities."""
    k = mean.shape[1]
    xi = np.stack([gen.standard_normal(k) for gen in generators])
    z = mean + np.einsum("bkl,bl->bk", lower, xi)
    log_det = 2.0 * np.sum(np.log(np.diagonal(lower, axis1=1, axis2=2)), axis=1)
    log_q = -0.5 * (k * LOG_2PI + log_det + np.sum(xi**2, axis=1))
    return z, log_q


def propose_batch(
    *,
    model: FactorModel,
    thetas: Sequence[Theta],
    index: int,
    kind: ProposalKind,
    generators: Sequence[np.random.Generator],
    options: ProposalOptions,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw one latent row per particle for observation `index`.

    Returns the draws and the proposal log densities at the draws. Particles whose
    Fisher scoring does not converge fall back to the prior proposal.
    """
    link = model.spec.link
    if link == Link.IDENTITY:
        raise UnsupportedLinkError(link=link, operation="propose_batch")
    if kind == ProposalKind.LAPLACE and link != Link.LOGIT:
        raise UnsupportedLinkError(link=link, operation="laplace_proposal")

    y = model.dataset.values[index]
    stack = ThetaStack.from_thetas(thetas)
    prior_lower = np.linalg.cholesky(stack.phi)

    if kind == ProposalKind.PRIOR:
        origin = np.zeros((len(thetas), model.spec.k))
        return _gaussian_draws(origin, prior_lower, generators)

    batch = _LatentBatch.from_stack(stack)
    if kind == ProposalKind.VB:
        noise = np.stack(
            [
                gen.standard_normal((options.vb_iters, options.vb_mc_samples, model.spec.k))
                for gen in generators
            ]
        )
        mean, log_sd, _ = _batched_variational(y, batch, link, noise, options)
        lower = np.einsum("bk,kl->bkl", np.exp(log_sd), np.eye(model.spec.k))
        return _gaussian_draws(mean, lower, generators)

    mode, converged, grad_norm = _batched_scoring(y, batch, options)
    safe_mode = np.where(converged[:, None], mode, 0.0)
    info = _batched_information(safe_mode, y, batch, options.information)
    cov = np.linalg.solve(info, np.broadcast_to(np.eye(model.spec.k), info.shape))
    lower = np.linalg.cholesky(0.5 * (cov + np.swapaxes(cov, 1, 2)))
    lower = np.where(converged[:, None, None], lower, prior_lower)
    mean = np.where(converged[:, None], mode, 0.0)
    if not np.all(converged):
        log.warning(
            "Fisher scoring failed for %i particles, using the prior proposal instead.",
            int(np.sum(~converged)),
            extra={"observation": index + 1, "max_grad_norm": float(np.max(grad_norm))},
        )
    return _gaussian_draws(mean, lower, generators)
