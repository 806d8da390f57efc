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

"""Synthetic datasets drawn from known factor models."""

import logging
from typing import Optional

import numpy as np
from scipy import special

from seqfa.core.distributions import CholeskyFactor, ContractViolationError
from seqfa.core.models import (
    Dataset,
    DataKind,
    Link,
    ModelSpec,
    Scenario,
    Theta,
    TrueParameters,
)

log = logging.getLogger(__name__)

DEFAULT_SCENARIO_N = {
    Scenario.CONTINUOUS1: 200,
    Scenario.CONTINUOUS2: 200,
    Scenario.BINARY1: 100,
}

_CONTINUOUS_PSI = np.array([0.35, 0.58, 0.58, 0.35, 0.58, 0.58])
_CONTINUOUS_PHI = np.array([[0.65, 0.13], [0.13, 0.65]])
_CONTINUOUS1_LOADINGS = np.array(
    [[1.0, 0.0], [0.8, 0.0], [0.8, 0.0], [0.0, 1.0], [0.0, 0.8], [0.0, 0.8]]
)
_CONTINUOUS2_LOADINGS = np.array(
    [[1.0, 0.0], [0.8, 0.3], [0.8, 0.0], [0.0, 1.0], [0.3, 0.8], [0.3, 0.8]]
)
_BINARY1_ALPHA = np.array([-0.53, 0.35, -1.4, -1.4, -0.96, -2.33])


def item_names(p: int) -> tuple[str, ...]:
    """Default column labels y1, ..., yp."""
    return tuple(f"y{j + 1}" for j in range(p))


def scenario_truth(which: Scenario) -> tuple[Link, Theta]:
    """The link and parameter point of a built-in scenario."""
    if which == Scenario.BINARY1:
        return Link.LOGIT, Theta(
            alpha=_BINARY1_ALPHA.copy(),
            loadings=np.ones((6, 1)),
            phi=np.eye(1),
        )
    loadings = (
        _CONTINUOUS1_LOADINGS if which == Scenario.CONTINUOUS1 else _CONTINUOUS2_LOADINGS
    )
    return Link.IDENTITY, Theta(
        alpha=np.zeros(6),
        loadings=loadings.copy(),
        phi=_CONTINUOUS_PHI.copy(),
        psi=_CONTINUOUS_PSI.copy(),
    )


def simulate_dataset(
    link: Link, theta: Theta, n: int, rng: np.random.Generator
) -> Dataset:
    """Draw `n` observations from the factor model with the given link and parameters.

    Continuous rows are drawn marginally from N(alpha, Lambda Phi Lambda' + Psi); binary
    rows first draw z ~ N(0, Phi) and then independent Bernoulli items.
    """
    if n < 1:
        raise ContractViolationError(
            operation="simulate_dataset", problem=f"n must be positive, got {n}"
        )
    p, k = theta.loadings.shape
    if link == Link.IDENTITY:
        chol = CholeskyFactor.decompose(theta.implied_cov())
        values = theta.alpha + rng.standard_normal((n, p)) @ chol.lower.T
        return Dataset(values=values, kind=DataKind.CONTINUOUS, item_names=item_names(p))

    latent = rng.standard_normal((n, k)) @ np.linalg.cholesky(theta.phi).T
    eta = theta.alpha + latent @ theta.loadings.T
    success = special.expit(eta) if link == Link.LOGIT else special.ndtr(eta)
    values = (rng.uniform(size=(n, p)) < success).astype(float)
    return Dataset(values=values, kind=DataKind.BINARY, item_names=item_names(p))


def simulate_custom(
    spec: ModelSpec, theta: Theta, n: int, rng: np.random.Generator
) -> Dataset:
    """Draw a dataset from a user-supplied model and parameter point."""
    if theta.loadings.shape != (spec.p, spec.k):
        raise ContractViolationError(
            operation="simulate_custom",
            problem=f"loadings of shape {theta.loadings.shape} do not fit a"
            + f" {spec.p} x {spec.k} model",
        )
    return simulate_dataset(spec.link, theta, n, rng)


def simulate_scenario(
    which: Scenario, n: Optional[int], seed: int
) -> tuple[Dataset, TrueParameters]:
    """Simulate a built-in scenario and record the parameters used."""
    n = DEFAULT_SCENARIO_N[which] if n is None else n
    link, theta = scenario_truth(which)
    dataset = simulate_dataset(link, theta, n, np.random.default_rng(seed))
    log.info(
        "Simulated scenario '%s'.",
        which.value,
        extra={"scenario": which.value, "n": n, "seed": seed},
    )
    truth = TrueParameters(
        scenario=which.value,
        n=n,
        seed=seed,
        link=link,
        alpha=theta.alpha.tolist(),
        loadings=theta.loadings.tolist(),
        phi=theta.phi.tolist(),
        psi=None if theta.psi is None else theta.psi.tolist(),
    )
    return dataset, truth
