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

"""Example data used for testing."""

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from seqfa.core.models import Dataset, DataKind, Link, ModelSpec
from seqfa.core.modelselect import confirmatory_spec, exploratory_spec, saturated_spec

# A small continuous sample, rows are observations:
CONTINUOUS_ROWS = np.array(
    [
        [0.3, -0.1, 0.8, 1.1],
        [-1.2, -0.7, -0.4, -0.9],
        [0.5, 0.9, 0.1, 0.2],
        [1.4, 1.0, 1.3, 0.6],
        [-0.2, 0.3, -0.6, -0.1],
        [0.9, 0.2, 0.4, 0.7],
    ]
)
CONTINUOUS_DATASET = Dataset(
    values=CONTINUOUS_ROWS,
    kind=DataKind.CONTINUOUS,
    item_names=("y1", "y2", "y3", "y4"),
)

BINARY_ROWS = np.array(
    [[1, 0, 1, 1], [0, 0, 1, 0], [1, 1, 1, 1], [0, 1, 0, 0], [1, 0, 0, 1]], dtype=float
)
BINARY_DATASET = Dataset(
    values=BINARY_ROWS, kind=DataKind.BINARY, item_names=("y1", "y2", "y3", "y4")
)

EFA1_CONTINUOUS: ModelSpec = exploratory_spec(4, 1, DataKind.CONTINUOUS)
CFA2_CONTINUOUS: ModelSpec = confirmatory_spec([0, 0, 1, 1], DataKind.CONTINUOUS)
EFA1_LOGIT: ModelSpec = exploratory_spec(4, 1, DataKind.BINARY, Link.LOGIT)
EFA1_PROBIT: ModelSpec = exploratory_spec(4, 1, DataKind.BINARY, Link.PROBIT)
AZ2_CONTINUOUS: ModelSpec = confirmatory_spec(
    [0, 0, 1, 1], DataKind.CONTINUOUS, approx_zero=True
)
EFA2_CONTINUOUS: ModelSpec = exploratory_spec(4, 2, DataKind.CONTINUOUS)
SAT_CONTINUOUS: ModelSpec = saturated_spec(4)
CFA2_LOGIT: ModelSpec = confirmatory_spec([0, 0, 1, 1], DataKind.BINARY)

GAUSSIAN_MEAN_DATA = np.array([0.4, -0.3, 1.2, 0.8, -0.5, 0.1, 0.9, 1.5])


@dataclass
class _GaussianMeanTarget:
    """Posterior of the mean after the first `n_data` observations."""

    data: np.ndarray

    @property
    def dim(self) -> int:
        return 1

    def pack(self, theta: np.ndarray, latent: Optional[np.ndarray] = None) -> np.ndarray:
        return np.asarray(theta, dtype=float).copy()

    def unpack(self, values: np.ndarray) -> tuple[np.ndarray, None]:
        return np.asarray(values, dtype=float).copy(), None

    def logpdf_and_grad(self, values: np.ndarray) -> tuple[float, np.ndarray]:
        n = self.data.size
        mean = values[0]
        logpdf = -0.5 * mean**2 - 0.5 * float(np.sum((self.data - mean) ** 2))
        grad = np.array([-mean + float(np.sum(self.data)) - n * mean])
        return logpdf, grad


class GaussianMeanModel:
    """y_i | mu ~ N(mu, 1) with mu ~ N(0, 1): every evidence quantity is known exactly."""

    def __init__(self, data: Sequence[float] = tuple(GAUSSIAN_MEAN_DATA)):
        self.data = np.asarray(data, dtype=float)

    @property
    def key(self) -> str:
        return "gaussian-mean"

    @property
    def n_observations(self) -> int:
        return self.data.size

    @property
    def latent_dim(self) -> int:
        return 0

    def prior_sample(self, rng: np.random.Generator, size: int) -> list[np.ndarray]:
        return [np.array([value]) for value in rng.standard_normal(size)]

    def loglik_point(self, thetas: Sequence[np.ndarray], index: int) -> np.ndarray:
        means = np.array([theta[0] for theta in thetas])
        return stats.norm.logpdf(self.data[index], loc=means)

    def augmented_loglik_point(self, thetas, latent, index):
        raise NotImplementedError

    def latent_prior_logpdf(self, thetas, latent):
        raise NotImplementedError

    def posterior_target(self, n_data: int) -> _GaussianMeanTarget:
        return _GaussianMeanTarget(data=self.data[:n_data])

    def predictive_draw(
        self, thetas: Sequence[np.ndarray], rng: np.random.Generator
    ) -> np.ndarray:
        means = np.array([theta[0] for theta in thetas])
        return (means + rng.standard_normal(means.size))[:, None]

    def parameter_names(self) -> list[str]:
        return ["mu"]

    def readout(self, thetas: Sequence[np.ndarray]) -> np.ndarray:
        return np.array([[theta[0]] for theta in thetas])

    def encode(self, theta: np.ndarray) -> dict:
        return {"mu": float(theta[0])}

    def decode(self, record: dict) -> np.ndarray:
        return np.array([record["mu"]])

    def exact_log_evidence(self, n_data: int) -> float:
        """log p(y_1, ..., y_n) from the marginal N(0, I + 11')."""
        cov = np.eye(n_data) + np.ones((n_data, n_data))
        return float(
            stats.multivariate_normal.logpdf(self.data[:n_data], mean=np.zeros(n_data), cov=cov)
        )

    def exact_increment(self, index: int) -> float:
        """log p(y_{index+1} | y_1, ..., y_index)."""
        prefix = self.data[:index]
        mean = float(np.sum(prefix)) / (index + 1)
        var = 1.0 + 1.0 / (index + 1)
        return float(stats.norm.logpdf(self.data[index], loc=mean, scale=np.sqrt(var)))

    def posterior_mean(self, n_data: int) -> float:
        """E[mu | y_1, ..., y_n]."""
        return float(np.sum(self.data[:n_data])) / (n_data + 1)
