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

"""Interface of the sequential inference engines."""

from abc import ABC, abstractmethod
from typing import Optional

import numpy as np
import pandas as pd

from seqfa.core import models


class SequentialEnginePort(ABC):
    """Interface of an engine that streams observations through a particle system."""

    class DegeneratePopulationError(RuntimeError):
        """Thrown when an observation has zero likelihood under every particle."""

        def __init__(self, *, observation_index: int):
            self.observation_index = observation_index
            message = (
                f"Observation {observation_index} is impossible under every particle,"
                + " the population has degenerated."
            )
            super().__init__(message)

    class TuningFailureError(RuntimeError):
        """Thrown when the pilot chain of the jitter step diverges too often."""

        def __init__(self, *, divergence_rate: float, n_steps: int, step_size: float):
            self.divergence_rate = divergence_rate
            self.n_steps = n_steps
            self.step_size = step_size
            message = (
                f"HMC tuning failed: {divergence_rate:.0%} of {n_steps} pilot steps"
                + f" diverged, final step size {step_size:.3g}."
            )
            super().__init__(message)

    class CheckpointMismatchError(RuntimeError):
        """Thrown when a checkpoint does not belong to the model it is loaded into."""

        def __init__(self, *, label: str, reason: str):
            self.label = label
            self.reason = reason
            message = f"The checkpoint of model '{label}' cannot be resumed: {reason}"
            super().__init__(message)

    @property
    @abstractmethod
    def particles(self) -> models.ParticleSet:
        """The current particle population."""
        ...

    @property
    @abstractmethod
    def ledger(self) -> models.EvidenceLedger:
        """The evidence booked so far."""
        ...

    @abstractmethod
    def initialize(self) -> None:
        """Create the initial population, optionally from a batch of observations.

        Raises:
            - TuningFailureError: if the batch chain could not be tuned.
        """
        ...

    @abstractmethod
    def step(self) -> None:
        """Assimilate the next observation.

        Raises:
            - DegeneratePopulationError: if no particle supports the observation.
            - TuningFailureError: if a jitter step could not be tuned.
        """
        ...

    @abstractmethod
    def run(self, until: Optional[int] = None) -> models.EvidenceLedger:
        """Assimilate observations until `until` of them (default: all) are processed."""
        ...

    @abstractmethod
    def posterior_summary(self) -> pd.DataFrame:
        """Weighted means, standard deviations and quantiles of all parameters."""
        ...

    @abstractmethod
    def predictive_draw(self) -> np.ndarray:
        """One draw of the next observation per particle."""
        ...
