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

"""Interface of the analysis runs driven from the command line."""

from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

from seqfa.core import models


class AnalysisRunnerPort(ABC):
    """Interface of a service running model comparisons end to end."""

    class ConfigurationError(ValueError):
        """Thrown when a run configuration is inconsistent."""

        def __init__(self, *, problem: str):
            self.problem = problem
            message = f"Invalid run configuration: {problem}"
            super().__init__(message)

    class DataSourceError(RuntimeError):
        """Thrown when the dataset of a run cannot be obtained."""

        def __init__(self, *, source: str, problem: str):
            self.source = source
            self.problem = problem
            message = f"Could not load the dataset from '{source}': {problem}"
            super().__init__(message)

    @abstractmethod
    async def run(self) -> models.RunSummary:
        """Stream the dataset through every model of the menu and write all artifacts.

        Raises:
            - ConfigurationError: if the config does not fit the dataset.
            - DataSourceError: if the dataset cannot be read.
            - SequentialEnginePort.DegeneratePopulationError: if an engine degenerates.
            - SequentialEnginePort.TuningFailureError: if a jitter step cannot be tuned.
        """
        ...

    @abstractmethod
    def simulate(
        self, *, scenario: models.Scenario, n: Optional[int], seed: int, out_path: Path
    ) -> models.TrueParameters:
        """Write a simulated scenario dataset and its true parameters."""
        ...

    @abstractmethod
    def report(self) -> str:
        """Render the human-readable summary of a finished run."""
        ...
