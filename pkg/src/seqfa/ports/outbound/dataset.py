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

"""Interface for reading and writing datasets and the exception it may throw."""

from pathlib import Path
from typing import Optional, Protocol

from seqfa.core import models


class DatasetStorePort(Protocol):
    """An interface for an adapter that reads and writes tabular datasets."""

    class DatasetFormatError(ValueError):
        """Thrown when a file cannot be interpreted as a dataset."""

        def __init__(self, *, path: Path, problem: str):
            self.path = path
            self.problem = problem
            message = f"The file '{path}' is not a valid dataset: {problem}"
            super().__init__(message)

    def read(
        self,
        *,
        path: Path,
        kind: Optional[models.DataKind] = None,
        standardize: bool = False,
    ) -> models.Dataset:
        """Read a dataset with a header row of item names and one row per observation.

        The kind is inferred unless given.

        Raises:
            - DatasetFormatError: if the file is malformed.
        """
        ...

    def write(
        self,
        *,
        path: Path,
        dataset: models.Dataset,
        truth: Optional[models.TrueParameters] = None,
    ) -> None:
        """Write a dataset, and the parameters it was simulated from as a sidecar file."""
        ...
