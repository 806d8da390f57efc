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

"""Interface for persisting the artifacts of a run."""

from pathlib import Path
from typing import Any, Protocol

import pandas as pd


class ArtifactStorePort(Protocol):
    """An interface for an adapter that stores named artifacts below a run directory."""

    class ArtifactNotFoundError(RuntimeError):
        """Thrown when a requested artifact does not exist."""

        def __init__(self, *, name: str, root: Path):
            self.name = name
            self.root = root
            message = f"The artifact '{name}' does not exist in '{root}'."
            super().__init__(message)

    @property
    def root(self) -> Path:
        """The run directory."""
        ...

    def write_frame(self, *, name: str, frame: pd.DataFrame) -> None:
        """Store a table as CSV, including its index."""
        ...

    def read_frame(self, *, name: str) -> pd.DataFrame:
        """Read a table stored with `write_frame`."""
        ...

    def write_text(self, *, name: str, text: str) -> None:
        """Store plain text."""
        ...

    def read_text(self, *, name: str) -> str:
        """Read plain text stored with `write_text`."""
        ...

    def write_json(self, *, name: str, payload: dict[str, Any]) -> None:
        """Store a JSON document."""
        ...

    def read_json(self, *, name: str) -> dict[str, Any]:
        """Read a JSON document stored with `write_json`."""
        ...
