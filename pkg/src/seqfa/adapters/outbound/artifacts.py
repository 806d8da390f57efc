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

"""File system storage of run artifacts."""

import json
import logging
from pathlib import Path
from typing import Any

import pandas as pd
from pydantic import Field
from pydantic_settings import BaseSettings

from seqfa.ports.outbound.artifacts import ArtifactStorePort

log = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


class OutputConfig(BaseSettings):
    """Config parameters for the output of a run."""

    output_dir: Path = Field(
        Path("seqfa_run"),
        description="Directory receiving all artifacts of a run. Created if missing.",
        examples=["seqfa_run", "/data/runs/scenario1"],
    )


class FileArtifactStore(ArtifactStorePort):
    """Stores artifacts as files below a run directory."""

    def __init__(self, *, root: Path):
        self._root = Path(root)

    @property
    def root(self) -> Path:
        """The run directory."""
        return self._root

    def _target(self, name: str) -> Path:
        target = self._root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def _source(self, name: str) -> Path:
        source = self._root / name
        if not source.is_file():
            error = self.ArtifactNotFoundError(name=name, root=self._root)
            log.error(error, extra={"artifact": name})
            raise error
        return source

    def write_frame(self, *, name: str, frame: pd.DataFrame) -> None:
        """Store a table as CSV with full float precision."""
        frame.to_csv(self._target(name), float_format=FLOAT_FORMAT)
        log.debug("Wrote artifact '%s'.", name, extra={"artifact": name})

    def read_frame(self, *, name: str) -> pd.DataFrame:
        """Read a table, using its first column as index."""
        return pd.read_csv(self._source(name), index_col=0)

    def write_text(self, *, name: str, text: str) -> None:
        """Store plain text."""
        self._target(name).write_text(text)

    def read_text(self, *, name: str) -> str:
        """Read plain text."""
        return self._source(name).read_text()

    def write_json(self, *, name: str, payload: dict[str, Any]) -> None:
        """Store a JSON document with sorted keys."""
        self._target(name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def read_json(self, *, name: str) -> dict[str, Any]:
        """Read a JSON document."""
        return json.loads(self._source(name).read_text())
