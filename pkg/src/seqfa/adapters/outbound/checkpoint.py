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

"""JSON files as storage of engine snapshots."""

import logging
from pathlib import Path

from seqfa.core import models
from seqfa.ports.outbound.checkpoint import CheckpointStorePort

log = logging.getLogger(__name__)


class JsonCheckpointStore(CheckpointStorePort):
    """Keeps the latest snapshot of every model as `<label>.json` in a directory."""

    def __init__(self, *, directory: Path):
        self._directory = Path(directory)

    def _path(self, label: str) -> Path:
        return self._directory / f"{label}.json"

    def save(self, *, label: str, snapshot: models.EngineSnapshot) -> None:
        """Overwrite the checkpoint of the model `label`."""
        self._directory.mkdir(parents=True, exist_ok=True)
        path = self._path(label)
        staging = path.with_suffix(".json.tmp")
        staging.write_text(snapshot.model_dump_json())
        staging.replace(path)
        log.debug(
            "Saved checkpoint of model '%s'.",
            label,
            extra={"model": label, "observation": snapshot.i_processed},
        )

    def load(self, *, label: str) -> models.EngineSnapshot:
        """Read the checkpoint of the model `label`."""
        path = self._path(label)
        if not path.is_file():
            error = self.CheckpointNotFoundError(label=label)
            log.error(error, extra={"model": label, "path": str(path)})
            raise error
        return models.EngineSnapshot.model_validate_json(path.read_text())
