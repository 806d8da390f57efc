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

"""Interface for storing engine snapshots and the exception it may throw."""

from typing import Protocol

from seqfa.core import models


class CheckpointStorePort(Protocol):
    """An interface for an adapter that persists engine snapshots."""

    class CheckpointNotFoundError(RuntimeError):
        """Thrown when no checkpoint exists for a model."""

        def __init__(self, *, label: str):
            self.label = label
            message = f"No checkpoint was found for the model '{label}'."
            super().__init__(message)

    def save(self, *, label: str, snapshot: models.EngineSnapshot) -> None:
        """Store the snapshot as the latest checkpoint of the model `label`."""
        ...

    def load(self, *, label: str) -> models.EngineSnapshot:
        """Return the latest checkpoint of the model `label`.

        Raises:
            - CheckpointNotFoundError: if there is none.
        """
        ...
