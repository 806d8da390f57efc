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

"""Interface for running a menu of models side by side on one data stream."""

from abc import ABC, abstractmethod
from collections.abc import Mapping, Sequence

from seqfa.core import models
from seqfa.ports.inbound.engine import SequentialEnginePort


class ModelSelectionPort(ABC):
    """Interface of a service comparing models by their sequential evidence."""

    class MixedDataKindError(ValueError):
        """Thrown when the models of a menu describe different kinds of data."""

        def __init__(self, *, kinds: Mapping[str, models.DataKind]):
            self.kinds = dict(kinds)
            listing = ", ".join(f"{label}: {kind.value}" for label, kind in kinds.items())
            message = f"All models of a menu must describe the same kind of data ({listing})."
            super().__init__(message)

    class UnknownPresetError(ValueError):
        """Thrown when a model label is neither a preset nor a custom model."""

        def __init__(self, *, label: str):
            self.label = label
            message = (
                f"The model '{label}' is unknown. Presets are EZ, AZ, EFA<k> and SAT;"
                + " other labels must be defined as custom models."
            )
            super().__init__(message)

    class IncompatibleSpecError(ValueError):
        """Thrown when a model does not fit the dataset it is supposed to run on."""

        def __init__(self, *, label: str, reason: str):
            self.label = label
            self.reason = reason
            message = f"The model '{label}' cannot be run on this dataset: {reason}"
            super().__init__(message)

    @abstractmethod
    def build_menu(
        self, *, labels: Sequence[str], dataset: models.Dataset
    ) -> dict[str, models.ModelSpec]:
        """Resolve model labels into specs that fit the dataset.

        Raises:
            - UnknownPresetError: if a label cannot be resolved.
            - IncompatibleSpecError: if a spec does not fit the dataset.
            - MixedDataKindError: if the specs describe different kinds of data.
        """
        ...

    @abstractmethod
    async def run_menu(
        self,
        *,
        menu: Mapping[str, models.ModelSpec],
        dataset: models.Dataset,
        replicate: int = 0,
    ) -> dict[str, SequentialEnginePort]:
        """Run one engine per model over the same observation order.

        Raises:
            - SequentialEnginePort.DegeneratePopulationError: if an engine degenerates.
            - SequentialEnginePort.TuningFailureError: if a jitter step cannot be tuned.
        """
        ...
