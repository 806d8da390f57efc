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

"""Module hosting the dependency injection container."""

from collections.abc import AsyncGenerator
from concurrent.futures import ThreadPoolExecutor
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Optional

from seqfa.adapters.outbound.artifacts import FileArtifactStore
from seqfa.adapters.outbound.checkpoint import JsonCheckpointStore
from seqfa.adapters.outbound.csv_dataset import CsvDatasetStore
from seqfa.config import Config
from seqfa.core.analysis import AnalysisRunner
from seqfa.core.modelselect import ModelSelector
from seqfa.ports.inbound.analysis import AnalysisRunnerPort


def checkpoint_directory(output_dir: Path, replicate: int) -> Path:
    """Where the engine snapshots of one replicate are kept."""
    return output_dir / "checkpoints" / f"replicate_{replicate}"


@asynccontextmanager
async def prepare_core(
    *, config: Config, output_dir: Optional[Path] = None
) -> AsyncGenerator[AnalysisRunnerPort, None]:
    """Constructs the analysis runner with all its outbound dependencies.

    `output_dir` overrides the configured run directory.
    """
    root = config.output_dir if output_dir is None else output_dir
    executor = ThreadPoolExecutor(max_workers=config.n_workers) if config.n_workers > 1 else None

    def checkpoint_store(replicate: int) -> JsonCheckpointStore:
        return JsonCheckpointStore(directory=checkpoint_directory(root, replicate))

    selector = ModelSelector(
        menu_config=config,
        engine_config=config,
        tuning=config,
        master_seed=config.master_seed,
        executor=executor,
        checkpoint_stores=checkpoint_store if config.write_checkpoints else None,
    )
    try:
        yield AnalysisRunner(
            config=config,
            datasets=CsvDatasetStore(),
            artifacts=FileArtifactStore(root=root),
            selector=selector,
        )
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
