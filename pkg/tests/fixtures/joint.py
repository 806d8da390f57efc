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

"""Join the functionality of all fixtures for run-level integration testing."""

__all__ = ["joint_fixture", "JointFixture"]

from collections.abc import AsyncGenerator
from dataclasses import dataclass
from pathlib import Path

import pytest_asyncio

from seqfa.adapters.outbound.artifacts import FileArtifactStore
from seqfa.config import Config
from seqfa.inject import prepare_core
from seqfa.ports.inbound.analysis import AnalysisRunnerPort
from tests.fixtures.config import get_config


@dataclass
class JointFixture:
    """Returned by the `joint_fixture`."""

    config: Config
    runner: AnalysisRunnerPort
    output_dir: Path
    artifacts: FileArtifactStore


async def joint_fixture_function(
    tmp_path: Path,
) -> AsyncGenerator[JointFixture, None]:
    """A fixture that wires a complete analysis runner writing into a temp directory.

    **Do not call directly** Instead, use get_joint_fixture().
    """
    output_dir = tmp_path / "run"
    config = get_config(output_dir=output_dir)

    async with prepare_core(config=config) as runner:
        yield JointFixture(
            config=config,
            runner=runner,
            output_dir=output_dir,
            artifacts=FileArtifactStore(root=output_dir),
        )


def get_joint_fixture():
    """Produce a function scoped joint fixture"""
    return pytest_asyncio.fixture(joint_fixture_function, scope="function")


joint_fixture = get_joint_fixture()

