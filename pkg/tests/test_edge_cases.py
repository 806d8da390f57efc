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

"""Testing edge cases of analysis runs that are not covered by the typical journey."""

from pathlib import Path

import pytest
from pydantic import ValidationError

from seqfa.cli import (
    EXIT_CONFIG_ERROR,
    EXIT_DATA_ERROR,
    EXIT_DEGENERATE_POPULATION,
    EXIT_FAILURE,
    EXIT_TUNING_FAILURE,
    exit_code,
)
from seqfa.core.analysis import EVIDENCE, EVIDENCE_REPLICATES, SUMMARY
from seqfa.core.models import Scenario
from seqfa.inject import prepare_core
from seqfa.ports.inbound.analysis import AnalysisRunnerPort
from seqfa.ports.inbound.engine import SequentialEnginePort
from seqfa.ports.outbound.artifacts import ArtifactStorePort
from tests.fixtures.config import get_config
from tests.fixtures.utils import write_text_file


def test_dataset_and_scenario_are_exclusive(tmp_path: Path):
    """A config naming a file and a scenario is rejected."""
    with pytest.raises(ValidationError, match="either `dataset_path` or `scenario`"):
        get_config(dataset_path=tmp_path / "data.csv", output_dir=tmp_path)


@pytest.mark.asyncio
async def test_no_dataset_configured(tmp_path: Path):
    """A run needs a file or a scenario."""
    config = get_config(scenario=None, output_dir=tmp_path)
    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.ConfigurationError):
            await runner.run()


@pytest.mark.asyncio
async def test_init_block_covering_all_observations(tmp_path: Path):
    """A batch initialization must leave observations to stream."""
    config = get_config(scenario_n=10, n_init=10, output_dir=tmp_path)
    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.ConfigurationError, match="n_init=10"):
            await runner.run()
    assert not (tmp_path / EVIDENCE).exists()


@pytest.mark.asyncio
async def test_unreadable_dataset(tmp_path: Path):
    """Malformed files surface as data source errors."""
    path = write_text_file(tmp_path / "ragged.csv", "a,b,c\n1,2,3\n4,5\n")
    config = get_config(scenario=None, dataset_path=path, output_dir=tmp_path / "run")
    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.DataSourceError, match="ragged.csv"):
            await runner.run()


@pytest.mark.asyncio
async def test_model_incompatible_with_binary_data(tmp_path: Path):
    """A continuous-only custom model cannot be compared on binary items."""
    config = get_config(
        scenario=Scenario.BINARY1,
        scenario_n=20,
        models=["EFA1", "SAT"],
        output_dir=tmp_path,
    )
    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.ConfigurationError):
            await runner.run()


@pytest.mark.asyncio
async def test_unknown_model_label(tmp_path: Path):
    """Labels that are neither presets nor custom models are rejected."""
    config = get_config(models=["EFA1", "bifactor"], output_dir=tmp_path)
    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.ConfigurationError, match="bifactor"):
            await runner.run()


@pytest.mark.asyncio
async def test_replicates_report_monte_carlo_error(tmp_path: Path):
    """Several replicates add a standard error column to the ranking."""
    config = get_config(
        scenario_n=12, models=["EFA1"], replicates=2, output_dir=tmp_path
    )
    async with prepare_core(config=config) as runner:
        summary = await runner.run()

    assert len(summary.final_log_evidence["EFA1"]) == 2
    assert summary.final_log_evidence["EFA1"][0] != summary.final_log_evidence["EFA1"][1]
    assert (tmp_path / "checkpoints" / "replicate_1" / "EFA1.json").exists()
    report = (tmp_path / SUMMARY).read_text()
    assert "mean of 2 replicates" in report
    assert "mc_se" in report
    assert len((tmp_path / EVIDENCE_REPLICATES).read_text().splitlines()) == 3


@pytest.mark.asyncio
async def test_batch_initialization(tmp_path: Path):
    """With a batch initialization the evidence starts after the init block."""
    config = get_config(scenario_n=20, n_init=5, models=["EFA1"], output_dir=tmp_path)
    async with prepare_core(config=config) as runner:
        summary = await runner.run()

    evidence = (tmp_path / EVIDENCE).read_text().splitlines()
    assert len(evidence) == 1 + 20 - 5
    assert evidence[1].startswith("6,")
    assert summary.n_observations == 20


@pytest.mark.asyncio
async def test_checkpoints_can_be_disabled(tmp_path: Path):
    """No snapshots are written when checkpoints are switched off."""
    config = get_config(
        scenario_n=10, models=["EFA1"], write_checkpoints=False, output_dir=tmp_path
    )
    async with prepare_core(config=config) as runner:
        await runner.run()

    assert not (tmp_path / "checkpoints").exists()


@pytest.mark.parametrize(
    "error, expected_code",
    [
        (AnalysisRunnerPort.ConfigurationError(problem="x"), EXIT_CONFIG_ERROR),
        (AnalysisRunnerPort.DataSourceError(source="x", problem="y"), EXIT_DATA_ERROR),
        (
            ArtifactStorePort.ArtifactNotFoundError(name="x", root=Path("y")),
            EXIT_DATA_ERROR,
        ),
        (
            SequentialEnginePort.DegeneratePopulationError(observation_index=3),
            EXIT_DEGENERATE_POPULATION,
        ),
        (
            SequentialEnginePort.TuningFailureError(
                divergence_rate=0.9, n_steps=500, step_size=1e-3
            ),
            EXIT_TUNING_FAILURE,
        ),
        (RuntimeError("unexpected"), EXIT_FAILURE),
    ],
)
def test_exit_codes(error: BaseException, expected_code: int):
    """Every failure maps to its documented exit code."""
    assert exit_code(error) == expected_code
