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

"""Tests for the checks an analysis run performs before any engine computes."""

from pathlib import Path

import pytest
import yaml
from typer.testing import CliRunner

from seqfa.cli import EXIT_CONFIG_ERROR, cli
from seqfa.core.analysis import EVIDENCE
from seqfa.core.models import Link, ProposalKind, Scenario
from seqfa.inject import prepare_core
from seqfa.ports.inbound.analysis import AnalysisRunnerPort
from tests.fixtures.config import TEST_CONFIG_YAML, get_config

PROBIT_RUN = {
    "scenario": Scenario.BINARY1,
    "scenario_n": 12,
    "link": Link.PROBIT,
    "models": ["EFA1"],
}


@pytest.mark.asyncio
async def test_laplace_proposal_rejects_probit_models(tmp_path: Path):
    """The default Laplace proposal with a probit link fails before streaming."""
    config = get_config(**PROBIT_RUN, output_dir=tmp_path)
    assert config.proposal == ProposalKind.LAPLACE

    async with prepare_core(config=config) as runner:
        with pytest.raises(AnalysisRunnerPort.ConfigurationError, match="logit"):
            await runner.run()
    assert not (tmp_path / EVIDENCE).exists()


@pytest.mark.asyncio
async def test_prior_proposal_runs_probit_models(tmp_path: Path):
    """Probit models run once the proposal does not need a logit link."""
    config = get_config(**PROBIT_RUN, proposal=ProposalKind.PRIOR, output_dir=tmp_path)

    async with prepare_core(config=config) as runner:
        summary = await runner.run()

    assert summary.models == ["EFA1"]
    assert summary.n_observations == 12
    assert (tmp_path / EVIDENCE).exists()


@pytest.mark.asyncio
async def test_continuous_runs_ignore_the_binary_link(tmp_path: Path):
    """A probit link setting does not concern models of continuous items."""
    config = get_config(scenario_n=6, link=Link.PROBIT, output_dir=tmp_path)

    async with prepare_core(config=config) as runner:
        summary = await runner.run()

    assert summary.n_observations == 6


def test_cli_exits_with_config_error_for_laplace_and_probit(tmp_path: Path):
    """The command line maps the rejected proposal to the config exit code."""
    settings = yaml.safe_load(TEST_CONFIG_YAML.read_text())
    settings.update(scenario="binary1", scenario_n=12, link="probit", models=["EFA1"])
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(settings))

    result = CliRunner().invoke(
        cli, ["run", "--config", str(config_path), "--output-dir", str(tmp_path / "run")]
    )

    assert result.exit_code == EXIT_CONFIG_ERROR
    assert "logit" in result.output
