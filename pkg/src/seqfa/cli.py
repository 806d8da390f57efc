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

"""Entrypoint of the package"""

import asyncio
from pathlib import Path
from typing import Optional

import typer
from pydantic import ValidationError

from seqfa import __version__
from seqfa.core.models import Scenario
from seqfa.main import report_run, run_analysis, simulate_dataset
from seqfa.ports.inbound.analysis import AnalysisRunnerPort
from seqfa.ports.inbound.engine import SequentialEnginePort
from seqfa.ports.outbound.artifacts import ArtifactStorePort
from seqfa.ports.outbound.dataset import DatasetStorePort

EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DATA_ERROR = 3
EXIT_DEGENERATE_POPULATION = 4
EXIT_TUNING_FAILURE = 5

_EXIT_CODES: list[tuple[type[BaseException], int]] = [
    (ValidationError, EXIT_CONFIG_ERROR),
    (AnalysisRunnerPort.ConfigurationError, EXIT_CONFIG_ERROR),
    (AnalysisRunnerPort.DataSourceError, EXIT_DATA_ERROR),
    (DatasetStorePort.DatasetFormatError, EXIT_DATA_ERROR),
    (ArtifactStorePort.ArtifactNotFoundError, EXIT_DATA_ERROR),
    (SequentialEnginePort.DegeneratePopulationError, EXIT_DEGENERATE_POPULATION),
    (SequentialEnginePort.TuningFailureError, EXIT_TUNING_FAILURE),
]

cli = typer.Typer()


def exit_code(error: BaseException) -> int:
    """The documented exit code of a failed command."""
    for error_type, code in _EXIT_CODES:
        if isinstance(error, error_type):
            return code
    return EXIT_FAILURE


def _fail(error: Exception) -> typer.Exit:
    typer.echo(f"Error: {error}", err=True)
    return typer.Exit(code=exit_code(error))


@cli.command(name="run")
def sync_run(
    config: Optional[Path] = typer.Option(
        None, "--config", "-c", help="YAML file with the run configuration."
    ),
    output_dir: Optional[Path] = typer.Option(
        None, help="Directory receiving the artifacts. Overrides the config."
    ),
    master_seed: Optional[int] = typer.Option(
        None, help="Seed all random streams derive from. Overrides the config."
    ),
    n_workers: Optional[int] = typer.Option(
        None, help="Threads used for the particle chains. Overrides the config."
    ),
):
    """Stream a dataset through a menu of models and write evidence and posteriors."""
    try:
        summary = asyncio.run(
            run_analysis(
                config,
                output_dir=output_dir,
                master_seed=master_seed,
                n_workers=n_workers,
            )
        )
    except Exception as error:
        raise _fail(error) from error
    typer.echo(f"Artifacts written to {summary.output_dir}")


@cli.command(name="simulate")
def sync_simulate(
    scenario: Scenario = typer.Argument(..., help="Built-in scenario to simulate."),
    out_path: Path = typer.Argument(..., help="CSV file to write."),
    n: Optional[int] = typer.Option(None, help="Observations. Defaults per scenario."),
    seed: int = typer.Option(0, help="Seed of the simulation."),
):
    """Simulate a scenario dataset and record its true parameters alongside."""
    try:
        asyncio.run(simulate_dataset(scenario=scenario, n=n, seed=seed, out_path=out_path))
    except Exception as error:
        raise _fail(error) from error
    typer.echo(f"Dataset written to {out_path}")


@cli.command(name="report")
def sync_report(
    run_dir: Path = typer.Argument(..., help="Output directory of a finished run."),
):
    """Print the evidence ranking, Bayes factors and trigger counts of a run."""
    try:
        text = asyncio.run(report_run(run_dir))
    except Exception as error:
        raise _fail(error) from error
    typer.echo(text, nl=False)


@cli.command(name="version")
def sync_version():
    """Print the version of seqfa."""
    typer.echo(__version__)
