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

"""In this module object construction and dependency injection is carried out."""

from pathlib import Path
from typing import Optional

from hexkit.log import configure_logging

from seqfa.config import Config
from seqfa.core.models import RunSummary, Scenario, TrueParameters
from seqfa.inject import prepare_core


def load_config(config_path: Optional[Path] = None, **overrides) -> Config:
    """Read the config from the given YAML file, or from the default locations."""
    overrides = {key: value for key, value in overrides.items() if value is not None}
    return Config(config_yaml=config_path, **overrides)  # type: ignore


async def run_analysis(config_path: Optional[Path] = None, **overrides) -> RunSummary:
    """Run the configured model comparison and write all artifacts."""
    config = load_config(config_path, **overrides)
    configure_logging(config=config)

    async with prepare_core(config=config) as runner:
        return await runner.run()


async def simulate_dataset(
    *, scenario: Scenario, n: Optional[int], seed: int, out_path: Path
) -> TrueParameters:
    """Write a simulated scenario dataset with its sidecar of true parameters."""
    config = load_config()
    configure_logging(config=config)

    async with prepare_core(config=config) as runner:
        return runner.simulate(scenario=scenario, n=n, seed=seed, out_path=out_path)


async def report_run(run_dir: Path) -> str:
    """Render the summary of a finished run."""
    config = load_config()
    configure_logging(config=config)

    async with prepare_core(config=config, output_dir=run_dir) as runner:
        return runner.report()
