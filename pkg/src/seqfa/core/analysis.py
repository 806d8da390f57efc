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

"""End-to-end analysis runs: load data, run the menu, write and report artifacts."""

import logging
from collections.abc import Mapping
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy
from pydantic import Field, model_validator
from pydantic_settings import BaseSettings

from seqfa import __version__
from seqfa.core.hmc import HmcTuningConfig
from seqfa.core.models import (
    Dataset,
    DataKind,
    Link,
    ModelSpec,
    ProposalKind,
    RunSummary,
    Scenario,
    TrueParameters,
)
from seqfa.core.modelselect import (
    ComparisonTable,
    MenuConfig,
    ModelSelector,
    evidence_mc_se,
    jeffreys_label,
    trajectory_frame,
)
from seqfa.core.simulate import simulate_scenario
from seqfa.core.smc import EngineConfig, SequentialEngine
from seqfa.ports.inbound.analysis import AnalysisRunnerPort
from seqfa.ports.inbound.model_selection import ModelSelectionPort
from seqfa.ports.outbound.artifacts import ArtifactStorePort
from seqfa.ports.outbound.dataset import DatasetStorePort

log = logging.getLogger(__name__)

EVIDENCE = "evidence.csv"
EVIDENCE_REPLICATES = "evidence_replicates.csv"
LBF_TRAJECTORIES = "lbf_trajectories.csv"
TRIGGERS = "triggers.csv"
ESS = "ess.csv"
SUMMARY = "summary.txt"
RUN_META = "run_meta.json"
DATASET = "dataset.csv"


class DatasetConfig(BaseSettings):
    """Config parameters selecting the dataset of a run."""

    dataset_path: Optional[Path] = Field(
        None,
        description="CSV file with a header row of item names and one row per"
        + " observation. Mutually exclusive with `scenario`.",
        examples=["data/big5.csv"],
    )
    scenario: Optional[Scenario] = Field(
        None, description="Built-in scenario to simulate instead of reading a file."
    )
    scenario_n: Optional[int] = Field(
        None,
        ge=1,
        description="Observations of the simulated scenario. `None` uses its default.",
    )
    scenario_seed: int = Field(0, ge=0, description="Seed of the simulated scenario.")
    data_kind: Optional[DataKind] = Field(
        None, description="Kind of the items of a file. `None` infers it from the values."
    )
    standardize: bool = Field(
        False, description="Center every continuous item and scale it to unit sd."
    )

    @model_validator(mode="after")
    def check_single_source(self) -> "DatasetConfig":
        """A run cannot read a file and simulate a scenario at once."""
        if self.dataset_path is not None and self.scenario is not None:
            raise ValueError("Specify either `dataset_path` or `scenario`, not both.")
        return self


class AnalysisConfig(DatasetConfig, MenuConfig, EngineConfig, HmcTuningConfig):
    """Config parameters of an analysis run."""

    replicates: int = Field(
        1, ge=1, description="Independent repetitions of the whole menu run."
    )
    master_seed: int = Field(0, ge=0, description="Seed all random streams derive from.")
    write_checkpoints: bool = Field(
        True, description="Snapshot every engine at each resample and at the end."
    )
    draws_every_resample: bool = Field(
        True,
        description="Write posterior draws at every resample event, not only at the end.",
    )


def _versions() -> dict[str, str]:
    return {
        "seqfa": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
    }


def evidence_frame(
    engines: Mapping[str, SequentialEngine], first_index: int
) -> pd.DataFrame:
    """Cumulative log evidence of every model from observation `first_index` on."""
    columns = {
        label: pd.Series(
            engine.ledger.cumulative, index=range(1, len(engine.ledger) + 1), dtype=float
        )
        for label, engine in engines.items()
    }
    frame = pd.DataFrame(columns).loc[first_index:]
    frame.index.name = "index"
    return frame


def ess_frame(engines: Mapping[str, SequentialEngine], first_index: int) -> pd.DataFrame:
    """ESS after every assimilated observation, before any resampling."""
    columns = {
        label: pd.Series(
            engine.ess_history,
            index=range(first_index, first_index + len(engine.ess_history)),
            dtype=float,
        )
        for label, engine in engines.items()
    }
    frame = pd.DataFrame(columns)
    frame.index.name = "index"
    return frame


def trigger_frame(replicates: list[dict[str, SequentialEngine]]) -> pd.DataFrame:
    """One row per resample-jitter event of every model and replicate."""
    rows = [
        {"replicate": replicate, "model": label, "observation": index, "ess": ess}
        for replicate, engines in enumerate(replicates)
        for label, engine in engines.items()
        for index, ess in zip(engine.policy.trigger_log, engine.policy.trigger_ess)
    ]
    frame = pd.DataFrame(rows, columns=["replicate", "model", "observation", "ess"])
    frame.index.name = "event"
    return frame


def draws_frame(engine: SequentialEngine, every_resample: bool) -> pd.DataFrame:
    """Weighted particle draws at the recorded snapshots of an engine."""
    snapshots = engine.draw_snapshots if every_resample else engine.draw_snapshots[-1:]
    names = engine.model.parameter_names()
    frames = []
    for snapshot in snapshots:
        frame = pd.DataFrame(snapshot.values, columns=names)
        frame.insert(0, "logw", snapshot.logw)
        frame.insert(0, "particle", np.arange(len(snapshot.logw)))
        frame.insert(0, "observation", snapshot.index)
        frames.append(frame)
    draws = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame()
    draws.index.name = "row"
    return draws


def render_report(
    final_evidence: pd.DataFrame, triggers: pd.DataFrame, n_observations: int
) -> str:
    """Ranking, lower-triangular LBF matrix, Jeffreys labels and trigger counts.

    `final_evidence` holds one row per replicate and one column per model.
    """
    n_replicates = len(final_evidence)
    table = ComparisonTable(
        index=n_observations,
        log_evidence={label: float(final_evidence[label].mean()) for label in final_evidence},
    )
    lines = [
        f"Log evidence after {n_observations} observations"
        + (f", mean of {n_replicates} replicates" if n_replicates > 1 else ""),
        "",
    ]
    ranking = pd.DataFrame(table.ranking(), columns=["model", "log_evidence"])
    ranking.index = pd.RangeIndex(1, len(ranking) + 1, name="rank")
    if n_replicates > 1:
        ranking["mc_se"] = [evidence_mc_se(final_evidence[label]) for label in ranking.model]
    lines += [ranking.to_string(float_format=lambda x: f"{x:.2f}"), ""]

    lines += ["Log Bayes factors, row model over column model", ""]
    lower = table.lower_triangle()
    lines.append(
        lower.to_string(float_format=lambda x: f"{x:.2f}", na_rep="")
        if not lower.empty
        else "(a single model, nothing to compare)"
    )
    lines.append("")

    ranked = [label for label, _ in table.ranking()]
    if len(ranked) > 1:
        lines += ["Evidence strength", ""]
        for i, model_a in enumerate(ranked):
            for model_b in ranked[i + 1 :]:
                lbf = table.lbf(model_a, model_b)
                lines.append(
                    f"  {model_a} over {model_b}: LBF {lbf:.2f},"
                    + f" {jeffreys_label(lbf).value}"
                )
        lines.append("")

    lines += ["Resample-jitter triggers per replicate", ""]
    for label in table.labels:
        counts = [
            int(((triggers.model == label) & (triggers.replicate == r)).sum())
            for r in range(n_replicates)
        ]
        lines.append(f"  {label}: {', '.join(str(count) for count in counts)}")
    return "\n".join(lines) + "\n"


class AnalysisRunner(AnalysisRunnerPort):
    """Runs a model comparison on one dataset and persists everything it produces."""

    def __init__(
        self,
        *,
        config: AnalysisConfig,
        datasets: DatasetStorePort,
        artifacts: ArtifactStorePort,
        selector: ModelSelector,
    ):
        self._config = config
        self._datasets = datasets
        self._artifacts = artifacts
        self._selector = selector

    def load_dataset(self) -> tuple[Dataset, Optional[TrueParameters]]:
        """Read the configured file or simulate the configured scenario."""
        config = self._config
        if config.scenario is not None:
            return simulate_scenario(config.scenario, config.scenario_n, config.scenario_seed)
        if config.dataset_path is None:
            error = self.ConfigurationError(
                problem="either `dataset_path` or `scenario` must be set"
            )
            log.error(error)
            raise error
        try:
            dataset = self._datasets.read(
                path=config.dataset_path,
                kind=config.data_kind,
                standardize=config.standardize,
            )
        except (OSError, DatasetStorePort.DatasetFormatError) as error:
            source_error = self.DataSourceError(
                source=str(config.dataset_path), problem=str(error)
            )
            log.error(source_error, extra={"path": str(config.dataset_path)})
            raise source_error from error
        return dataset, None

    def _menu(self, dataset: Dataset) -> dict:
        try:
            return self._selector.build_menu(labels=self._config.models, dataset=dataset)
        except (
            ModelSelectionPort.UnknownPresetError,
            ModelSelectionPort.IncompatibleSpecError,
            ModelSelectionPort.MixedDataKindError,
        ) as error:
            config_error = self.ConfigurationError(problem=str(error))
            log.error(config_error)
            raise config_error from error

    def _check_proposal(self, menu: dict[str, ModelSpec]) -> None:
        """Laplace proposals are only defined for logit models."""
        if self._config.proposal != ProposalKind.LAPLACE:
            return
        for label, spec in menu.items():
            if spec.data_kind == DataKind.BINARY and spec.link != Link.LOGIT:
                error = self.ConfigurationError(
                    problem=f"the laplace proposal needs a logit link, model {label}"
                    + f" uses {spec.link.value}; choose proposal vb or prior"
                )
                log.error(error, extra={"model": label})
                raise error

    async def run(self) -> RunSummary:
        """Stream the dataset through every model and write all artifacts."""
        config = self._config
        dataset, truth = self.load_dataset()
        if config.n_init >= dataset.n:
            error = self.ConfigurationError(
                problem=f"n_init={config.n_init} leaves no observation of {dataset.n}"
                + " to stream"
            )
            log.error(error)
            raise error
        menu = self._menu(dataset)
        self._check_proposal(menu)

        log.info(
            "Starting a run of %i models with %i replicates.",
            len(menu),
            config.replicates,
            extra={
                "models": list(menu),
                "n": dataset.n,
                "n_particles": config.n_particles,
                "output_dir": str(self._artifacts.root),
            },
        )
        replicates = []
        for replicate in range(config.replicates):
            replicates.append(
                await self._selector.run_menu(menu=menu, dataset=dataset, replicate=replicate)
            )

        self._write_artifacts(dataset, truth, replicates)
        summary = RunSummary(
            output_dir=str(self._artifacts.root),
            n_observations=dataset.n,
            models=list(menu),
            final_log_evidence={
                label: [engines[label].ledger.log_evidence for engines in replicates]
                for label in menu
            },
            trigger_counts={
                label: [len(engines[label].policy.trigger_log) for engines in replicates]
                for label in menu
            },
        )
        log.info("Run finished.", extra={"output_dir": summary.output_dir})
        return summary

    def _write_artifacts(
        self,
        dataset: Dataset,
        truth: Optional[TrueParameters],
        replicates: list[dict[str, SequentialEngine]],
    ) -> None:
        config = self._config
        first_index = config.n_init + 1
        engines = replicates[0]

        self._artifacts.write_frame(name=EVIDENCE, frame=evidence_frame(engines, first_index))
        trajectories = trajectory_frame(
            {label: engine.ledger for label, engine in engines.items()}
        )
        self._artifacts.write_frame(
            name=LBF_TRAJECTORIES, frame=trajectories.loc[first_index:]
        )
        self._artifacts.write_frame(name=ESS, frame=ess_frame(engines, first_index))
        triggers = trigger_frame(replicates)
        self._artifacts.write_frame(name=TRIGGERS, frame=triggers)

        final_evidence = pd.DataFrame(
            {
                label: [reps[label].ledger.log_evidence for reps in replicates]
                for label in engines
            }
        )
        final_evidence.index.name = "replicate"
        self._artifacts.write_frame(name=EVIDENCE_REPLICATES, frame=final_evidence)

        for label, engine in engines.items():
            self._artifacts.write_frame(
                name=f"posterior_summary/{label}.csv", frame=engine.posterior_summary()
            )
            self._artifacts.write_frame(
                name=f"posterior_draws/{label}.csv",
                frame=draws_frame(engine, config.draws_every_resample),
            )

        if truth is not None:
            self._datasets.write(
                path=self._artifacts.root / DATASET, dataset=dataset, truth=truth
            )

        self._artifacts.write_json(
            name=RUN_META,
            payload={
                "config": config.model_dump(mode="json"),
                "versions": _versions(),
                "master_seed": config.master_seed,
                "n_observations": dataset.n,
                "items": list(dataset.item_names),
                "data_kind": dataset.kind.value,
                "models": list(engines),
            },
        )
        self._artifacts.write_text(
            name=SUMMARY, text=render_report(final_evidence, triggers, dataset.n)
        )
        log.info(
            "Wrote run artifacts.",
            extra={"output_dir": str(self._artifacts.root), "models": list(engines)},
        )

    def simulate(
        self, *, scenario: Scenario, n: Optional[int], seed: int, out_path: Path
    ) -> TrueParameters:
        """Write a simulated scenario dataset and its sidecar of true parameters."""
        dataset, truth = simulate_scenario(scenario, n, seed)
        self._datasets.write(path=out_path, dataset=dataset, truth=truth)
        return truth

    def report(self) -> str:
        """Re-render the summary from the stored artifacts of a run."""
        meta = self._artifacts.read_json(name=RUN_META)
        final_evidence = self._artifacts.read_frame(name=EVIDENCE_REPLICATES)
        triggers = self._artifacts.read_frame(name=TRIGGERS)
        return render_report(final_evidence, triggers, int(meta["n_observations"]))
