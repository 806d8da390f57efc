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

"""Model menus, sequential Bayes factors and their presentation."""

import asyncio
import logging
import math
import re
from collections.abc import Mapping, Sequence
from concurrent.futures import Executor
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np
import pandas as pd
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings

from seqfa.core.distributions import RngStream
from seqfa.core.factor_model import FactorModel
from seqfa.core.hmc import HmcTuningConfig
from seqfa.core.models import (
    Dataset,
    DataKind,
    EvidenceLedger,
    FactorCovariance,
    FactorCovMode,
    LoadingCell,
    Link,
    ModelSpec,
    ModelStructure,
    ResidualMode,
)
from seqfa.core.smc import EngineConfig, SequentialEngine
from seqfa.ports.inbound.model_selection import ModelSelectionPort
from seqfa.ports.outbound.checkpoint import CheckpointStorePort

log = logging.getLogger(__name__)

DEFAULT_MENU = ["EZ", "AZ", "EFA1", "EFA2", "EFA3"]
SUBSTANTIAL_LBF = math.log(4.0)

_EFA_PRESET = re.compile(r"^EFA(\d+)$")


class MenuConfig(BaseSettings):
    """Config parameters describing the compared models."""

    models: list[str] = Field(
        DEFAULT_MENU,
        description="Labels of the compared models. EZ, AZ, EFA<k> and SAT are presets,"
        + " other labels refer to `custom_models`.",
        examples=[["EZ", "AZ", "EFA2"], ["EFA1", "SAT"]],
    )
    custom_models: dict[str, ModelSpec] = Field(
        {}, description="Fully specified models by label."
    )
    factor_assignment: Optional[list[int]] = Field(
        None,
        description="Zero-based factor of every item for the EZ and AZ presets."
        + " `None` splits the items into two contiguous blocks.",
        examples=[[0, 0, 0, 1, 1, 1]],
    )
    link: Link = Field(
        Link.LOGIT, description="Link of the preset models for binary data."
    )


class JeffreysLabel(str, Enum):
    """Qualitative strength of a Bayes factor."""

    INCONCLUSIVE = "inconclusive"
    SUBSTANTIAL = "substantial"


def jeffreys_label(lbf: float) -> JeffreysLabel:
    """A Bayes factor of 4 and above counts as substantial evidence."""
    return JeffreysLabel.SUBSTANTIAL if lbf >= SUBSTANTIAL_LBF else JeffreysLabel.INCONCLUSIVE


def default_factor_assignment(p: int, k: int = 2) -> list[int]:
    """Split p items into k contiguous blocks of near-equal size."""
    blocks = np.array_split(np.arange(p), min(k, p))
    return [factor for factor, block in enumerate(blocks) for _ in block]


def _binary_or_continuous(link: Link, kind: DataKind) -> tuple[Link, ResidualMode]:
    if kind == DataKind.CONTINUOUS:
        return Link.IDENTITY, ResidualMode.DIAGONAL_INV_GAMMA
    return link, ResidualMode.FIXED_IDENTITY


def confirmatory_spec(
    assignment: Sequence[int],
    kind: DataKind,
    link: Link = Link.LOGIT,
    approx_zero: bool = False,
) -> ModelSpec:
    """EZ (exact zero cross-loadings) or AZ (near-zero cross-loadings) preset.

    The first item of every factor carries a loading fixed to 1, its other items are
    free and the factor covariance has an inverse Wishart prior.
    """
    p = len(assignment)
    k = max(assignment) + 1
    link, residual_mode = _binary_or_continuous(link, kind)
    off_block = LoadingCell.approx_zero() if approx_zero else LoadingCell.fixed(0.0)
    seen: set[int] = set()
    pattern = []
    for factor in assignment:
        row = [off_block] * k
        row[factor] = LoadingCell.free() if factor in seen else LoadingCell.fixed(1.0)
        seen.add(factor)
        pattern.append(tuple(row))
    return ModelSpec(
        p=p,
        k=k,
        link=link,
        structure=ModelStructure.APPROX_ZERO if approx_zero else ModelStructure.CONFIRMATORY,
        loading_pattern=tuple(pattern),
        factor_cov=FactorCovariance(mode=FactorCovMode.INV_WISHART),
        residual_mode=residual_mode,
    )


def exploratory_spec(p: int, k: int, kind: DataKind, link: Link = Link.LOGIT) -> ModelSpec:
    """EFA preset: free lower-triangular loadings and uncorrelated factors."""
    link, residual_mode = _binary_or_continuous(link, kind)
    pattern = tuple(
        tuple(
            LoadingCell.fixed(0.0) if col > row else LoadingCell.free() for col in range(k)
        )
        for row in range(p)
    )
    return ModelSpec(
        p=p,
        k=k,
        link=link,
        structure=ModelStructure.EXPLORATORY,
        loading_pattern=pattern,
        residual_mode=residual_mode,
    )


def saturated_spec(p: int) -> ModelSpec:
    """SAT preset: an unstructured item covariance without factors."""
    return ModelSpec(
        p=p,
        k=0,
        link=Link.IDENTITY,
        structure=ModelStructure.SATURATED,
        loading_pattern=tuple(() for _ in range(p)),
        residual_mode=ResidualMode.DIAGONAL_INV_GAMMA,
    )


@dataclass(frozen=True)
class ModelMenu:
    """Named model specs sharing their item count and data kind."""

    entries: dict[str, ModelSpec]

    def __post_init__(self):
        kinds = {label: spec.data_kind for label, spec in self.entries.items()}
        if len(set(kinds.values())) > 1:
            error = ModelSelectionPort.MixedDataKindError(kinds=kinds)
            log.error(error, extra={"models": list(kinds)})
            raise error

    @property
    def labels(self) -> list[str]:
        """Model labels in menu order."""
        return list(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


def lbf_trajectory(
    ledger_a: EvidenceLedger, ledger_b: EvidenceLedger
) -> list[tuple[int, float]]:
    """Log Bayes factor of A over B after every observation both ledgers cover.

    Indices start at 1. Observations before either ledger's `available_from` are
    skipped.
    """
    start = max(ledger_a.available_from, ledger_b.available_from)
    shared = min(len(ledger_a), len(ledger_b))
    return [
        (index + 1, ledger_a.cumulative[index] - ledger_b.cumulative[index])
        for index in range(start, shared)
    ]


def prequential_log_score(ledger: EvidenceLedger) -> list[float]:
    """Cumulative log predictive score, which equals the cumulative log evidence."""
    return list(ledger.cumulative)


def evidence_mc_se(final_log_evidence: Sequence[float]) -> float:
    """Monte Carlo standard error of one run's log evidence from independent replicates."""
    values = np.asarray(final_log_evidence, dtype=float)
    if values.size < 2:
        return float("nan")
    return float(np.std(values, ddof=1))


@dataclass(frozen=True)
class ComparisonTable:
    """Log evidence of every model at one observation index, with pairwise LBFs."""

    index: int
    log_evidence: dict[str, float]

    @classmethod
    def from_ledgers(
        cls, ledgers: Mapping[str, EvidenceLedger], index: Optional[int] = None
    ) -> "ComparisonTable":
        """Compare the ledgers after observation `index` (default: the last shared one)."""
        index = min(len(ledger) for ledger in ledgers.values()) if index is None else index
        return cls(
            index=index,
            log_evidence={
                label: ledger.cumulative[index - 1] for label, ledger in ledgers.items()
            },
        )

    @property
    def labels(self) -> list[str]:
        """Model labels in menu order."""
        return list(self.log_evidence)

    def lbf(self, model_a: str, model_b: str) -> float:
        """log BF(A/B) = log E(A) - log E(B)."""
        return self.log_evidence[model_a] - self.log_evidence[model_b]

    def ranking(self) -> list[tuple[str, float]]:
        """Models ordered by decreasing log evidence; ties keep menu order."""
        return sorted(self.log_evidence.items(), key=lambda item: -item[1])

    def matrix(self) -> pd.DataFrame:
        """Full LBF matrix; the cell (A, B) holds log BF(A/B)."""
        values = np.array(list(self.log_evidence.values()))
        return pd.DataFrame(
            values[:, None] - values[None, :], index=self.labels, columns=self.labels
        )

    def lower_triangle(self) -> pd.DataFrame:
        """Pairwise LBFs below the diagonal, models ordered by menu position."""
        labels = self.labels
        rows = {
            row: [self.lbf(row, col) if i > j else np.nan for j, col in enumerate(labels)]
            for i, row in enumerate(labels)
        }
        return pd.DataFrame.from_dict(rows, orient="index", columns=labels).iloc[1:, :-1]


def trajectory_frame(ledgers: Mapping[str, EvidenceLedger]) -> pd.DataFrame:
    """Per-pair LBF trajectories, one column `A/B` for every pair with A before B."""
    labels = list(ledgers)
    columns = {}
    for i, model_a in enumerate(labels):
        for model_b in labels[i + 1 :]:
            trajectory = lbf_trajectory(ledgers[model_a], ledgers[model_b])
            columns[f"{model_a}/{model_b}"] = pd.Series(dict(trajectory), dtype=float)
    frame = pd.DataFrame(columns)
    frame.index.name = "index"
    return frame


def model_stream(master_seed: int, replicate: int, position: int) -> RngStream:
    """The random stream of the model at `position` of the menu in one replicate."""
    return RngStream(seed=master_seed).derive(replicate, position)


class ModelSelector(ModelSelectionPort):
    """Resolves model menus and runs one sequential engine per model."""

    def __init__(  # noqa: PLR0913
        self,
        *,
        menu_config: MenuConfig,
        engine_config: EngineConfig,
        tuning: HmcTuningConfig,
        master_seed: int = 0,
        executor: Optional[Executor] = None,
        checkpoint_stores: Optional[Callable[[int], CheckpointStorePort]] = None,
        record_draws: bool = True,
    ):
        self._menu_config = menu_config
        self._engine_config = engine_config
        self._tuning = tuning
        self._master_seed = master_seed
        self._executor = executor
        self._checkpoint_stores = checkpoint_stores
        self._record_draws = record_draws

    def _resolve(self, label: str, dataset: Dataset) -> ModelSpec:
        if label in self._menu_config.custom_models:
            return self._menu_config.custom_models[label]
        link = self._menu_config.link
        try:
            if label in ("EZ", "AZ"):
                assignment = self._menu_config.factor_assignment
                if assignment is None:
                    assignment = default_factor_assignment(dataset.p)
                return confirmatory_spec(
                    assignment, dataset.kind, link, approx_zero=label == "AZ"
                )
            if label == "SAT":
                return saturated_spec(dataset.p)
            efa = _EFA_PRESET.match(label)
            if efa:
                return exploratory_spec(dataset.p, int(efa.group(1)), dataset.kind, link)
        except (ValidationError, ValueError) as error:
            incompatible = self.IncompatibleSpecError(label=label, reason=str(error))
            log.error(incompatible, extra={"model": label})
            raise incompatible from error
        error = self.UnknownPresetError(label=label)
        log.error(error, extra={"model": label})
        raise error

    def build_menu(
        self, *, labels: Sequence[str], dataset: Dataset
    ) -> dict[str, ModelSpec]:
        """Resolve model labels into specs that fit the dataset."""
        menu = ModelMenu({label: self._resolve(label, dataset) for label in labels})
        for label, spec in menu.entries.items():
            reason = None
            if spec.p != dataset.p:
                reason = f"it has {spec.p} items, the dataset has {dataset.p}"
            elif spec.data_kind != dataset.kind:
                reason = (
                    f"it describes {spec.data_kind.value} items, the dataset holds"
                    + f" {dataset.kind.value} items"
                )
            if reason:
                error = self.IncompatibleSpecError(label=label, reason=reason)
                log.error(error, extra={"model": label})
                raise error
        return dict(menu.entries)

    def engine(
        self,
        *,
        label: str,
        spec: ModelSpec,
        dataset: Dataset,
        position: int,
        replicate: int = 0,
    ) -> SequentialEngine:
        """A fresh engine for one model of the menu."""
        store = (
            self._checkpoint_stores(replicate) if self._checkpoint_stores else None
        )
        return SequentialEngine(
            model=FactorModel(spec=spec, dataset=dataset),
            config=self._engine_config,
            tuning=self._tuning,
            stream=model_stream(self._master_seed, replicate, position),
            label=label,
            executor=self._executor,
            checkpoint_store=store,
            record_draws=self._record_draws,
        )

    async def run_menu(
        self,
        *,
        menu: Mapping[str, ModelSpec],
        dataset: Dataset,
        replicate: int = 0,
    ) -> dict[str, SequentialEngine]:
        """Run one engine per model over the same observation order, all in parallel."""
        engines = {
            label: self.engine(
                label=label,
                spec=menu[label],
                dataset=dataset,
                position=position,
                replicate=replicate,
            )
            for position, label in enumerate(menu)
        }
        log.info(
            "Running %i models on %i observations.",
            len(engines),
            dataset.n,
            extra={"models": list(engines), "replicate": replicate},
        )
        await asyncio.gather(
            *(asyncio.to_thread(engine.run) for engine in engines.values())
        )
        table = ComparisonTable.from_ledgers(
            {label: engine.ledger for label, engine in engines.items()}
        )
        best, best_value = table.ranking()[0]
        log.info(
            "Replicate %i finished, '%s' has the highest evidence.",
            replicate,
            best,
            extra={"replicate": replicate, "model": best, "log_evidence": best_value},
        )
        return engines
