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

"""Defines the data models shared by the inference engines.

Declarative descriptions (model specs, scenarios, snapshots) are pydantic models.
Containers of numerical state (datasets, parameter points, particle populations) are
plain dataclasses holding numpy arrays.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

DEFAULT_APPROX_ZERO_SD = 0.1
DEFAULT_INTERCEPT_PRIOR_SD = 10.0
DEFAULT_C0 = 2.5
DEFAULT_LKJ_ETA = 2.0


class Link(str, Enum):
    """
    The link between the linear predictor and the observed items. Can be one of:
        - IDENTITY (continuous items, Gaussian residuals)
        - LOGIT (binary items)
        - PROBIT (binary items)
    """

    IDENTITY = "identity"
    LOGIT = "logit"
    PROBIT = "probit"


class DataKind(str, Enum):
    """The kind of the observed items."""

    CONTINUOUS = "continuous"
    BINARY = "binary"


class CellKind(str, Enum):
    """
    The role of a single cell of the loading matrix. Can be one of:
        - FIXED (held at a constant, e.g. a leading 1 or an exact zero)
        - FREE (zero-centred normal prior)
        - APPROX_ZERO (normal prior concentrated around zero)
    """

    FIXED = "fixed"
    FREE = "free"
    APPROX_ZERO = "approx_zero"


class FactorCovMode(str, Enum):
    """How the covariance of the latent factors is modelled."""

    IDENTITY = "identity"
    LKJ = "lkj"
    INV_WISHART = "inv_wishart"


class ResidualMode(str, Enum):
    """How the residual covariance of the items is modelled."""

    DIAGONAL_INV_GAMMA = "diagonal_inv_gamma"
    FIXED_IDENTITY = "fixed_identity"


class ModelStructure(str, Enum):
    """
    The identification strategy of a factor model. Can be one of:
        - CONFIRMATORY (leading loadings fixed to 1, cross-loadings exactly zero)
        - APPROX_ZERO (leading loadings fixed to 1, cross-loadings near zero)
        - EXPLORATORY (lower-triangular loadings, signs fixed at read-out)
        - SATURATED (no factors, full item covariance)
    """

    CONFIRMATORY = "confirmatory"
    APPROX_ZERO = "approx_zero"
    EXPLORATORY = "exploratory"
    SATURATED = "saturated"


class ProposalKind(str, Enum):
    """Proposal used for the latent variables of a new observation."""

    PRIOR = "prior"
    LAPLACE = "laplace"
    VB = "vb"


class Scenario(str, Enum):
    """Built-in data generating processes."""

    CONTINUOUS1 = "continuous1"
    CONTINUOUS2 = "continuous2"
    BINARY1 = "binary1"


class InitEvidenceMode(str, Enum):
    """
    How the evidence of the observations used for the batch initialization is booked:
        - IMPORTANCE (prior importance sampling over the initial block)
        - RELATIVE_ONLY (zero increments, evidence is relative to the initial block)
    """

    IMPORTANCE = "importance"
    RELATIVE_ONLY = "relative_only"


class LoadingCell(BaseModel):
    """A single cell of a loading pattern."""

    kind: CellKind
    value: float = Field(
        0.0, description="The constant held by the cell. Only used for FIXED cells."
    )
    model_config = ConfigDict(frozen=True)

    @classmethod
    def fixed(cls, value: float) -> "LoadingCell":
        """A cell held at a constant."""
        return cls(kind=CellKind.FIXED, value=value)

    @classmethod
    def free(cls) -> "LoadingCell":
        """A freely estimated cell."""
        return cls(kind=CellKind.FREE)

    @classmethod
    def approx_zero(cls) -> "LoadingCell":
        """A cell with a prior concentrated around zero."""
        return cls(kind=CellKind.APPROX_ZERO)


class FactorCovariance(BaseModel):
    """Prior on the factor covariance matrix."""

    mode: FactorCovMode
    eta: float = Field(
        DEFAULT_LKJ_ETA, gt=0, description="Shape of the LKJ prior (LKJ mode only)."
    )
    df: Optional[float] = Field(
        None,
        description="Degrees of freedom of the inverse Wishart prior."
        + " `None` means k + 4.",
    )
    scale: Optional[tuple[tuple[float, ...], ...]] = Field(
        None,
        description="Scale matrix of the inverse Wishart prior. `None` means identity.",
    )
    model_config = ConfigDict(frozen=True)

    def resolved_df(self, k: int) -> float:
        """Degrees of freedom with the default applied."""
        return float(k + 4) if self.df is None else float(self.df)

    def resolved_scale(self, k: int) -> np.ndarray:
        """Scale matrix with the default applied."""
        return np.eye(k) if self.scale is None else np.asarray(self.scale, dtype=float)


class ModelSpec(BaseModel):
    """A declarative description of one factor model variant."""

    p: int = Field(..., ge=1, description="Number of observed items.")
    k: int = Field(..., ge=0, description="Number of latent factors.")
    link: Link
    structure: ModelStructure
    loading_pattern: tuple[tuple[LoadingCell, ...], ...] = Field(
        ..., description="p rows of k cells each."
    )
    factor_cov: FactorCovariance = FactorCovariance(mode=FactorCovMode.IDENTITY)
    residual_mode: ResidualMode
    c0: float = Field(
        DEFAULT_C0, gt=1, description="Shape of the inverse-gamma residual prior."
    )
    loading_prior_sd: Optional[float] = Field(
        None,
        gt=0,
        description="Standard deviation of the prior on free loadings."
        + " `None` means 1 for continuous and 2 for binary items.",
    )
    approx_zero_sd: float = Field(DEFAULT_APPROX_ZERO_SD, gt=0)
    intercept_prior_sd: float = Field(DEFAULT_INTERCEPT_PRIOR_SD, gt=0)
    saturated_eta: float = Field(
        DEFAULT_LKJ_ETA,
        gt=0,
        description="Shape of the LKJ prior on the item correlation of saturated models.",
    )
    model_config = ConfigDict(frozen=True, title="Factor Model Specification")

    @model_validator(mode="after")
    def check_consistency(self) -> "ModelSpec":
        """Enforce the structural invariants of a model spec."""
        if len(self.loading_pattern) != self.p or any(
            len(row) != self.k for row in self.loading_pattern
        ):
            raise ValueError(f"The loading pattern must be a {self.p}x{self.k} grid.")

        if self.link == Link.IDENTITY:
            if self.residual_mode != ResidualMode.DIAGONAL_INV_GAMMA:
                raise ValueError("Continuous models need inverse-gamma residuals.")
        elif self.residual_mode != ResidualMode.FIXED_IDENTITY:
            raise ValueError("Binary models need fixed identity residuals.")

        if self.structure == ModelStructure.SATURATED:
            if self.k != 0 or self.link != Link.IDENTITY:
                raise ValueError("Saturated models have no factors and continuous items.")
        elif self.k == 0:
            raise ValueError("Only saturated models may have zero factors.")

        has_approx_zero = any(
            cell.kind == CellKind.APPROX_ZERO
            for row in self.loading_pattern
            for cell in row
        )
        if has_approx_zero and self.structure != ModelStructure.APPROX_ZERO:
            raise ValueError("Approximate-zero cells require the APPROX_ZERO structure.")

        if self.structure == ModelStructure.EXPLORATORY:
            for row in range(self.p):
                for col in range(row + 1, self.k):
                    cell = self.loading_pattern[row][col]
                    if cell.kind != CellKind.FIXED or cell.value != 0.0:
                        raise ValueError(
                            "Exploratory loadings must be lower triangular, found"
                            + f" a non-zero cell at ({row}, {col})."
                        )
            if self.k > self.p:
                raise ValueError("Exploratory models need at least k items.")
        elif self.structure != ModelStructure.SATURATED:
            for col in range(self.k):
                if not any(
                    row[col].kind == CellKind.FIXED and row[col].value == 1.0
                    for row in self.loading_pattern
                ):
                    raise ValueError(f"Factor {col + 1} has no loading fixed to 1.")

        if (
            self.factor_cov.mode == FactorCovMode.INV_WISHART
            and self.factor_cov.resolved_df(self.k) <= self.k - 1
        ):
            raise ValueError("The inverse Wishart df must exceed k - 1.")
        return self

    @property
    def data_kind(self) -> DataKind:
        """The kind of data the model describes."""
        return DataKind.CONTINUOUS if self.link == Link.IDENTITY else DataKind.BINARY

    @property
    def effective_loading_prior_sd(self) -> float:
        """Prior sd on free loadings with the link-dependent default applied."""
        if self.loading_prior_sd is not None:
            return self.loading_prior_sd
        return 1.0 if self.link == Link.IDENTITY else 2.0

    @property
    def has_residuals(self) -> bool:
        """Whether the model carries residual variances."""
        return self.residual_mode == ResidualMode.DIAGONAL_INV_GAMMA

    def cells_of_kind(self, *kinds: CellKind) -> list[tuple[int, int]]:
        """Row-major (row, col) positions of all cells with one of the given kinds."""
        return [
            (row, col)
            for row in range(self.p)
            for col in range(self.k)
            if self.loading_pattern[row][col].kind in kinds
        ]

    def fixed_loadings(self) -> np.ndarray:
        """The loading matrix with fixed cells set and all other cells zero."""
        loadings = np.zeros((self.p, self.k))
        for row in range(self.p):
            for col in range(self.k):
                cell = self.loading_pattern[row][col]
                if cell.kind == CellKind.FIXED:
                    loadings[row, col] = cell.value
        return loadings

    def leading_rows(self) -> list[int]:
        """Row of the loading that fixes the sign of each factor column."""
        if self.structure == ModelStructure.EXPLORATORY:
            return list(range(self.k))
        leading = []
        for col in range(self.k):
            leading.append(
                next(
                    row
                    for row in range(self.p)
                    if self.loading_pattern[row][col].kind == CellKind.FIXED
                    and self.loading_pattern[row][col].value != 0.0
                )
            )
        return leading


@dataclass(frozen=True)
class Dataset:
    """An n x p matrix of observations together with item labels."""

    values: np.ndarray
    kind: DataKind
    item_names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError("Dataset values must form a matrix.")
        if values.shape[1] != len(self.item_names):
            raise ValueError("Number of item names and columns differ.")
        if self.kind == DataKind.BINARY and not np.all(np.isin(values, (0.0, 1.0))):
            raise ValueError("Binary datasets may only contain 0 and 1.")
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        """Number of observations."""
        return self.values.shape[0]

    @property
    def p(self) -> int:
        """Number of items."""
        return self.values.shape[1]

    def empirical_cov(self) -> np.ndarray:
        """Sample covariance of the items."""
        return np.atleast_2d(np.cov(self.values, rowvar=False))


@dataclass(frozen=True)
class Theta:
    """One parameter point of a factor model.

    For saturated models `loadings` is p x 0, `phi` is 0 x 0, `psi` holds the item
    variances and `residual_corr` the item correlation matrix.
    """

    alpha: np.ndarray
    loadings: np.ndarray
    phi: np.ndarray
    psi: Optional[np.ndarray] = None
    residual_corr: Optional[np.ndarray] = None

    def implied_cov(self) -> np.ndarray:
        """Marginal covariance of the items."""
        if self.residual_corr is not None:
            scale = np.sqrt(self.psi)
            return scale[:, None] * self.residual_corr * scale[None, :]
        common = self.loadings @ self.phi @ self.loadings.T
        return common + np.diag(self.psi) if self.psi is not None else common


@dataclass(frozen=True)
class ParameterLayout:
    """Maps slices of the flat unconstrained vector to the parts of a Theta."""

    alpha: slice
    loadings: slice
    phi: slice
    psi: slice
    residual_corr: slice
    loading_cells: tuple[tuple[int, int], ...]

    @property
    def dim(self) -> int:
        """Dimension of the unconstrained parameter vector."""
        return self.residual_corr.stop


@dataclass(frozen=True)
class UnconstrainedTheta:
    """A parameter point on the unconstrained scale."""

    values: np.ndarray
    layout: ParameterLayout


@dataclass(frozen=True)
class LatentBlock:
    """Latent rows of one particle, one row per processed observation."""

    z_rows: np.ndarray


@dataclass
class EvidenceLedger:
    """Per-observation log predictive increments and their running sum."""

    increments: list[float] = field(default_factory=list)
    cumulative: list[float] = field(default_factory=list)
    # leading increments booked as zero because their evidence was not estimated:
    available_from: int = 0

    def append(self, increment: float) -> None:
        """Book the log predictive increment of the next observation."""
        previous = self.cumulative[-1] if self.cumulative else 0.0
        self.increments.append(float(increment))
        self.cumulative.append(previous + float(increment))

    @property
    def log_evidence(self) -> float:
        """Cumulative log evidence of all booked observations."""
        return self.cumulative[-1] if self.cumulative else 0.0

    def __len__(self) -> int:
        return len(self.increments)


@dataclass
class DegeneracyPolicy:
    """When to resample and where resampling has fired."""

    ess_threshold: float
    trigger_log: list[int] = field(default_factory=list)
    trigger_ess: list[float] = field(default_factory=list)

    def check(self, n_particles: int) -> None:
        """Validate the threshold against the population size."""
        if not 1 < self.ess_threshold <= n_particles:
            raise ValueError(
                f"The ESS threshold {self.ess_threshold} must lie in (1,"
                + f" {n_particles}]."
            )

    def should_resample(self, ess: float) -> bool:
        """Whether a population with the given ESS is degenerate."""
        return ess < self.ess_threshold


@dataclass
class ParticleSet:
    """A weighted particle population.

    `latent` holds an (N, i, k) array of latent rows for augmented models. Random
    streams belong to particle slots and are not moved by resampling.
    """

    thetas: list
    logw: np.ndarray
    rng_streams: list
    i_processed: int = 0
    latent: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        """Number of particles."""
        return len(self.thetas)

    def latent_block(self, index: int) -> LatentBlock:
        """The latent rows of one particle."""
        if self.latent is None:
            raise ValueError("This particle set carries no latent variables.")
        return LatentBlock(z_rows=self.latent[index])


class HmcConfig(BaseModel):
    """Frozen tuning parameters of the HMC kernel."""

    step_size: float = Field(..., gt=0)
    n_leapfrog: int = Field(..., ge=1)
    mass_diag: tuple[float, ...] = Field(
        ...,
        description="Diagonal of the inverse metric, i.e. a variance estimate per"
        + " unconstrained coordinate.",
    )
    target_accept: float = Field(0.8, gt=0, lt=1)
    adapt_steps: int = Field(0, ge=0)
    model_config = ConfigDict(frozen=True)

    @model_validator(mode="after")
    def check_mass(self) -> "HmcConfig":
        """Mass entries must be positive."""
        if any(value <= 0 for value in self.mass_diag):
            raise ValueError("All mass matrix entries must be positive.")
        return self

    @property
    def mass(self) -> np.ndarray:
        """The mass diagonal as an array."""
        return np.asarray(self.mass_diag, dtype=float)


class ChainStats(BaseModel):
    """Diagnostics of one or several HMC chains."""

    n_steps: int = 0
    n_accepted: int = 0
    n_divergent: int = 0
    final_step_size: float = 0.0

    @property
    def accept_rate(self) -> float:
        """Accepted over total proposals."""
        return self.n_accepted / self.n_steps if self.n_steps else 0.0

    @property
    def divergence_rate(self) -> float:
        """Divergent over total proposals."""
        return self.n_divergent / self.n_steps if self.n_steps else 0.0

    def merge(self, other: "ChainStats") -> "ChainStats":
        """Pool the counts of two sets of chains."""
        return ChainStats(
            n_steps=self.n_steps + other.n_steps,
            n_accepted=self.n_accepted + other.n_accepted,
            n_divergent=self.n_divergent + other.n_divergent,
            final_step_size=other.final_step_size or self.final_step_size,
        )


class TrueParameters(BaseModel):
    """The parameters used to simulate a dataset, written as a sidecar."""

    scenario: str
    n: int
    seed: int
    link: Link
    alpha: list[float]
    loadings: list[list[float]]
    phi: list[list[float]]
    psi: Optional[list[float]] = None


class StreamState(BaseModel):
    """The (seed, stream_id, counter) triple of a random stream."""

    seed: int
    stream_id: int
    counter: int


class EngineSnapshot(BaseModel):
    """Everything needed to resume an engine mid-stream.

    Log-weights of -inf are stored as `None`.
    """

    version: int = 1
    label: str
    model_key: str = Field(..., description="Identifies the model of the engine.")
    i_processed: int
    thetas: list[dict]
    logw: list[Optional[float]]
    latent: Optional[list[list[list[float]]]] = None
    stream: StreamState
    particle_streams: list[StreamState]
    increments: list[float]
    cumulative: list[float]
    available_from: int = 0
    ess_threshold: float
    trigger_log: list[int]
    trigger_ess: list[float]
    ess_history: list[float]
    model_config = ConfigDict(title="Engine Checkpoint")


@dataclass(frozen=True)
class DrawSnapshot:
    """Sign-fixed parameter draws of a population at one point of the stream."""

    index: int
    logw: np.ndarray
    values: np.ndarray


class RunSummary(BaseModel):
    """Outcome of an analysis run."""

    output_dir: str
    n_observations: int
    models: list[str]
    final_log_evidence: dict[str, list[float]] = Field(
        ..., description="Final log evidence of every model, one value per replicate."
    )
    trigger_counts: dict[str, list[int]] = Field(
        ..., description="Resample-jitter events of every model, one count per replicate."
    )
